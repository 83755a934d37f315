"""Group recommendation with learned neural aggregation over GMF/MLP bases."""

__version__ = "0.1.0"
