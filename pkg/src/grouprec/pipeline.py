"""Multi-seed experiment drivers shared by the CLI and the acceptance suite."""
from __future__ import annotations

import logging
from dataclasses import replace
from typing import Sequence

from .data import RatingDataset
from .evaluation import EvalReport, EvalRow, compare_models, make_group_sets, sweep_h, train_bases
from .groups import HFunction
from .models import HeadInput
from .training import TrainConfig

log = logging.getLogger(__name__)

LARGE_DATASET = 100_000


def default_head_layers(dataset: RatingDataset) -> tuple[int, ...]:
    if len(dataset.train) <= LARGE_DATASET:
        return (64, 32, 16, 8)
    return (128, 64, 32, 16, 8)


def run_sweep(dataset: RatingDataset, kind: str, sizes: Sequence[int], seeds: Sequence[int],
              h_list: Sequence[HFunction | str] = tuple(HFunction), config: TrainConfig = TrainConfig(),
              layers: Sequence[int] | None = None, counts: dict | None = None,
              head_input: HeadInput | str = HeadInput.EMBEDDING) -> list[EvalRow]:
    """h-function sweep for one base kind; a fresh base and group sets per seed."""
    layers = tuple(layers or default_head_layers(dataset))
    rows = []
    for seed in seeds:
        cfg = replace(config, seed=seed)
        base = train_bases(dataset, cfg, kinds=[kind.upper()])[kind.upper()]
        sets = make_group_sets(dataset, sizes, seed, counts)
        log.info("sweep %s seed %d", kind, seed)
        rows += sweep_h(base, dataset, sets, h_list, cfg, layers, head_input)
    return rows


def run_compare(dataset: RatingDataset, sizes: Sequence[int], seeds: Sequence[int],
                config: TrainConfig = TrainConfig(), layers: Sequence[int] | None = None,
                counts: dict | None = None, head_input: HeadInput | str = HeadInput.EMBEDDING) -> list[EvalReport]:
    """Six-predictor comparison; GMF and MLP bases and group sets per seed."""
    layers = tuple(layers or default_head_layers(dataset))
    reports = []
    for seed in seeds:
        cfg = replace(config, seed=seed)
        bases = train_bases(dataset, cfg)
        sets = make_group_sets(dataset, sizes, seed, counts)
        log.info("compare seed %d", seed)
        reports += compare_models(dataset, bases, sets, cfg, layers, head_input=head_input)
    return reports
