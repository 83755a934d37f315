"""Group MSE evaluation, the h-function sweep and the baseline comparison."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import RatingDataset
from .groups import CONVENTIONS, GroupSample, HFunction, as_arrays, default_group_counts, generate_groups
from .models import (DEFAULT_HEAD, BaseModel, GroupHead, GroupModel, HeadInput, ModelKind, ipa_batch,
                     moavg_batch)
from .training import TrainConfig, train_group_head, train_individual

# (members (n,G), items (n,)) -> predictions (n,)
Predictor = Callable[[np.ndarray, np.ndarray], np.ndarray]

PREDICTORS = ("GGMF", "GMLP", "IPA-GMF", "IPA-MLP", "MO-AVG-GMF", "MO-AVG-MLP")
ORACLE = "ORACLE-FLOOR"
SUMMARY_HEADER = ["dataset", "model", "h", "G", "mse", "n_samples", "seed"]
SAMPLE_HEADER = ["group_id", "item", "G", "prediction", "mse_gi"]


def _fsum_mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


def group_mse(predictor: Predictor, groups: Sequence[GroupSample]) -> tuple[float, np.ndarray, np.ndarray]:
    """Return ``(overall, per_sample, predictions)``.

    Per sample: mean over members of ``(prediction - member rating)**2``.
    The overall value is the exactly rounded mean of the per-sample values.
    """
    if not groups:
        raise ValueError("cannot evaluate an empty group set")
    members, items, ratings = as_arrays(groups)
    preds = np.asarray(predictor(members, items), dtype=np.float64)
    per_sample = ((preds[:, None] - ratings) ** 2).mean(axis=1)
    return _fsum_mean(per_sample.tolist()), per_sample, preds


def oracle_floor(groups: Sequence[GroupSample]) -> Predictor:
    """Predicts each group's member mean, the per-sample MSE minimiser. Not a paper model."""
    means = {}
    for g in groups:
        means[(g.members, g.item)] = math.fsum(g.member_ratings) / g.size

    def predict(members, items):
        return np.array([means[(tuple(int(u) for u in m), int(i))] for m, i in zip(members, items)])
    return predict


def predictor_for(name: str, base: BaseModel, model: GroupModel | None = None) -> Predictor:
    if name in ("GGMF", "GMLP"):
        if model is None:
            raise ValueError(f"{name} needs a trained group model")
        return model.predict
    if name.startswith("IPA-"):
        return lambda m, i: ipa_batch(base, m, i)
    if name.startswith("MO-AVG-"):
        return lambda m, i: moavg_batch(base, m, i)
    raise ValueError(f"unknown predictor {name!r}")


@dataclass
class EvalRow:
    dataset: str
    model: str
    h: str
    G: int
    mse: float
    n_samples: int
    seed: int
    per_sample: np.ndarray = field(repr=False, default=None)
    predictions: np.ndarray = field(repr=False, default=None)

    def summary(self) -> list:
        return [self.dataset, self.model, self.h, self.G, repr(self.mse), self.n_samples, self.seed]


@dataclass
class EvalReport:
    dataset: str
    group_size: int
    rows: list[EvalRow]
    metadata: dict = field(default_factory=dict)

    def mse(self, model: str, seed: int | None = None) -> float:
        vals = [r.mse for r in self.rows if r.model == model and (seed is None or r.seed == seed)]
        if not vals:
            raise KeyError(model)
        return _fsum_mean(vals)


def config_digest(config: TrainConfig, **extra) -> str:
    d = {k: (v.value if hasattr(v, "value") else v) for k, v in asdict(config).items()}
    d.update(extra)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def write_summary_csv(rows: Iterable[EvalRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for r in rows:
            w.writerow(r.summary())


def write_samples_csv(row: EvalRow, groups: Sequence[GroupSample], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SAMPLE_HEADER)
        for k, (g, p, e) in enumerate(zip(groups, row.predictions.tolist(), row.per_sample.tolist())):
            w.writerow([k, g.item, g.size, repr(p), repr(e)])


def read_summary_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["G"], r["mse"] = int(r["G"]), float(r["mse"])
        r["n_samples"], r["seed"] = int(r["n_samples"]), int(r["seed"])
    return rows


def quartiles(values: Sequence[float]) -> dict:
    q = np.quantile(np.asarray(values, dtype=np.float64), [0.0, 0.25, 0.5, 0.75, 1.0])
    return dict(zip(["min", "q1", "median", "q3", "max"], q.tolist()))


def aggregate_summary(rows: Sequence[dict]) -> list[dict]:
    """Mean MSE over seeds per (dataset, model, h, G), with per-seed quartiles."""
    cells: dict[tuple, list[float]] = {}
    for r in rows:
        cells.setdefault((r["dataset"], r["model"], r["h"], r["G"]), []).append(r["mse"])
    out = []
    for (ds, model, h, g), vals in sorted(cells.items(), key=lambda kv: (kv[0][0], kv[0][3], kv[0][1], kv[0][2])):
        out.append({"dataset": ds, "model": model, "h": h, "G": g, "mean_mse": _fsum_mean(vals),
                    "n_seeds": len(vals), **quartiles(vals)})
    return out


def workers() -> int:
    try:
        return max(1, int(os.environ.get("GROUPREC_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn, jobs: list) -> list:
    """Run independent cells, in order; parallel when GROUPREC_THREADS > 1."""
    n = workers()
    if n == 1 or len(jobs) < 2:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, *zip(*jobs)))


@dataclass
class GroupSets:
    """Train and test group lists for one group size."""

    size: int
    train: list[GroupSample]
    test: list[GroupSample]


def make_group_sets(dataset: RatingDataset, sizes: Sequence[int], seed: int,
                    counts: dict[int, tuple[int, int]] | None = None) -> dict[int, GroupSets]:
    """Generate train/test groups per size; paper-scaled counts unless given."""
    out = {}
    for g in sizes:
        n_train, n_test = (counts or {}).get(g) or default_group_counts(dataset, g)
        out[g] = GroupSets(
            g,
            generate_groups(dataset, "train", g, n_train, seed=group_seed(seed, g, 0)),
            generate_groups(dataset, "test", g, n_test, seed=group_seed(seed, g, 1)),
        )
    return out


def group_seed(seed: int, size: int, split: int) -> int:
    return int(np.random.SeedSequence([seed, size, split]).generate_state(1)[0])


def train_head(base: BaseModel, sets: GroupSets, config: TrainConfig,
               layers: Sequence[int] = DEFAULT_HEAD, head_input: HeadInput | str = HeadInput.EMBEDDING) -> GroupModel:
    head = GroupHead.init(base.num_users, layers, seed=config.seed, input_mode=head_input, latent_dim=base.k)
    model = GroupModel(base, head, sets.size)
    train_group_head(model, sets.train, config)
    return model


def _sweep_cell(dataset_name: str, base: BaseModel, sets: GroupSets, h: str, config: TrainConfig,
                layers: Sequence[int], head_input: str) -> EvalRow:
    cfg = TrainConfig(**{**asdict(config), "h": HFunction(h)})
    model = train_head(base, sets, cfg, layers, head_input)
    mse, per, preds = group_mse(model.predict, sets.test)
    return EvalRow(dataset_name, model.name, HFunction(h).value, sets.size, mse, len(sets.test),
                   config.seed, per, preds)


def sweep_h(base: BaseModel, dataset: RatingDataset, group_sets: dict[int, GroupSets],
            h_list: Sequence[HFunction | str] = tuple(HFunction), config: TrainConfig = TrainConfig(),
            layers: Sequence[int] = DEFAULT_HEAD, head_input: HeadInput | str = HeadInput.EMBEDDING) -> list[EvalRow]:
    """Train one head per (h, G) on the train groups and score it on the test groups."""
    jobs = [(dataset.name, base, group_sets[g], HFunction(h).value, config, tuple(layers),
             HeadInput(head_input).value)
            for g in sorted(group_sets) for h in h_list]
    return _map(_sweep_cell, jobs)


def compare_models(dataset: RatingDataset, bases: dict[str, BaseModel], group_sets: dict[int, GroupSets],
                   config: TrainConfig = TrainConfig(), layers: Sequence[int] = DEFAULT_HEAD,
                   with_oracle: bool = True, head_input: HeadInput | str = HeadInput.EMBEDDING) -> list[EvalReport]:
    """Evaluate the six predictors (and the member-mean floor) for every size.

    ``bases`` maps "GMF"/"MLP" to trained, frozen base models. Sizes of 1
    skip head training; only the IPA and MO-AVG predictors are scored.
    """
    reports = []
    for g in sorted(group_sets):
        sets = group_sets[g]
        rows = []
        for kind in ("GMF", "MLP"):
            base = bases.get(kind)
            if base is None:
                continue
            names = [f"IPA-{kind}", f"MO-AVG-{kind}"]
            model = None
            if g > 1:
                model = train_head(base, sets, config, layers, head_input)
                names.insert(0, "GGMF" if kind == "GMF" else "GMLP")
            for name in names:
                mse, per, preds = group_mse(predictor_for(name, base, model), sets.test)
                h = config.h.value if name in ("GGMF", "GMLP") else ""
                rows.append(EvalRow(dataset.name, name, h, g, mse, len(sets.test), config.seed, per, preds))
        if with_oracle:
            mse, per, preds = group_mse(oracle_floor(sets.test), sets.test)
            rows.append(EvalRow(dataset.name, ORACLE, "", g, mse, len(sets.test), config.seed, per, preds))
        reports.append(EvalReport(dataset.name, g, rows, {
            "seed": config.seed, "head_input": HeadInput(head_input).value,
            "config_digest": config_digest(config, layers=list(layers), head_input=HeadInput(head_input).value),
            **CONVENTIONS,
        }))
    return reports


def train_bases(dataset: RatingDataset, config: TrainConfig, k: int = 8,
                kinds: Sequence[str] = ("GMF", "MLP"), tower: Sequence[int] = (64, 32, 16, 8)) -> dict[str, BaseModel]:
    out = {}
    for kind in kinds:
        base = BaseModel.init(ModelKind(kind.lower()), dataset.num_users, dataset.num_items, k, tower,
                              seed=config.seed)
        train_individual(base, dataset, config)
        out[kind] = base
    return out
