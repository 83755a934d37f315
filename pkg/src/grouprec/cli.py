"""Command line entry point: ``grouprec <subcommand> ...``.

Every command writes into ``<runs>/<command>-<manifest id>/`` and prints that
directory on the last line of stdout. The manifest id hashes the command,
the effective configuration and the digests of all input files, so rerunning
with identical inputs targets the same directory with identical outputs.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint as ck
from .data import DataFormatError, RatingDataset, dataset_stats, load_ratings, write_ratings
from .evaluation import (ORACLE, EvalRow, group_seed, aggregate_summary, group_mse, oracle_floor,
                         predictor_for, read_summary_csv, write_samples_csv, write_summary_csv)
from .groups import (GroupFileError, HFunction, default_group_counts, generate_groups,
                     read_groups, write_groups)
from .models import BaseModel, GroupHead, GroupModel, HeadInput, ModelKind
from .numkit import ConfigurationError
from .pipeline import default_head_layers, run_compare, run_sweep
from .training import TrainConfig, train_group_head, train_individual

log = logging.getLogger("grouprec")

DEFAULTS = {
    "runs": "runs",
    "sep": ";",
    "name": None,
    "scale": None,
    "model": "gmf",
    "k": 8,
    "tower": "64,32,16,8",
    "lr": 0.001,
    "batch": 64,
    "epochs": 200,
    "patience": 5,
    "val_frac": 0.1,
    "seed": 1,
    "seeds": "1,2,3",
    "sizes": "2,5,8",
    "h": "mean",
    "h_list": "min,max,mean,median,mode",
    "layers": None,
    "head_input": "embedding",
    "count": None,
    "test_count": None,
    "paper_counts": False,
    "allow_size_mismatch": False,
}


class CommandError(Exception):
    pass


@dataclass
class RunManifest:
    id: str
    command: str
    argv: list[str]
    config: dict
    config_digest: str
    inputs: dict[str, str]
    seeds: list[int]
    version: str = __version__
    python: str = platform.python_version()
    numpy: str = np.__version__
    timings: dict[str, float] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)


def file_digest(path) -> str:
    h = hashlib.sha256()
    p = Path(path)
    files = sorted(f for f in p.rglob("*") if f.is_file() and f.name != "manifest.json") if p.is_dir() else [p]
    for f in files:
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def _ints(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(x) for x in text]
    return [int(x) for x in str(text).split(",") if x.strip()]


def _effective(args: argparse.Namespace, keys) -> dict:
    config = {}
    if getattr(args, "config", None):
        config = json.loads(Path(args.config).read_text())
    out = {}
    for key in keys:
        flag = getattr(args, key, None)
        if flag is not None and flag is not False:
            out[key] = flag
        elif key in config:
            out[key] = config[key]
        else:
            out[key] = DEFAULTS.get(key)
    return out


class Run:
    """Output directory plus manifest for one command invocation."""

    def __init__(self, command: str, argv: list[str], config: dict, inputs: dict[str, str], seeds):
        cfg_json = json.dumps(config, sort_keys=True, default=str)
        cfg_digest = hashlib.sha256(cfg_json.encode()).hexdigest()
        ident = hashlib.sha256(
            json.dumps([command, cfg_json, sorted(inputs.items())]).encode()).hexdigest()[:12]
        self.manifest = RunManifest(ident, command, argv, config, cfg_digest, inputs, list(seeds))
        self.dir = Path(config.get("runs") or "runs") / f"{command}-{ident}"
        self.dir.mkdir(parents=True, exist_ok=True)
        self._t0 = time.perf_counter()

    def path(self, name: str) -> Path:
        self.manifest.outputs.append(name)
        p = self.dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def lap(self, label: str) -> None:
        self.manifest.timings[label] = round(time.perf_counter() - self._t0, 3)

    def finish(self) -> Path:
        self.lap("total")
        for name in self.manifest.outputs:
            if not (self.dir / name).exists():
                raise CommandError(f"expected output {name} was not written")
        (self.dir / "manifest.json").write_text(json.dumps(asdict(self.manifest), indent=2, default=str) + "\n")
        return self.dir


def load_bundle(path) -> RatingDataset:
    path = Path(path)
    meta_file = path / "dataset.json"
    if not meta_file.exists():
        raise CommandError(f"{path} is not a dataset bundle (missing dataset.json); run `grouprec ingest` first")
    meta = json.loads(meta_file.read_text())
    return load_ratings(path / "train.csv", path / "test.csv", sep=";",
                        scale=(meta["scale_min"], meta["scale_max"]), name=meta["name"])


def _train_config(cfg: dict, seed: int | None = None, h: str | None = None) -> TrainConfig:
    return TrainConfig(lr=float(cfg["lr"]), batch_size=int(cfg["batch"]), max_epochs=int(cfg["epochs"]),
                       patience=int(cfg["patience"]), validation_fraction=float(cfg["val_frac"]),
                       seed=int(cfg["seed"] if seed is None else seed), h=HFunction(h or cfg.get("h") or "mean"))


def _layers(cfg: dict, dataset: RatingDataset) -> tuple[int, ...]:
    return tuple(_ints(cfg["layers"])) if cfg.get("layers") else default_head_layers(dataset)


def _counts(cfg: dict, sizes) -> dict | None:
    if cfg.get("count") is None:
        return None
    n = int(cfg["count"])
    return {g: (n, int(cfg["test_count"]) if cfg.get("test_count") is not None else n) for g in sizes}


TRAIN_KEYS = ["lr", "batch", "epochs", "patience", "val_frac"]


def cmd_ingest(args) -> Path:
    cfg = _effective(args, ["runs", "sep", "name", "scale"])
    for p in (args.train, args.test):
        if not Path(p).exists():
            raise CommandError(f"ratings file not found: {p}")
    scale = tuple(float(x) for x in cfg["scale"].split(",")) if cfg["scale"] else None
    ds = load_ratings(args.train, args.test, sep=cfg["sep"], scale=scale,
                      name=cfg["name"] or Path(args.train).stem)
    run = Run("ingest", sys.argv[1:], cfg, {"train": file_digest(args.train), "test": file_digest(args.test)}, [])
    write_ratings(ds, "train", run.path("train.csv"))
    write_ratings(ds, "test", run.path("test.csv"))
    stats = dataset_stats(ds)
    run.path("stats.txt").write_text(stats.to_text())
    run.path("stats.csv").write_text(stats.to_csv())
    meta = {"name": ds.name, "scale_min": ds.scale_min, "scale_max": ds.scale_max,
            "id_map_digest": ds.id_map_digest(), "digest": ds.digest(), "manifest_id": run.manifest.id}
    run.path("dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(stats.to_text(), end="")
    return run.finish()


def cmd_train_base(args) -> Path:
    cfg = _effective(args, ["runs", "model", "k", "tower", "seed", *TRAIN_KEYS])
    ds = load_bundle(args.dataset)
    run = Run("train-base", sys.argv[1:], cfg, {"dataset": ds.digest()}, [int(cfg["seed"])])
    tc = _train_config(cfg)
    base = BaseModel.init(ModelKind(cfg["model"]), ds.num_users, ds.num_items, int(cfg["k"]),
                          _ints(cfg["tower"]), seed=tc.seed)
    ckpt = run.path("base.ckpt")
    extra = {"manifest_id": run.manifest.id, "dataset": ds.name}

    def snapshot(model):
        ck.save(ck.base_to_bytes(model, ds.id_map_digest(), extra), ckpt)

    _, trace = train_individual(base, ds, tc, on_improve=snapshot)
    snapshot(base)
    trace.to_csv(run.path("trace.csv"))
    run.lap("train")
    pred = base.predict(ds.test.users, ds.test.items)
    mae = float(np.abs(pred - ds.test.ratings).mean())
    print(f"best_epoch={trace.best_epoch} val_mae={trace.val_loss[trace.best_epoch]!r} test_mae={mae!r}")
    return run.finish()


def cmd_gen_groups(args) -> Path:
    cfg = _effective(args, ["runs", "count", "test_count", "paper_counts", "seed"])
    ds = load_bundle(args.dataset)
    size = int(args.size)
    if cfg["count"] is not None:
        n_train = int(cfg["count"])
        n_test = int(cfg["test_count"]) if cfg["test_count"] is not None else n_train
    else:
        n_train, n_test = default_group_counts(ds, size)
    cfg["size"] = size
    run = Run("gen-groups", sys.argv[1:], cfg, {"dataset": ds.digest()}, [int(cfg["seed"])])
    seed = int(cfg["seed"])
    train = generate_groups(ds, "train", size, n_train, seed=group_seed(seed, size, 0))
    test = generate_groups(ds, "test", size, n_test, seed=group_seed(seed, size, 1))
    write_groups(ds, train, run.path(f"groups-train-G{size}.txt"))
    write_groups(ds, test, run.path(f"groups-test-G{size}.txt"))
    print(f"train_groups={len(train)} test_groups={len(test)}")
    return run.finish()


def cmd_train_group(args) -> Path:
    cfg = _effective(args, ["runs", "h", "layers", "head_input", "seed", "allow_size_mismatch", *TRAIN_KEYS])
    ds = load_bundle(args.dataset)
    base_blob = Path(args.base).read_bytes()
    base, header = ck.base_from_bytes(base_blob)
    if not base.frozen:
        raise CommandError(f"{args.base} holds an unfrozen base; finish phase-1 training first")
    if header.get("id_map_digest") and header["id_map_digest"] != ds.id_map_digest():
        raise CommandError("base checkpoint was trained on a different dataset id space")
    layers = _layers(cfg, ds)
    if layers[-1] != base.k:
        raise CommandError(f"head output {layers[-1]} != K {base.k} of the base model")
    groups = read_groups(ds, args.groups)
    size = groups[0].size
    run = Run("train-group", sys.argv[1:], cfg,
              {"dataset": ds.digest(), "base": ck.digest(base_blob), "groups": file_digest(args.groups)},
              [int(cfg["seed"])])
    tc = _train_config(cfg)
    head = GroupHead.init(base.num_users, layers, seed=tc.seed, input_mode=cfg["head_input"], latent_dim=base.k)
    model = GroupModel(base, head, size, allow_size_mismatch=bool(cfg["allow_size_mismatch"]))
    ckpt = run.path("head.ckpt")
    extra = {"manifest_id": run.manifest.id, "h": tc.h.value}

    def snapshot(m):
        ck.save(ck.head_to_bytes(m, ck.digest(base_blob), extra), ckpt)

    before = [p.tobytes() for p in base.params()]
    _, trace = train_group_head(model, groups, tc, on_improve=snapshot)
    snapshot(model)
    trace.to_csv(run.path("trace.csv"))
    if [p.tobytes() for p in base.params()] != before or Path(args.base).read_bytes() != base_blob:
        raise CommandError("base parameters changed during head training")
    print(f"base_digest={ck.digest(base_blob)} best_epoch={trace.best_epoch}")
    return run.finish()


def cmd_eval(args) -> Path:
    cfg = _effective(args, ["runs", "allow_size_mismatch"])
    ds = load_bundle(args.dataset)
    base, _ = ck.load_base(args.base)
    groups = read_groups(ds, args.groups)
    inputs = {"dataset": ds.digest(), "base": file_digest(args.base), "groups": file_digest(args.groups)}
    model = None
    kind = base.kind.value.upper()
    names = [f"IPA-{kind}", f"MO-AVG-{kind}"]
    if args.head:
        head, hh = ck.load_head(args.head)
        model = GroupModel(base, head, int(hh["group_size"]), bool(cfg["allow_size_mismatch"]))
        names.insert(0, model.name)
        inputs["head"] = file_digest(args.head)
    run = Run("eval", sys.argv[1:], cfg, inputs, [])
    rows = []
    size = groups[0].size
    for name in names + [ORACLE]:
        pred = oracle_floor(groups) if name == ORACLE else predictor_for(name, base, model)
        mse, per, preds = group_mse(pred, groups)
        row = EvalRow(ds.name, name, "", size, mse, len(groups), base.seed or 0, per, preds)
        rows.append(row)
        write_samples_csv(row, groups, run.path(f"samples/{name}-G{size}.csv"))
        print(f"{name} G={size} mse={mse!r}")
    write_summary_csv(rows, run.path("summary.csv"))
    return run.finish()


def _write_rows(run: Run, rows) -> None:
    write_summary_csv(rows, run.path("summary.csv"))
    agg = aggregate_summary(read_summary_csv(run.dir / "summary.csv"))
    _write_dicts(agg, run.path("report.csv"))


def _write_dicts(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def cmd_sweep_h(args) -> Path:
    cfg = _effective(args, ["runs", "model", "sizes", "seeds", "h_list", "layers", "head_input", "count",
                            "test_count", *TRAIN_KEYS])
    ds = load_bundle(args.dataset)
    sizes, seeds = _ints(cfg["sizes"]), _ints(cfg["seeds"])
    run = Run("sweep-h", sys.argv[1:], cfg, {"dataset": ds.digest()}, seeds)
    tc = _train_config({**cfg, "seed": seeds[0]})
    h_list = [HFunction(h) for h in cfg["h_list"].split(",")]
    rows = run_sweep(ds, cfg["model"], sizes, seeds, h_list, tc, _layers(cfg, ds), _counts(cfg, sizes),
                     cfg["head_input"])
    for r in rows:
        print(f"{r.model} h={r.h} G={r.G} seed={r.seed} mse={r.mse:.6f}")
    _write_rows(run, rows)
    return run.finish()


def cmd_compare(args) -> Path:
    cfg = _effective(args, ["runs", "sizes", "seeds", "layers", "head_input", "count", "test_count", "h",
                            *TRAIN_KEYS])
    ds = load_bundle(args.dataset)
    sizes, seeds = _ints(cfg["sizes"]), _ints(cfg["seeds"])
    run = Run("compare", sys.argv[1:], cfg, {"dataset": ds.digest()}, seeds)
    tc = _train_config({**cfg, "seed": seeds[0]})
    reports = run_compare(ds, sizes, seeds, tc, _layers(cfg, ds), _counts(cfg, sizes), cfg["head_input"])
    rows = [r for rep in reports for r in rep.rows]
    for r in rows:
        print(f"{r.model} G={r.G} seed={r.seed} mse={r.mse:.6f}")
    _write_rows(run, rows)
    meta = [{"G": rep.group_size, **rep.metadata} for rep in reports]
    run.path("metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return run.finish()


def cmd_report(args) -> Path:
    cfg = _effective(args, ["runs"])
    rows = []
    for p in args.summary:
        rows += read_summary_csv(p)
    run = Run("report", sys.argv[1:], cfg, {str(p): file_digest(p) for p in args.summary}, [])
    agg = aggregate_summary(rows)
    _write_dicts(agg, run.path("report.csv"))
    for a in agg:
        h = f" h={a['h']}" if a["h"] else ""
        print(f"{a['dataset']} G={a['G']} {a['model']}{h}: mean_mse={a['mean_mse']:.6f} "
              f"(n={a['n_seeds']}, q1={a['q1']:.4f}, q3={a['q3']:.4f})")
    return run.finish()


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="grouprec", description="Group recommendation toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--runs", help="root directory for run outputs (default: runs)")
        p.add_argument("--config", help="JSON file of option defaults; flags take precedence")

    def training(p):
        p.add_argument("--lr", type=float)
        p.add_argument("--batch", type=int)
        p.add_argument("--epochs", type=int, help="max epochs (early stopping usually ends sooner)")
        p.add_argument("--patience", type=int)
        p.add_argument("--val-frac", dest="val_frac", type=float)

    p = sub.add_parser("ingest", help="load train/test rating files into a dataset bundle")
    common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--sep")
    p.add_argument("--name")
    p.add_argument("--scale", help="min,max rating (default: observed)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train-base", help="phase 1: train a GMF or MLP model on individual ratings")
    common(p)
    training(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", choices=[k.value for k in ModelKind])
    p.add_argument("--k", type=int)
    p.add_argument("--tower", help="MLP hidden widths, e.g. 64,32,16,8")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("gen-groups", help="sample synthetic train/test groups")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--count", type=int, help="groups per split (overrides --paper-counts)")
    p.add_argument("--test-count", dest="test_count", type=int)
    p.add_argument("--paper-counts", dest="paper_counts", action="store_true",
                   help="counts scaled from the number of test ratings (default)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_groups)

    p = sub.add_parser("train-group", help="phase 2: train a group head on a frozen base")
    common(p)
    training(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--groups", required=True)
    p.add_argument("--h", choices=[h.value for h in HFunction])
    p.add_argument("--layers", help="head widths; last must equal K (default by dataset size)")
    p.add_argument("--head-input", dest="head_input", choices=[m.value for m in HeadInput])
    p.add_argument("--seed", type=int)
    p.add_argument("--allow-size-mismatch", dest="allow_size_mismatch", action="store_true")
    p.set_defaults(func=cmd_train_group)

    p = sub.add_parser("eval", help="group MSE of a trained head and the baselines")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--head")
    p.add_argument("--groups", required=True)
    p.add_argument("--allow-size-mismatch", dest="allow_size_mismatch", action="store_true")
    p.set_defaults(func=cmd_eval)

    for name, func, helptext in (("sweep-h", cmd_sweep_h, "experiment 1: compare h functions"),
                                 ("compare", cmd_compare, "experiment 2: compare group predictors")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        training(p)
        p.add_argument("--dataset", required=True)
        p.add_argument("--sizes")
        p.add_argument("--seeds")
        p.add_argument("--layers")
        p.add_argument("--head-input", dest="head_input", choices=[m.value for m in HeadInput])
        p.add_argument("--count", type=int, help="groups per split instead of the scaled default")
        p.add_argument("--test-count", dest="test_count", type=int)
        if name == "sweep-h":
            p.add_argument("--model", choices=[k.value for k in ModelKind])
            p.add_argument("--h-list", dest="h_list")
        else:
            p.add_argument("--h", choices=[h.value for h in HFunction])
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="aggregate summary CSVs over seeds")
    common(p)
    p.add_argument("--summary", nargs="+", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        out = args.func(args)
    except (CommandError, DataFormatError, GroupFileError, ConfigurationError, ck.CheckpointError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
