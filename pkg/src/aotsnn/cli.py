"""Command line entry point: ``aotsnn {train|eval|sweep|corrupt|report}``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .data import ConsistencyError, CorruptionSpec, FormatError, corrupt, save_mnist_idx
from .network import CheckpointError, Network
from .tensor import ConfigError, DimensionError, NumericError, Rng

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("aotsnn")


def _seed(args, cfg) -> int:
    return args.seed if args.seed is not None else cfg.seeds[0]


def _emit(out: Path, rows: list[dict], report: dict | None = None, name: str = "eval") -> None:
    out.mkdir(parents=True, exist_ok=True)
    harness.write_rows(rows, out / f"{name}.csv")
    if report is not None:
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        print(json.dumps(report, sort_keys=True))


def cmd_train(args) -> int:
    cfg = harness.load_config(args.config)
    seed = _seed(args, cfg)
    out = Path(args.out or Path(cfg.output_dir) / "train" / f"{cfg.name}-seed{seed}")
    splits = harness.load_splits(cfg.dataset)
    net, _ = harness.train_model(cfg, seed, splits, out, epochs=args.epochs)
    net.save(out / "model.ckpt")
    rep, meta = harness.evaluate_estimator(cfg, [net], splits.test, splits.val, Rng(seed).stream("eval"))
    row = harness.make_row(rep, meta, cfg, seed, splits.test.name)
    _emit(out, [row], {**rep.to_dict(with_bins=False), **meta, "seed": seed, "config_hash": cfg.train_hash(), "checkpoint_sha256": net.digest()})
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = harness.load_config(args.config)
    if args.estimator:
        cfg = cfg.with_overrides("estimator", kind=args.estimator)
    if args.M is not None:
        cfg = cfg.with_overrides("estimator", M=args.M)
    if args.T is not None:
        cfg = cfg.with_overrides("estimator", T=args.T)
    if args.bins is not None:
        cfg = cfg.with_overrides("estimator", bins=args.bins)
    seed = _seed(args, cfg)
    nets = [Network.load(p) for p in args.checkpoint]
    splits = harness.load_splits(cfg.dataset)
    ds = splits.test
    if args.corruption:
        spec = CorruptionSpec.parse(args.corruption)
        ds = harness.corruption_sets(ds, [spec.kind], spec.severity, len(ds))[0]
    rep, meta = harness.evaluate_estimator(cfg, nets, ds, splits.val, Rng(seed).stream("eval"))
    row = harness.make_row(rep, meta, cfg, seed, ds.name)
    out = Path(args.out or Path(cfg.output_dir) / "eval" / f"{cfg.name}-{cfg.estimator.kind}-seed{seed}")
    report = {**rep.to_dict(), **meta, "step_evals_used": meta["step_evals"], "seed": seed, "dataset": ds.name}
    _emit(out, [row], report)
    return EXIT_OK


def _values(text: str) -> list[str]:
    vals = [v for v in text.split(",") if v.strip()]
    if not vals:
        raise ConfigError("--values is empty")
    return vals


def cmd_sweep(args) -> int:
    cfg = harness.load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    out = Path(args.out or Path(cfg.output_dir) / "sweep" / f"{cfg.name}-{args.axis}")
    rows = harness.sweep(cfg, args.axis, _values(args.values), seeds, out, args.corruption)
    harness.write_rows(rows, out / "runs.csv")
    agg = harness.aggregate(rows)
    (out / "summary.csv").write_text(harness.summary_csv(agg))
    (out / "summary.md").write_text(harness.markdown_table(agg))
    print(harness.markdown_table(agg), end="")
    return EXIT_OK


def cmd_corrupt(args) -> int:
    cfg = harness.load_config(args.config)
    spec = CorruptionSpec.parse(args.corruption)
    seed = _seed(args, cfg)
    test = harness.load_splits(cfg.dataset).test
    ds = corrupt(test, spec, Rng(seed).stream(f"corrupt/{spec.kind}/{spec.severity}"))
    out = Path(args.out or Path(cfg.output_dir) / "corrupt" / f"{spec.kind}-{spec.severity}")
    out.mkdir(parents=True, exist_ok=True)
    save_mnist_idx(ds, out / "t10k-images-idx3-ubyte", out / "t10k-labels-idx1-ubyte")
    print(out)
    return EXIT_OK


def cmd_report(args) -> int:
    if not args.inputs:
        raise ConfigError("report needs at least one CSV input")
    rows = harness.read_rows(args.inputs)
    agg = harness.aggregate(rows)
    table = harness.markdown_table(agg)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.md").write_text(table)
        (out / "summary.csv").write_text(harness.summary_csv(agg))
        (out / "long.csv").write_text(harness.long_csv(agg))
    print(table, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aotsnn", description="Average-over-time spiking networks: training and calibration experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="experiment JSON config")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory")

    t = sub.add_parser("train", help="train one model and score it on the test set")
    common(t)
    t.add_argument("--epochs", type=int, default=None, help="override train.epochs")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score checkpoint(s) with an estimator")
    common(e)
    e.add_argument("--checkpoint", nargs="+", required=True, help="one file, or several for an ensemble")
    e.add_argument("--estimator", choices=harness.ESTIMATORS)
    e.add_argument("--M", type=int, help="MC-dropout passes")
    e.add_argument("--T", type=int, help="inference time steps")
    e.add_argument("--bins", type=int, help="ECE bins")
    e.add_argument("--corruption", help="kind:severity, e.g. gaussian_noise:3")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="sweep one axis over seeds")
    common(s)
    s.add_argument("--axis", required=True, choices=harness.SWEEP_AXES)
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--seeds", help="comma-separated seeds (default: config seeds)")
    s.add_argument("--corruption", help="restrict a severity sweep to one corruption kind")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("corrupt", help="write a corrupted copy of the test set in IDX format")
    common(c)
    c.add_argument("--corruption", required=True, help="kind:severity")
    c.set_defaults(func=cmd_corrupt)

    r = sub.add_parser("report", help="merge result CSVs into mean ± std tables")
    r.add_argument("inputs", nargs="*")
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"aotsnn: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DimensionError, FormatError, ConsistencyError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"aotsnn: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
