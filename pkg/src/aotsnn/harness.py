"""Experiment configs, cached training runs, estimator evaluation, sweeps and reports.

The CLI in :mod:`aotsnn.cli` is a thin shell over these functions; the
acceptance tests call them directly so both paths share one cache.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import statistics
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable

import numpy as np
from scipy.stats import spearmanr

from . import metrics, uncertainty
from .data import CORRUPTIONS, CorruptionSpec, Dataset, check_mnist_constants, corrupt, load_mnist
from .network import Network, NetworkConfig, build_network
from .tensor import ConfigError, Rng
from .training import TrainConfig, train

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ESTIMATORS = ("aot", "lts", "mc_dropout", "ensemble", "lts_temp_scaled")
SWEEP_AXES = ("dropout_rate", "T", "severity")
DEFAULT_SEEDS = (1, 2, 3, 4, 5)
METRIC_COLUMNS = ("acc", "brier", "nll", "ece")
ROW_COLUMNS = metrics.CSV_COLUMNS + ("seed", "config_hash", "config", "dataset", "axis", "value")
CORRUPTION_SEED = 0  # shared by every model so all of them see the same corrupted images


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class DatasetSection:
    name: str = "mnist"
    root: str | None = None  # falls back to $AOTSNN_DATA_ROOT, then ~/data/mnist
    train_size: int | None = 10000
    test_size: int | None = None
    val_size: int = 1000

    def resolved_root(self) -> Path:
        root = self.root or os.environ.get("AOTSNN_DATA_ROOT") or "~/data/mnist"
        return Path(os.path.expandvars(root)).expanduser()


@dataclass
class EstimatorSection:
    kind: str = "aot"
    M: int = 5
    bins: int = metrics.DEFAULT_BINS
    T: int | None = None  # inference steps; defaults to the network's T

    def __post_init__(self):
        if self.kind not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.kind!r}; choose from {', '.join(ESTIMATORS)}")
        if self.M < 1:
            raise ConfigError("estimator.M must be >= 1")
        if self.bins < 1:
            raise ConfigError("estimator.bins must be >= 1")


@dataclass
class EvaluationSection:
    batch_size: int = 500
    log_eval_size: int = 1000  # test images scored after every epoch
    per_step: bool = False
    corruptions: list[str] = field(default_factory=list)
    corruption_size: int = 1000


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    estimator: EstimatorSection = field(default_factory=EstimatorSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    seeds: list[int] = field(default_factory=lambda: list(DEFAULT_SEEDS))
    output_dir: str = "runs"
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        d = asdict(self)
        d["network"] = self.network.to_dict()
        d["train"].pop("seed")  # per run, never part of a config file
        return d

    def train_hash(self) -> str:
        """Hash of everything that determines a trained checkpoint (seed excluded)."""
        d = self.to_dict()
        key = {"dataset": {k: d["dataset"][k] for k in ("name", "train_size")}, "network": d["network"], "train": d["train"]}
        return _hash(key)

    def eval_hash(self) -> str:
        d = self.to_dict()
        d["dataset"].pop("root")
        return _hash({"train": self.train_hash(), "dataset": d["dataset"], "estimator": d["estimator"], "evaluation": d["evaluation"]})

    def with_overrides(self, section: str, **values) -> ExperimentConfig:
        d = self.to_dict()
        d[section].update(values)
        return config_from_dict(d)


def _hash(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:12]


def _strict(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    sections = {
        "dataset": DatasetSection,
        "network": NetworkConfig,
        "train": TrainConfig,
        "estimator": EstimatorSection,
        "evaluation": EvaluationSection,
    }
    top = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {k: v for k, v in data.items() if k not in sections}
    for key, cls in sections.items():
        kwargs[key] = _strict(cls, data.get(key, {}), key)
    if "seed" in data.get("train", {}):
        raise ConfigError("train.seed is set per run with --seed or the seeds list")
    for kind in kwargs["evaluation"].corruptions:
        if kind not in CORRUPTIONS:
            raise ConfigError(f"unknown corruption {kind!r}")
    cfg = ExperimentConfig(**kwargs)
    if not cfg.seeds:
        raise ConfigError("seeds must not be empty")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset


def load_splits(section: DatasetSection) -> Splits:
    """Training subset from the head of the training file, validation from its tail."""
    if section.name != "mnist":
        raise ConfigError(f"dataset {section.name!r} is not wired into the harness (only mnist)")
    root = section.resolved_root()
    if not root.is_dir():
        raise ConfigError(f"dataset root {root} does not exist")
    full = load_mnist(root, "train")
    test = load_mnist(root, "test")
    if len(full) == 60000:
        check_mnist_constants(full)
    n_val = min(section.val_size, len(full) // 10)
    val_start = len(full) - n_val
    n_train = val_start if section.train_size is None else min(section.train_size, val_start)
    if n_train < 2:
        raise ConfigError("training split is too small")
    train_ds = full.subset(np.arange(n_train), "mnist-train")
    val = full.subset(np.arange(val_start, len(full)), "mnist-val")
    if section.test_size is not None:
        test = test.head(section.test_size)
    return Splits(train_ds, val, test)


# ---------------------------------------------------------------------------
# training with a checkpoint cache
# ---------------------------------------------------------------------------


def run_dir(cfg: ExperimentConfig, seed: int, out: Path | None = None) -> Path:
    base = Path(out) if out is not None else Path(cfg.output_dir)
    return base / "cache" / cfg.train_hash() / f"seed{seed}"


def _epoch_eval(cfg: ExperimentConfig, seed: int):
    def fn(net: Network, ds: Dataset, epoch: int) -> dict:
        rep, _ = evaluate_estimator(cfg, [net], ds, None, Rng(seed).stream(f"epoch-eval-{epoch}"))
        return {"test_acc": rep.accuracy, "brier": rep.brier, "nll": rep.nll, "ece": rep.ece}

    return fn


def train_model(cfg: ExperimentConfig, seed: int, splits: Splits, out_dir: Path | None = None, epochs: int | None = None):
    """Build from the ``init`` stream and train. Returns ``(net, records)``."""
    tcfg = TrainConfig(**{**asdict(cfg.train), "seed": seed, **({"epochs": epochs} if epochs is not None else {})})
    net = build_network(cfg.network, Rng(seed).stream("init"))
    log_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
    monitor = splits.test.head(cfg.evaluation.log_eval_size) if cfg.evaluation.log_eval_size else None
    return train(net, splits.train, tcfg, monitor, log_path, _epoch_eval(cfg, seed) if monitor is not None else None)


def trained_model(cfg: ExperimentConfig, seed: int, splits: Splits | None = None, out: Path | None = None) -> Network:
    """Load the cached checkpoint for ``(config, seed)`` or train and cache it."""
    d = run_dir(cfg, seed, out)
    ckpt = d / "model.ckpt"
    if ckpt.exists():
        return Network.load(ckpt)
    splits = splits or load_splits(cfg.dataset)
    log.info("training %s seed %d -> %s", cfg.name, seed, d)
    net, _ = train_model(cfg, seed, splits, d)
    (d / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    tmp = d / "model.ckpt.tmp"
    net.save(tmp)
    tmp.replace(ckpt)
    return net


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

MODEL_LABELS = {"aot": "AOT", "lts": "LTS", "mc_dropout": "MC_DROPOUT", "ensemble": "ENSEMBLE", "lts_temp_scaled": "LTS_TEMP_SCALED"}


def predict_dataset(
    nets: list[Network],
    ds: Dataset,
    kind: str,
    T: int,
    rng: Rng,
    *,
    M: int = 5,
    batch_size: int = 500,
    temperature: uncertainty.TemperatureModel | None = None,
) -> tuple[np.ndarray, int, int]:
    """Run one estimator over a dataset. Returns ``(probs, step_evals, passes)`` per prediction."""
    chunks, used, passes = [], 0, 0
    for x, _ in ds.batches(batch_size):
        if kind == "aot":
            pd = uncertainty.predict_aot(nets[0], x, T, rng)
        elif kind == "lts":
            pd = uncertainty.predict_lts(nets[0], x, T)
        elif kind == "mc_dropout":
            pd = uncertainty.predict_mc_dropout(nets[0], x, T, M, rng)
        elif kind == "ensemble":
            pd = uncertainty.predict_ensemble(nets, x, T)
        elif kind == "lts_temp_scaled":
            pd = uncertainty.predict_temperature_scaled(nets[0], x, T, temperature or uncertainty.TemperatureModel())
        else:
            raise ConfigError(f"unknown estimator {kind!r}")
        chunks.append(pd.probs)
        used, passes = pd.step_evals_used, pd.passes
    return np.concatenate(chunks), used, passes


def fit_temperature_on(net: Network, val: Dataset, T: int, batch_size: int = 500) -> uncertainty.TemperatureModel:
    logits = np.concatenate([uncertainty.last_step_logits(net, x, T) for x, _ in val.batches(batch_size)])
    return uncertainty.fit_temperature(logits, val.labels)


def evaluate_estimator(
    cfg: ExperimentConfig,
    nets: list[Network],
    ds: Dataset,
    val: Dataset | None,
    rng: Rng,
    kind: str | None = None,
) -> tuple[metrics.CalibrationReport, dict]:
    """Score the configured (or given) estimator; returns the report and row metadata."""
    est = cfg.estimator
    kind = kind or est.kind
    T = est.T or nets[0].config.T
    temp = None
    if kind == "lts_temp_scaled":
        if val is None:
            raise ConfigError("temperature scaling needs a validation split")
        temp = fit_temperature_on(nets[0], val, T, cfg.evaluation.batch_size)
    if kind == "ensemble" and len(nets) < 2:
        log.warning("ensemble with a single member")
    probs, used, passes = predict_dataset(nets, ds, kind, T, rng, M=est.M, batch_size=cfg.evaluation.batch_size, temperature=temp)
    rep = metrics.evaluate(probs, ds.labels, est.bins)
    meta = {"model": MODEL_LABELS[kind], "T": T, "passes": passes, "step_evals": used}
    if temp is not None:
        meta["temperature"] = temp.temperature
    return rep, meta


def make_row(rep: metrics.CalibrationReport, meta: dict, cfg: ExperimentConfig, seed: int, dataset: str, **extra) -> dict:
    row = rep.csv_row(meta["model"], meta["T"], meta["passes"], meta["step_evals"])
    row.update(seed=seed, config_hash=cfg.train_hash(), config=cfg.name, dataset=dataset, axis="", value="")
    row.update(extra)
    return row


def corruption_sets(test: Dataset, kinds: Iterable[str], severity: int, size: int) -> list[Dataset]:
    base = test.head(size)
    out = []
    for kind in kinds:
        spec = CorruptionSpec(kind, severity)
        out.append(corrupt(base, spec, Rng(CORRUPTION_SEED).stream(f"corrupt/{kind}/{severity}")))
    return out


def _cached_json(path: Path, compute):
    if path.exists():
        return json.loads(path.read_text())
    result = compute()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(result, indent=1, sort_keys=True))
    tmp.replace(path)
    return result


def seed_results(cfg: ExperimentConfig, seed: int, out: Path | None = None, splits: Splits | None = None) -> dict:
    """Train (or load) one seed and run the configured evaluation suite, cached on disk.

    The result holds the clean test report, optional per-step reports and
    mean Brier per corruption severity.
    """
    path = run_dir(cfg, seed, out) / f"results-{cfg.eval_hash()}.json"

    def compute():
        sp = splits or load_splits(cfg.dataset)
        net = trained_model(cfg, seed, sp, out)
        rng = Rng(seed).stream("eval")
        rep, meta = evaluate_estimator(cfg, [net], sp.test, sp.val, rng)
        res: dict[str, Any] = {
            "seed": seed,
            "config_hash": cfg.train_hash(),
            "checkpoint_sha256": net.digest(),
            "test": rep.to_dict(with_bins=False),
            "row": make_row(rep, meta, cfg, seed, sp.test.name),
        }
        if cfg.evaluation.per_step:
            kind = "AOT" if cfg.estimator.kind == "aot" else "LTS"
            curves = metrics.per_step_curves(net, sp.test, meta["T"], Rng(seed).stream("per-step"), kind, cfg.evaluation.batch_size, cfg.estimator.bins)
            res["per_step"] = [c.to_dict(with_bins=False) for c in curves]
        if cfg.evaluation.corruptions:
            sev_rows = {}
            for sev in range(1, 6):
                per_kind = {}
                for kind, ds in zip(cfg.evaluation.corruptions, corruption_sets(sp.test, cfg.evaluation.corruptions, sev, cfg.evaluation.corruption_size)):
                    r, _ = evaluate_estimator(cfg, [net], ds, sp.val, Rng(seed).stream(f"eval/{kind}/{sev}"))
                    per_kind[kind] = r.to_dict(with_bins=False)
                sev_rows[str(sev)] = {
                    "kinds": per_kind,
                    "mean_brier": float(np.mean([v["brier"] for v in per_kind.values()])),
                    "mean_acc": float(np.mean([v["accuracy"] for v in per_kind.values()])),
                }
            res["corruption"] = sev_rows
        return res

    return _cached_json(path, compute)


# ---------------------------------------------------------------------------
# sweeps and reports
# ---------------------------------------------------------------------------


def _parse_value(axis: str, value):
    if axis == "dropout_rate":
        return float(value)
    return int(value)


def sweep(cfg: ExperimentConfig, axis: str, values, seeds=None, out: Path | None = None, corruption: str | None = None) -> list[dict]:
    """One row per value per seed.

    ``dropout_rate`` and ``T`` retrain per value; ``severity`` reuses one model
    per seed and scores the mean over the configured corruption kinds (or
    the single kind given).
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis must be one of {', '.join(SWEEP_AXES)}")
    values = [_parse_value(axis, v) for v in values]
    if not values:
        raise ConfigError("sweep needs at least one value")
    seeds = list(seeds or cfg.seeds)
    splits = load_splits(cfg.dataset)
    rows = []
    for value in values:
        for seed in seeds:
            if axis in ("dropout_rate", "T"):
                vcfg = cfg.with_overrides("network", **{axis: value})
                vcfg.evaluation.per_step = False
                vcfg.evaluation.corruptions = []
                res = seed_results(vcfg, seed, out, splits)
                row = dict(res["row"], axis=axis, value=value)
            else:
                kinds = [corruption] if corruption else (cfg.evaluation.corruptions or list(CORRUPTIONS))
                net = trained_model(cfg, seed, splits, out)
                reps = []
                for kind, ds in zip(kinds, corruption_sets(splits.test, kinds, value, cfg.evaluation.corruption_size)):
                    rep, meta = evaluate_estimator(cfg, [net], ds, splits.val, Rng(seed).stream(f"eval/{kind}/{value}"))
                    reps.append(rep)
                mean = metrics.CalibrationReport(
                    *(float(np.mean([getattr(r, m) for r in reps])) for m in ("accuracy", "brier", "nll", "ece")),
                    n_samples=sum(r.n_samples for r in reps),
                )
                row = make_row(mean, meta, cfg, seed, "+".join(kinds), axis=axis, value=value)
            rows.append(row)
            log.info("sweep %s=%s seed %d acc %.4f", axis, value, seed, row["acc"])
    return rows


def write_rows(rows: list[dict], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(metrics.rows_to_csv(rows))


def read_rows(paths) -> list[dict]:
    rows = []
    for p in paths:
        try:
            text = Path(p).read_text()
        except FileNotFoundError as exc:
            raise ConfigError(f"{p} not found") from exc
        reader = csv.DictReader(io.StringIO(text))
        missing = [c for c in metrics.CSV_COLUMNS + ("seed", "config_hash") if c not in (reader.fieldnames or [])]
        if missing:
            raise ConfigError(f"{p}: missing column(s) {', '.join(missing)}")
        for r in reader:
            for m in METRIC_COLUMNS:
                try:
                    r[m] = float(r[m])
                except ValueError as exc:
                    raise ConfigError(f"{p}: non-numeric {m} value {r[m]!r}") from exc
            rows.append(r)
    return rows


GROUP_KEYS = ("config", "model", "T", "passes", "step_evals", "dataset", "axis", "value")


def aggregate(rows: list[dict]) -> list[dict]:
    """Mean and sample std (n-1) of each metric over seeds; std is empty for single runs."""
    if not rows:
        raise ConfigError("no rows to aggregate")
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(tuple(str(r.get(k, "")) for k in GROUP_KEYS), []).append(r)
    out = []
    for key, members in groups.items():
        agg = dict(zip(GROUP_KEYS, key))
        agg["n"] = len(members)
        for m in METRIC_COLUMNS:
            vals = [float(r[m]) for r in members]
            agg[f"{m}_mean"] = statistics.fmean(vals)
            agg[f"{m}_std"] = statistics.stdev(vals) if len(vals) > 1 else ""
        out.append(agg)
    return out


def summary_csv(agg: list[dict]) -> str:
    cols = list(GROUP_KEYS) + ["n"] + [f"{m}_{s}" for m in METRIC_COLUMNS for s in ("mean", "std")]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    w.writerows(agg)
    return buf.getvalue()


def long_csv(agg: list[dict]) -> str:
    """Plot-ready long format: one line per group and metric."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(GROUP_KEYS) + ["metric", "mean", "std", "n"])
    for a in agg:
        for m in METRIC_COLUMNS:
            w.writerow([a[k] for k in GROUP_KEYS] + [m, a[f"{m}_mean"], a[f"{m}_std"], a["n"]])
    return buf.getvalue()


def _pm(mean: float, std) -> str:
    if std == "":
        return f"{mean:.4g}"
    return f"{mean:.4g} ± {std:.2g}"


def markdown_table(agg: list[dict]) -> str:
    head = "| config | model | (T, passes) | dataset | axis=value | n | acc | Brier | NLL | ECE |"
    lines = [head, "|" + "---|" * (head.count("|") - 1)]
    for a in agg:
        axis = f"{a['axis']}={a['value']}" if a["axis"] else ""
        cells = [a["config"], a["model"], f"({a['T']}, {a['passes']})", a["dataset"], axis, str(a["n"])]
        cells += [_pm(a[f"{m}_mean"], a[f"{m}_std"]) for m in METRIC_COLUMNS]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def spearman(x, y) -> float:
    return float(spearmanr(x, y).statistic)
