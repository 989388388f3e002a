"""Experiment configs, presets, multi-seed orchestration and report files.

Output layout under ``output_dir``::

    config.json              effective config plus its hash
    metrics.csv              tidy rows: config_hash,mode,seed,epoch,metric,value
    runs/<mode>__seed<k>.csv the same rows for one run
    events.jsonl             run_start / epoch / run_end|run_aborted events
    summary.json             final accuracy mean/std per mode
    manifests/seed<k>.json   dataset manifest (counts, noise, flip mapping, order)

No file contains timestamps, so equal configs give byte-identical outputs.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (CorruptionSpec, LabeledDataset, apply_corruption, extract_meta_set,
                   gen_gaussian_mixture, load_idx_dataset)
from .engine import MODES, RunRecord, Trainer, TrainerConfig, TrainingAborted

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CSV_COLUMNS = ("config_hash", "mode", "seed", "epoch", "metric", "value")


class ConfigError(ValueError):
    pass


def _strict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**d)


@dataclass
class DatasetSpec:
    kind: str = "gaussian_mixture"  # gaussian_mixture | idx
    num_classes: int = 3
    per_class: int = 210
    dim: int = 10
    separation: float = 4.0
    test_per_class: int = 300
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None

    def validate(self) -> None:
        if self.kind == "gaussian_mixture":
            if self.num_classes < 2 or self.dim < 2 or self.per_class < 1 or self.test_per_class < 1:
                raise ConfigError("gaussian mixture needs >= 2 classes, dim >= 2 and positive counts")
        elif self.kind == "idx":
            if not (self.train_images and self.train_labels and self.test_images and self.test_labels):
                raise ConfigError("idx datasets need train/test image and label paths")
        else:
            raise ConfigError(f"unknown dataset kind {self.kind!r}")


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    corruption: dict = field(default_factory=lambda: {"kind": "none"})
    meta_per_class: int = 10
    trainer: dict = field(default_factory=dict)
    modes: list[str] = field(default_factory=lambda: list(MODES))
    seeds: list[int] = field(default_factory=lambda: [1])
    eval_every: int = 1
    output_dir: str = "runs"
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        self.dataset.validate()
        if not self.seeds:
            raise ConfigError("seed list is empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seed list has duplicates")
        if not self.modes:
            raise ConfigError("mode list is empty")
        bad = [m for m in self.modes if m not in MODES]
        if bad:
            raise ConfigError(f"unknown modes {bad}; expected a subset of {MODES}")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.meta_per_class < 0:
            raise ConfigError("meta_per_class must be >= 0")
        if {"mode", "seed"} & set(self.trainer):
            raise ConfigError("trainer section must not set mode or seed; use modes/seeds")
        try:
            self.trainer_config("gdw", 0)
            self.corruption_spec(0)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def trainer_config(self, mode: str, seed: int) -> TrainerConfig:
        return TrainerConfig.from_dict({**self.trainer, "mode": mode, "seed": seed})

    def corruption_spec(self, seed: int) -> CorruptionSpec:
        d = {k: v for k, v in self.corruption.items() if k != "seed"}
        known = {f.name for f in dataclasses.fields(CorruptionSpec)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown keys in corruption: {sorted(unknown)}")
        return CorruptionSpec(**d, seed=_derive_seed(seed, 3))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "schema_version" not in d:
            raise ConfigError("config must carry a top-level schema_version")
        ds = _strict(DatasetSpec, d.pop("dataset", {}), "dataset")
        cfg = _strict(cls, {**d, "dataset": ds}, "config")
        cfg.seeds = [int(s) for s in cfg.seeds]
        cfg.modes = list(cfg.modes)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def config_hash(self) -> str:
        """Hash of everything that affects results; the output location is excluded."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _derive_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


# 3 x 210 pool: 30 go to the meta set, 600 remain for training
_DIRECTIONAL_DATASET = {"num_classes": 3, "per_class": 210, "dim": 10, "separation": 4.0,
                        "test_per_class": 300}
_DIRECTIONAL_TRAINER = {"epochs": 60, "batch_size": 100, "meta_batch_size": 30, "hidden": [64]}

PRESETS: dict[str, dict] = {
    "smoke": {
        "name": "smoke",
        "dataset": {"num_classes": 3, "per_class": 40, "dim": 4, "separation": 3.0, "test_per_class": 30},
        "corruption": {"kind": "uniform", "noise_ratio": 0.4},
        "meta_per_class": 5,
        "trainer": {"epochs": 3, "batch_size": 25, "meta_batch_size": 15, "hidden": [16],
                    "weight_hidden": 16},
        "seeds": [1],
    },
    "separable": {
        "name": "separable",
        "dataset": {"num_classes": 3, "per_class": 210, "dim": 10, "separation": 8.0},
        "corruption": {"kind": "none"},
        "trainer": {"epochs": 20, "hidden": [64]},
        "modes": ["plain"],
        "seeds": [1, 10, 100],
    },
    "noise-uniform": {
        "name": "noise-uniform",
        "dataset": _DIRECTIONAL_DATASET,
        "corruption": {"kind": "uniform", "noise_ratio": 0.4},
        "trainer": _DIRECTIONAL_TRAINER,
        "seeds": [1, 10, 100, 1000, 10000],
    },
    "noise-flip": {
        "name": "noise-flip",
        "dataset": _DIRECTIONAL_DATASET,
        "corruption": {"kind": "flip", "noise_ratio": 0.4},
        "trainer": _DIRECTIONAL_TRAINER,
        "seeds": [1, 10, 100, 1000, 10000],
    },
    "longtail": {
        "name": "longtail",
        "dataset": {"num_classes": 5, "per_class": 210},
        "corruption": {"kind": "none", "imbalance": 0.1},
        "trainer": _DIRECTIONAL_TRAINER,
        "modes": ["gdw", "instance-weighting", "plain"],
        "seeds": [1, 10, 100, 1000, 10000],
    },
    "mixed": {
        "name": "mixed",
        "dataset": _DIRECTIONAL_DATASET,
        "corruption": {"kind": "uniform", "noise_ratio": 0.4, "imbalance": 0.1, "order": "longtail-first"},
        "trainer": _DIRECTIONAL_TRAINER,
        "modes": ["gdw", "instance-weighting", "plain"],
        "seeds": [1, 10, 100, 1000, 10000],
    },
}


def preset(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    d = json.loads(json.dumps(PRESETS[name]))
    d.setdefault("output_dir", f"runs/{name}")
    d.update(overrides)
    d["schema_version"] = SCHEMA_VERSION
    return ExperimentConfig.from_dict(d)


def build_datasets(cfg: ExperimentConfig, seed: int) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """``(train, meta, test)`` for one seed; the meta set is drawn before corruption."""
    spec = cfg.dataset
    if spec.kind == "gaussian_mixture":
        pool = gen_gaussian_mixture(spec.num_classes, spec.per_class, spec.dim, spec.separation,
                                    _derive_seed(seed, 1))
        test = gen_gaussian_mixture(spec.num_classes, spec.test_per_class, spec.dim, spec.separation,
                                    _derive_seed(seed, 2))
    else:
        pool = load_idx_dataset(spec.train_images, spec.train_labels)
        test = load_idx_dataset(spec.test_images, spec.test_labels, pool.num_classes)
    meta, rest = extract_meta_set(pool, cfg.meta_per_class, _derive_seed(seed, 4))
    train = apply_corruption(rest, cfg.corruption_spec(seed))
    return train, meta, test


def dataset_manifest(cfg: ExperimentConfig, seed: int, train, meta, test) -> dict:
    return {
        "config_hash": cfg.config_hash(),
        "seed": seed,
        "corruption": cfg.corruption,
        "train": train.manifest(),
        "meta": meta.manifest(),
        "test": test.manifest(),
    }


def run_single(cfg: ExperimentConfig, mode: str, seed: int) -> RunRecord:
    train, meta, test = build_datasets(cfg, seed)
    trainer = Trainer(cfg.trainer_config(mode, seed), train, meta, test, eval_every=cfg.eval_every)
    try:
        for _ in trainer.run():
            pass
    except TrainingAborted as exc:
        log.warning("run %s seed %d aborted: %s", mode, seed, exc)
    return trainer.record


def _run_cell(args):
    cfg_dict, mode, seed = args
    return run_single(ExperimentConfig.from_dict(cfg_dict), mode, seed)


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, write: bool = True) -> tuple[list[RunRecord], dict]:
    """Train every (mode, seed) cell; optionally write the report files."""
    cfg.validate()
    cells = [(cfg.to_dict(), mode, seed) for mode in cfg.modes for seed in cfg.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run_cell, cells))
    else:
        records = [_run_cell(c) for c in cells]
    summary = summarize(records, cfg.config_hash())
    if write:
        write_report(cfg, records, summary)
    return records, summary


def _finite_or_none(v):
    return None if isinstance(v, float) and not math.isfinite(v) else v


def summarize(records: list[RunRecord], config_hash: str) -> dict:
    modes: dict[str, dict] = {}
    for rec in records:
        cell = modes.setdefault(rec.mode, {"final_accuracy": {}, "incomplete": []})
        if rec.status != "completed":
            cell["incomplete"].append({"seed": rec.seed, "status": rec.status, "error": rec.error})
            continue
        cell["final_accuracy"][str(rec.seed)] = rec.final_accuracy
    for cell in modes.values():
        accs = np.array(list(cell["final_accuracy"].values()), dtype=np.float64)
        cell["mean"] = float(accs.mean()) if accs.size else None
        cell["std"] = float(accs.std(ddof=1)) if accs.size > 1 else (0.0 if accs.size else None)
        cell["n"] = int(accs.size)
    return {"config_hash": config_hash, "modes": modes}


def record_rows(rec: RunRecord, config_hash: str) -> list[tuple]:
    rows = []
    for ep in rec.epochs:
        for metric in sorted(k for k in ep if k != "epoch"):
            rows.append((config_hash, rec.mode, rec.seed, ep["epoch"], metric, ep[metric]))
    return rows


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def rows_to_csv(rows: list[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([*r[:5], _fmt(r[5])])
    return buf.getvalue()


def read_metrics_csv(path) -> list[RunRecord]:
    """Rebuild per-run epoch records from a tidy CSV."""
    runs: dict[tuple[str, int], dict[int, dict]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        for row in reader:
            key = (row["mode"], int(row["seed"]))
            epoch = int(row["epoch"])
            ep = runs.setdefault(key, {}).setdefault(epoch, {"epoch": epoch})
            ep[row["metric"]] = float(row["value"])
    out = []
    for (mode, seed), eps in runs.items():
        out.append(RunRecord(mode, seed, [eps[k] for k in sorted(eps)], status="completed"))
    return out


def write_report(cfg: ExperimentConfig, records: list[RunRecord], summary: dict | None = None) -> Path:
    if not records:
        raise ValueError("report needs at least one run")
    out = Path(cfg.output_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    (out / "manifests").mkdir(exist_ok=True)
    h = cfg.config_hash()
    summary = summary or summarize(records, h)
    (out / "config.json").write_text(json.dumps({"config_hash": h, "config": cfg.to_dict()},
                                                indent=2, sort_keys=True) + "\n")
    all_rows = []
    events = []
    for rec in records:
        rows = record_rows(rec, h)
        all_rows += rows
        (out / "runs" / f"{rec.mode}__seed{rec.seed}.csv").write_text(rows_to_csv(rows))
        events.append({"event": "run_start", "config_hash": h, "mode": rec.mode, "seed": rec.seed})
        for ep in rec.epochs:
            events.append({"event": "epoch", "config_hash": h, "mode": rec.mode, "seed": rec.seed,
                           "metrics": {k: _finite_or_none(v) for k, v in ep.items()}})
        end = {"event": "run_end" if rec.status == "completed" else "run_aborted", "config_hash": h,
               "mode": rec.mode, "seed": rec.seed, "status": rec.status,
               "final_accuracy": _finite_or_none(rec.final_accuracy)}
        if rec.error:
            end["error"] = rec.error
        events.append(end)
    (out / "metrics.csv").write_text(rows_to_csv(all_rows))
    (out / "events.jsonl").write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in events))
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for seed in sorted({r.seed for r in records}):
        train, meta, test = build_datasets(cfg, seed)
        man = dataset_manifest(cfg, seed, train, meta, test)
        (out / "manifests" / f"seed{seed}.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return out
