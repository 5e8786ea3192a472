"""Experiment configuration, single runs, sweeps and their result files."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .adapt import ALL_METHODS, Adapter, AdapterConfig
from .data import (DomainShift, MultimodalDataset, SyntheticSpec, generate_shifted,
                   generate_synthetic, load_features, pretrain)
from .errors import ConfigurationError, MidlError, ValidationError
from .model import Modality, ModelConfig, MultimodalClassifier, load_checkpoint, save_checkpoint
from .stream import OnlineMetrics, StreamSchedule, make_events, run_events

WARMUP_MODES = ("none", "lta", "shifted")
MISSING_KINDS = ("video", "audio", "mixed")
CHECKPOINT_FILES = {"AV": "model.json", "A": "audio_only.json", "V": "video_only.json"}


@dataclass(frozen=True)
class DataSection:
    seed: int = 0
    features: str | None = None
    val_features: str | None = None
    num_classes: int = 8
    audio_dim: int = 16
    video_dim: int = 16
    samples_per_class: int = 625
    latent_dim: int = 8
    class_separation: float = 1.0
    modality_correlation: float = 0.0
    noise_sigma: float = 2.0
    shift_offset_scale: float = 1.0
    shift_covariance_scale: float = 1.5

    def __post_init__(self):
        if (self.features is None) != (self.val_features is None):
            raise ConfigurationError("data.features and data.val_features must be given together")
        if self.features is None:
            self.spec()  # validates the synthetic fields

    def spec(self, shifted: bool = False) -> SyntheticSpec:
        shift = DomainShift(self.shift_offset_scale, self.shift_covariance_scale) if shifted else None
        try:
            return SyntheticSpec(
                num_classes=self.num_classes, audio_dim=self.audio_dim, video_dim=self.video_dim,
                samples_per_class=self.samples_per_class, latent_dim=self.latent_dim,
                class_separation=self.class_separation, modality_correlation=self.modality_correlation,
                noise_sigma=self.noise_sigma, domain_shift=shift)
        except ValidationError as exc:
            raise ConfigurationError(f"data: {exc}") from None


@dataclass(frozen=True)
class PretrainSection:
    epochs: int = 10
    lr: float = 0.1
    batch_size: int = 32
    seed: int = 0
    checkpoint: str | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError(f"pretrain.epochs must be >= 0, got {self.epochs}")
        if not self.lr > 0:
            raise ConfigurationError(f"pretrain.lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigurationError(f"pretrain.batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class ScheduleSection:
    missing_rate: float = 0.5
    missing: str = "video"
    length: int | None = None  # None -> whole validation split

    def __post_init__(self):
        if not 0.0 <= self.missing_rate <= 1.0:
            raise ConfigurationError(f"schedule.missing_rate must lie in [0, 1], got {self.missing_rate}")
        if self.missing not in MISSING_KINDS:
            raise ConfigurationError(f"schedule.missing must be one of {MISSING_KINDS}, got {self.missing!r}")
        if self.length is not None and self.length < 1:
            raise ConfigurationError(f"schedule.length must be >= 1, got {self.length}")


@dataclass(frozen=True)
class WarmupSection:
    mode: str = "none"
    length: int | None = None  # None -> the whole warm-up source
    complete_only: bool = True

    def __post_init__(self):
        if self.mode not in WARMUP_MODES:
            raise ConfigurationError(f"warmup.mode must be one of {WARMUP_MODES}, got {self.mode!r}")
        if self.length is not None and self.length < 1:
            raise ConfigurationError(f"warmup.length must be >= 1, got {self.length}")


@dataclass(frozen=True)
class SweepSection:
    methods: tuple[str, ...] = ALL_METHODS
    rates: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))
        if not self.methods:
            raise ConfigurationError("sweep.methods must not be empty")
        bad = [m for m in self.methods if m not in ALL_METHODS]
        if bad:
            raise ConfigurationError(f"sweep.methods: unknown {bad}, expected a subset of {ALL_METHODS}")
        if not self.rates:
            raise ConfigurationError("sweep.rates must not be empty")
        if any(not 0.0 <= r <= 1.0 for r in self.rates):
            raise ConfigurationError(f"sweep.rates must lie in [0, 1], got {list(self.rates)}")


SECTIONS = {
    "data": DataSection,
    "model": ModelConfig,
    "pretrain": PretrainSection,
    "adapter": AdapterConfig,
    "schedule": ScheduleSection,
    "warmup": WarmupSection,
    "sweep": SweepSection,
}
TOP_LEVEL = ("seeds", "out", "workers")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    warmup: WarmupSection = field(default_factory=WarmupSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    out: str = "runs"
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ConfigurationError("seeds must not be empty")
        if self.workers < 1:
            raise ConfigurationError(f"workers must be >= 1, got {self.workers}")
        if self.data.features is None:
            dims = (self.data.audio_dim, self.data.video_dim, self.data.num_classes)
            if dims != (self.model.audio_dim, self.model.video_dim, self.model.num_classes):
                raise ConfigurationError(
                    f"data dims/classes {dims} do not match model "
                    f"{(self.model.audio_dim, self.model.video_dim, self.model.num_classes)}")

    @classmethod
    def from_dict(cls, doc: dict[str, Any] | None) -> ExperimentConfig:
        doc = dict(doc or {})
        unknown = sorted(set(doc) - set(SECTIONS) - set(TOP_LEVEL))
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        kwargs: dict[str, Any] = {}
        for name, section_cls in SECTIONS.items():
            values = doc.get(name) or {}
            if not isinstance(values, dict):
                raise ConfigurationError(f"section {name!r} must be a mapping")
            known = {f.name for f in dataclasses.fields(section_cls)}
            extra = sorted(set(values) - known)
            if extra:
                raise ConfigurationError(f"unknown keys in {name}: {', '.join(extra)}")
            try:
                kwargs[name] = section_cls(**values)
            except ConfigurationError as exc:
                msg = str(exc)
                raise ConfigurationError(msg if msg.startswith(f"{name}.") else f"{name}: {msg}") from None
            except (TypeError, ValueError) as exc:
                raise ConfigurationError(f"{name}: {exc}") from None
        for key in TOP_LEVEL:
            if key in doc:
                kwargs[key] = doc[key]
        if "seeds" in kwargs and not isinstance(kwargs["seeds"], (list, tuple)):
            raise ConfigurationError("seeds must be a list of integers")
        return cls(**kwargs)

    def to_dict(self) -> dict[str, Any]:
        """Every field with defaults materialized."""
        out = {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}
        out["adapter"] = self.adapter.resolved(self.model.num_classes)
        out["sweep"] = {"methods": list(self.sweep.methods), "rates": list(self.sweep.rates)}
        out["seeds"] = list(self.seeds)
        out["out"] = self.out
        out["workers"] = self.workers
        return out


def apply_overrides(doc: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    """Set ``section.field`` (or top-level ``field``) keys on a raw config mapping."""
    doc = {k: (dict(v) if isinstance(v, dict) else v) for k, v in (doc or {}).items()}
    for key, value in overrides.items():
        parts = key.split(".")
        if len(parts) == 1:
            doc[key] = value
        elif len(parts) == 2:
            section = doc.setdefault(parts[0], {})
            if not isinstance(section, dict):
                raise ConfigurationError(f"section {parts[0]!r} must be a mapping")
            section[parts[1]] = value
        else:
            raise ConfigurationError(f"override {key!r} must be 'field' or 'section.field'")
    return doc


# ------------------------------------------------------------------- inputs


def load_splits(cfg: ExperimentConfig) -> tuple[MultimodalDataset, MultimodalDataset]:
    if cfg.data.features is not None:
        train = load_features(cfg.data.features, cfg.model)
        val = load_features(cfg.data.val_features, cfg.model)
        return train, val
    splits = generate_synthetic(cfg.data.spec(), cfg.data.seed)
    return splits.train, splits.val


def pretrain_all(cfg: ExperimentConfig, train: MultimodalDataset, val: MultimodalDataset) -> dict:
    """The multimodal model plus audio-only and video-only references."""
    p = cfg.pretrain
    return {m: pretrain(cfg.model, train, epochs=p.epochs, lr=p.lr, seed=p.seed, val=val,
                        batch_size=p.batch_size, modality=m) for m in ("AV", "A", "V")}


def write_pretrain(cfg: ExperimentConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    train, val = load_splits(cfg)
    results = pretrain_all(cfg, train, val)
    record = {"config": cfg.to_dict(), "models": {}}
    for m, res in results.items():
        meta = {"modality": m, "train_accuracy": res.train_accuracy, "val_accuracy": res.val_accuracy}
        save_checkpoint(res.model, out / CHECKPOINT_FILES[m], meta)
        record["models"][m] = {**meta, "file": CHECKPOINT_FILES[m], "losses": res.losses}
    (out / "training_log.json").write_text(json.dumps(record, indent=2))
    return record


def obtain_model(cfg: ExperimentConfig, train: MultimodalDataset
                 ) -> tuple[ExperimentConfig, MultimodalClassifier]:
    """Load ``pretrain.checkpoint`` or pretrain from scratch.

    A loaded checkpoint's architecture replaces ``cfg.model`` so the echoed
    config describes the model that actually ran.
    """
    if cfg.pretrain.checkpoint is None:
        p = cfg.pretrain
        return cfg, pretrain(cfg.model, train, epochs=p.epochs, lr=p.lr, seed=p.seed,
                             batch_size=p.batch_size).model
    model, _ = load_checkpoint(cfg.pretrain.checkpoint, trainable=False)
    train.check_model(model.config)
    return dataclasses.replace(cfg, model=model.config), model


def warmup_source(cfg: ExperimentConfig, train: MultimodalDataset) -> MultimodalDataset | None:
    if cfg.warmup.mode == "none":
        return None
    if cfg.warmup.mode == "lta":
        return train
    if cfg.data.features is not None:
        raise ConfigurationError("warmup.mode 'shifted' needs synthetic data, not feature files")
    return generate_shifted(cfg.data.spec(shifted=True), cfg.data.seed)


# --------------------------------------------------------------------- runs


def run_single(cfg: ExperimentConfig, model: MultimodalClassifier, val: MultimodalDataset,
               warm: MultimodalDataset | None, method: str, rate: float, seed: int
               ) -> tuple[dict, OnlineMetrics]:
    """One (method, missing rate, seed) cell: optional warm-up, then evaluation."""
    adapter = Adapter(model, dataclasses.replace(cfg.adapter, method=method))
    warm_steps = 0
    if warm is not None:
        length = min(cfg.warmup.length or len(warm), len(warm))
        if cfg.warmup.complete_only:
            wsched = StreamSchedule(0.0, 0.0, 1.0, seed=seed, length=length)
        else:
            wsched = StreamSchedule.from_missing_rate(rate, seed, length, cfg.schedule.missing)
        # warm-up labels are never read; the source is handed over label-free
        blind = warm.with_labels(np.zeros(len(warm), dtype=np.int64))
        warm_steps = run_events(adapter, blind, make_events(wsched, len(blind)), phase="warmup").adapted_steps
    length = min(cfg.schedule.length or len(val), len(val))
    sched = StreamSchedule.from_missing_rate(rate, seed, length, cfg.schedule.missing)
    metrics = run_events(adapter, val, make_events(sched, len(val)))
    live, frozen, backwards = adapter.count_compute()
    row = {
        "method": method,
        "missing_rate": rate,
        "seed": seed,
        "accuracy": metrics.accuracy,
        "per_modality_accuracy": metrics.per_modality_accuracy(),
        "mean_losses": metrics.mean_losses(),
        "adapted_steps": metrics.adapted_steps,
        "warmup_steps": warm_steps,
        "compute": {"live_forwards": live, "frozen_forwards": frozen, "backwards": backwards},
    }
    return row, metrics


def cmd_run(cfg: ExperimentConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    train, val = load_splits(cfg)
    cfg, model = obtain_model(cfg, train)
    warm = warmup_source(cfg, train)
    seed = cfg.seeds[0]
    row, metrics = run_single(cfg, model, val, warm, cfg.adapter.method, cfg.schedule.missing_rate, seed)
    summary = {"config": cfg.to_dict(), **row}
    metrics.write_trace(out / "trace.csv")
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def _cell(args) -> dict:
    cfg, config, state, val, warm, method, rate, seed = args
    model = MultimodalClassifier.from_state(config, state, trainable=False)
    try:
        row, _ = run_single(cfg, model, val, warm, method, rate, seed)
        return row
    except Exception as exc:  # recorded per cell; the sweep exits nonzero afterwards
        return {"method": method, "missing_rate": rate, "seed": seed, "error": f"{type(exc).__name__}: {exc}"}


def aggregate(rows: list[dict], seeds) -> list[dict]:
    """Mean and population std of accuracy per (method, missing rate)."""
    cells: dict[tuple[str, float], list[dict]] = {}
    for row in rows:
        cells.setdefault((row["method"], row["missing_rate"]), []).append(row)
    table = []
    for (method, rate), group in cells.items():
        ok = [r for r in group if "error" not in r]
        accs = np.array([r["accuracy"] for r in ok], dtype=float)
        entry = {
            "method": method,
            "missing_rate": rate,
            "runs": len(ok),
            "failed": len(group) - len(ok),
            "accuracy_mean": float(accs.mean()) if len(ok) else math.nan,
            "accuracy_std": float(accs.std()) if len(ok) else math.nan,
        }
        for m in Modality:
            vals = [r["per_modality_accuracy"][m.value] for r in ok
                    if r["per_modality_accuracy"][m.value] is not None]
            entry[f"accuracy_{m.value}"] = float(np.mean(vals)) if vals else None
        if len(ok) + entry["failed"] != len(seeds):
            raise MidlError(f"cell ({method}, {rate}) has {len(group)} runs, expected {len(seeds)}")
        table.append(entry)
    return table


def sweep_rows(cfg: ExperimentConfig, model: MultimodalClassifier, val: MultimodalDataset,
               warm: MultimodalDataset | None) -> list[dict]:
    jobs = [(cfg, model.config, model.state(), val, warm, method, rate, seed)
            for method in cfg.sweep.methods for rate in cfg.sweep.rates for seed in cfg.seeds]
    if cfg.workers == 1:
        return [_cell(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(_cell, jobs))


def cmd_sweep(cfg: ExperimentConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    train, val = load_splits(cfg)
    cfg, model = obtain_model(cfg, train)
    rows = sweep_rows(cfg, model, val, warmup_source(cfg, train))
    table = aggregate(rows, cfg.seeds)
    _write_csv(out / "table.csv", table)
    _write_csv(out / "curves.csv", [_flatten(r) for r in rows])
    failures = [r for r in rows if "error" in r]
    summary = {"config": cfg.to_dict(), "table": table, "failures": failures}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def _flatten(row: dict) -> dict:
    flat = {k: row[k] for k in ("method", "missing_rate", "seed")}
    flat["accuracy"] = row.get("accuracy")
    for m, acc in (row.get("per_modality_accuracy") or {}).items():
        flat[f"accuracy_{m}"] = acc
    flat.update(row.get("compute") or {})
    flat.update(row.get("mean_losses") or {})
    flat["adapted_steps"] = row.get("adapted_steps")
    flat["error"] = row.get("error", "")
    return flat


def _write_csv(path: Path, rows: list[dict]) -> None:
    columns: list[str] = []
    for row in rows:
        columns += [k for k in row if k not in columns]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in columns})
