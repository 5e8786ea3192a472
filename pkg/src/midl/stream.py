"""Modality schedules, the online protocol loop and its metrics.

Random draws use numpy's Philox4x64 counter-based generator keyed directly by
the 64-bit seed. Modality draws use counter word 3 = 0 and the sample-order
permutation uses counter word 3 = 1, so the two streams never overlap. Each
modality is chosen from one uniform double ``u`` (53-bit, numpy's
``Generator.random``): A if ``u < p_a``, V if ``u < p_a + p_v``, else AV, with
zero-probability categories skipped.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .adapt import Adapter
from .data import MultimodalDataset
from .errors import ValidationError
from .model import Modality

_MASK64 = (1 << 64) - 1
TRACE_COLUMNS = ("t", "modality", "predicted", "label", "correct",
                 "l_ent", "l_div", "l_mi", "l_kl", "adapted")


def _philox(seed: int, stream: int) -> np.random.Generator:
    bitgen = np.random.Philox(key=int(seed) & _MASK64, counter=[0, 0, 0, stream])
    return np.random.Generator(bitgen)


@dataclass(frozen=True)
class StreamSchedule:
    p_a: float
    p_v: float
    p_av: float
    seed: int = 0
    length: int = 1

    def __post_init__(self):
        validate_probabilities((self.p_a, self.p_v, self.p_av))
        if self.length < 1:
            raise ValidationError(f"schedule length must be >= 1, got {self.length}")

    @property
    def missing_rate(self) -> float:
        return 1.0 - self.p_av

    @property
    def probabilities(self) -> tuple[float, float, float]:
        return (self.p_a, self.p_v, self.p_av)

    @classmethod
    def from_missing_rate(cls, rate: float, seed: int = 0, length: int = 1,
                          missing: str = "video") -> StreamSchedule:
        """``missing`` is the dropped modality: "video" (A-only samples), "audio", or "mixed"."""
        if not 0.0 <= rate <= 1.0:
            raise ValidationError(f"missing rate must lie in [0, 1], got {rate}")
        if missing == "video":
            p = (rate, 0.0, 1.0 - rate)
        elif missing == "audio":
            p = (0.0, rate, 1.0 - rate)
        elif missing == "mixed":
            p = (0.5 * rate, 0.5 * rate, 1.0 - rate)
        else:
            raise ValidationError(f"missing must be 'video', 'audio' or 'mixed', got {missing!r}")
        return cls(*p, seed=seed, length=length)

    def modalities(self) -> list[Modality]:
        return build_schedule(self.probabilities, self.seed, self.length)


def validate_probabilities(p: Sequence[float]) -> None:
    names = ("p_a", "p_v", "p_av")
    if len(p) != 3:
        raise ValidationError(f"expected three probabilities (p_a, p_v, p_av), got {len(p)}")
    bad = [f"{n}={v}" for n, v in zip(names, p) if not (0.0 <= v <= 1.0) or math.isnan(v)]
    if bad:
        raise ValidationError(f"probabilities outside [0, 1]: {', '.join(bad)}")
    total = math.fsum(p)
    if abs(total - 1.0) > 1e-12:
        raise ValidationError(f"p_a + p_v + p_av = {total!r}, must equal 1")


def build_schedule(p: Sequence[float], seed: int, n: int) -> list[Modality]:
    validate_probabilities(p)
    if n < 1:
        raise ValidationError(f"schedule length must be >= 1, got {n}")
    cats = [(m, pm) for m, pm in zip((Modality.A, Modality.V, Modality.AV), p) if pm > 0]
    cum = np.cumsum([float(pm) for _, pm in cats])
    cum[-1] = np.inf
    u = _philox(seed, 0).random(n)
    idx = np.searchsorted(cum, u, side="right")
    labels = [m for m, _ in cats]
    return [labels[i] for i in idx]


def sample_order(seed: int, dataset_size: int) -> np.ndarray:
    """Seeded permutation of dataset indices; the stream takes a prefix of it."""
    return _philox(seed, 1).permutation(dataset_size)


@dataclass(frozen=True)
class StreamEvent:
    t: int
    index: int
    modality: Modality


def make_events(schedule: StreamSchedule, dataset_size: int) -> list[StreamEvent]:
    if schedule.length > dataset_size:
        raise ValidationError(
            f"schedule length {schedule.length} exceeds dataset size {dataset_size}")
    order = sample_order(schedule.seed, dataset_size)
    return [StreamEvent(t, int(order[t]), m) for t, m in enumerate(schedule.modalities())]


def argmax_label(pred) -> int:
    """Index of the largest probability; ties go to the lowest index."""
    return int(np.argmax(np.asarray(pred)))


@dataclass
class OnlineMetrics:
    correct: int = 0
    total: int = 0
    per_modality: dict[str, list[int]] = field(
        default_factory=lambda: {m.value: [0, 0] for m in Modality})
    trace: list[dict] = field(default_factory=list)
    predictions: list[np.ndarray] = field(default_factory=list)
    adapted_steps: int = 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else float("nan")

    def per_modality_accuracy(self) -> dict[str, float | None]:
        return {m: (c / n if n else None) for m, (c, n) in self.per_modality.items()}

    def mean_losses(self) -> dict[str, float | None]:
        out = {}
        for key in ("l_ent", "l_div", "l_mi", "l_kl"):
            vals = [r[key] for r in self.trace if r.get(key) is not None]
            out[key] = float(np.mean(vals)) if vals else None
        return out

    def write_trace(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
            writer.writeheader()
            for row in self.trace:
                writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in TRACE_COLUMNS})


def run_events(adapter: Adapter, dataset: MultimodalDataset, events: Iterable[StreamEvent],
               phase: str = "evaluate", metrics: OnlineMetrics | None = None) -> OnlineMetrics:
    """Feed events to the adapter in batches of ``adapter.batch_size``.

    In the evaluate phase every prediction is scored against the hidden
    label; in the warmup phase labels are not read at all.
    """
    if phase not in ("evaluate", "warmup"):
        raise ValidationError(f"phase must be 'evaluate' or 'warmup', got {phase!r}")
    metrics = metrics if metrics is not None else OnlineMetrics()
    events = list(events)
    bs = adapter.batch_size
    for start in range(0, len(events), bs):
        batch = events[start:start + bs]
        idx = np.array([e.index for e in batch], dtype=np.intp)
        mods = [e.modality for e in batch]
        res = adapter.on_batch(dataset.audio[idx], dataset.video[idx], mods)
        metrics.adapted_steps += int(res.adapted)
        if phase == "warmup":
            continue
        losses = res.losses or {}
        for j, ev in enumerate(batch):
            pred = res.predictions[j]
            predicted = argmax_label(pred)
            label = int(dataset.labels[ev.index])
            ok = predicted == label
            metrics.correct += ok
            metrics.total += 1
            cell = metrics.per_modality[ev.modality.value]
            cell[0] += ok
            cell[1] += 1
            metrics.predictions.append(pred)
            metrics.trace.append({
                "t": ev.t, "modality": ev.modality.value, "predicted": predicted,
                "label": label, "correct": int(ok),
                "l_ent": losses.get("l_ent"), "l_div": losses.get("l_div"),
                "l_mi": losses.get("l_mi"), "l_kl": losses.get("l_kl"),
                "adapted": int(res.adapted),
            })
    return metrics


def run_protocol(adapter: Adapter, schedule: StreamSchedule, dataset: MultimodalDataset,
                 phase: str = "evaluate") -> OnlineMetrics:
    """Reveal ``schedule.length`` samples of ``dataset`` in seeded order.

    The adapter is mutated in place, so a warmup run followed by an evaluate
    run on the same adapter chains the two phases.
    """
    return run_events(adapter, dataset, make_events(schedule, len(dataset)), phase)
