"""Adaptation policies: predict on each revealed batch, then optionally update.

An :class:`Adapter` owns a live copy of the pretrained model, a frozen copy of
the initial parameters, the momentum buffers of the selected parameters and
the compute counters. ``on_batch`` always computes the prediction with the
current parameters before any update.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ContractError
from .losses import KL_MODES, LossBreakdown, default_eta_threshold, eta_loss, midl_objective
from .losses import shot_loss, tent_loss
from .model import Modality, MultimodalClassifier, ParameterSelection


class Method(str, enum.Enum):
    NONE = "none"
    MIDL = "midl"
    MI_ONLY = "mi_only"
    DL_ONLY = "dl_only"
    TENT = "tent"
    SHOT = "shot"
    ETA = "eta"

    @property
    def is_midl_family(self) -> bool:
        return self in (Method.MIDL, Method.MI_ONLY, Method.DL_ONLY)

    @property
    def is_baseline(self) -> bool:
        return self in (Method.TENT, Method.SHOT, Method.ETA)


ALL_METHODS = tuple(m.value for m in Method)


@dataclass(frozen=True)
class AdapterConfig:
    method: str = "midl"
    learning_rate: float = 25e-4
    momentum: float = 0.9
    lambda_mi: float = 3.0
    lambda_kl: float = 3.0
    param_selection: str = "norm"
    kl_mode: str = "av_only"
    eta_threshold: float | None = None  # None -> 0.4 * log K
    batch_size: int | None = None  # None -> 8 for shot, 1 otherwise
    baselines_adapt_unimodal: bool = True

    def __post_init__(self):
        if self.method not in ALL_METHODS:
            raise ConfigurationError(f"adapter.method must be one of {ALL_METHODS}, got {self.method!r}")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"adapter.learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"adapter.momentum must lie in [0, 1), got {self.momentum}")
        if self.kl_mode not in KL_MODES:
            raise ConfigurationError(f"adapter.kl_mode must be one of {KL_MODES}, got {self.kl_mode!r}")
        try:
            ParameterSelection(self.param_selection)
        except ValueError:
            raise ConfigurationError(
                f"adapter.param_selection must be 'norm' or 'all', got {self.param_selection!r}") from None
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigurationError(f"adapter.batch_size must be >= 1, got {self.batch_size}")
        if self.eta_threshold is not None and not self.eta_threshold > 0:
            raise ConfigurationError(f"adapter.eta_threshold must be > 0, got {self.eta_threshold}")

    @property
    def resolved_batch_size(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 8 if self.method == Method.SHOT.value else 1

    def resolved(self, num_classes: int) -> dict:
        """All defaults materialized, for run summaries."""
        out = asdict(self)
        out["batch_size"] = self.resolved_batch_size
        if out["eta_threshold"] is None:
            out["eta_threshold"] = default_eta_threshold(num_classes)
        return out


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
             buffers: dict[str, np.ndarray], lr: float, momentum: float) -> None:
    """Momentum SGD: v <- momentum * v + g; theta <- theta - lr * v."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        v = momentum * buffers[name] + g
        buffers[name] = v
        p.data = p.data - lr * v


@dataclass
class StepResult:
    predictions: np.ndarray
    adapted: bool
    losses: dict[str, float] | None = None


class Adapter:
    """Holds theta_t, theta_0, optimizer state and compute counters for one stream."""

    def __init__(self, model: MultimodalClassifier, config: AdapterConfig | None = None):
        self.config = config or AdapterConfig()
        self.method = Method(self.config.method)
        self.model = model.clone(trainable=False)
        self.frozen = model.clone(trainable=False)
        selected = self.model.select_parameters(self.config.param_selection)
        self.selected_names = list(selected)
        self.model.set_trainable(self.selected_names)
        self.buffers = {n: np.zeros_like(self.model.params[n].data) for n in self.selected_names}
        num_classes = model.config.num_classes
        self.eta_threshold = (self.config.eta_threshold if self.config.eta_threshold is not None
                              else default_eta_threshold(num_classes))
        self.steps = 0
        self.forwards_live = 0
        self.forwards_frozen = 0
        self.backwards = 0

    @property
    def batch_size(self) -> int:
        return self.config.resolved_batch_size

    def count_compute(self) -> tuple[int, int, int]:
        return self.forwards_live, self.forwards_frozen, self.backwards

    # -- protocol ------------------------------------------------------------

    def on_sample(self, sample, modality: Modality | str) -> tuple[np.ndarray, bool]:
        res = self.on_batch(np.atleast_2d(sample.audio), np.atleast_2d(sample.video), [modality])
        return res.predictions[0], res.adapted

    def on_batch(self, audio: np.ndarray, video: np.ndarray,
                 modalities: Sequence[Modality | str]) -> StepResult:
        """Predict every row with theta_t, then take at most one update step."""
        modalities = [Modality.parse(m) for m in modalities]
        rows = self._adapt_rows(modalities)
        if rows.size == 0:
            with ad.no_grad():
                probs = self.model.forward(audio, video, modalities)
            self.forwards_live += 1
            return StepResult(probs.data.copy(), False)

        probs = self.model.forward(audio, video, modalities)
        self.forwards_live += 1
        predictions = probs.data.copy()

        if self.method.is_midl_family:
            breakdown = self._midl_breakdown(probs, audio, video, rows)
            loss, losses = breakdown.total, breakdown.as_floats()
        else:
            loss = self._baseline_loss(ad.take_rows(probs, rows))
            if loss is None:
                return StepResult(predictions, False)
            losses = {"total": loss.item()}
        self._step(loss)
        return StepResult(predictions, True, losses)

    # -- internals -----------------------------------------------------------

    def _adapt_rows(self, modalities: list[Modality]) -> np.ndarray:
        if self.method is Method.NONE:
            return np.empty(0, dtype=np.intp)
        if self.method.is_midl_family or not self.config.baselines_adapt_unimodal:
            return np.array([i for i, m in enumerate(modalities) if m is Modality.AV], dtype=np.intp)
        return np.arange(len(modalities), dtype=np.intp)

    def _midl_breakdown(self, probs: Tensor, audio, video, rows: np.ndarray) -> LossBreakdown:
        cfg = self.config
        a, v = audio[rows], video[rows]
        n = len(rows)
        # the AV prediction pass doubles as the AV view; A and V views share one stacked pass
        uni = self.model.forward(np.concatenate([a, a]), np.concatenate([v, v]),
                                 [Modality.A] * n + [Modality.V] * n)
        self.forwards_live += 2
        views = {
            Modality.A: ad.take_rows(uni, np.arange(n)),
            Modality.V: ad.take_rows(uni, np.arange(n, 2 * n)),
            Modality.AV: ad.take_rows(probs, rows),
        }
        frozen_modes = (Modality.AV,) if cfg.kl_mode == "av_only" else tuple(views)
        frozen_views = {m: self.frozen.predict(a, v, m) for m in frozen_modes}
        self.forwards_frozen += len(frozen_modes)
        return midl_objective(
            views, frozen_views, cfg.lambda_mi, cfg.lambda_kl, cfg.kl_mode,
            use_mi=self.method is not Method.DL_ONLY,
            use_kl=self.method is not Method.MI_ONLY,
        )

    def _baseline_loss(self, probs: Tensor) -> Tensor | None:
        if self.method is Method.TENT:
            return tent_loss(probs)
        if self.method is Method.SHOT:
            return shot_loss(probs)
        return eta_loss(probs, self.eta_threshold)

    def _step(self, loss: Tensor) -> None:
        params = {n: self.model.params[n] for n in self.selected_names}
        ad.zero_grad(params.values())
        ad.backward(loss)
        self.backwards += 1
        sgd_step(params, {n: p.grad for n, p in params.items()}, self.buffers,
                 self.config.learning_rate, self.config.momentum)
        self.steps += 1


def on_sample(adapter: Adapter, sample, modality: Modality | str) -> tuple[np.ndarray, bool]:
    return adapter.on_sample(sample, modality)


def count_compute(adapter: Adapter) -> tuple[int, int, int]:
    return adapter.count_compute()
