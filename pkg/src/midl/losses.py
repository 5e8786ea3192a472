"""Self-supervised objectives on class-probability vectors.

All functions accept a single probability vector of shape (K,) or a batch of
shape (B, K) (numpy arrays or :class:`~midl.autodiff.Tensor`) and return
scalar tensors, averaged over the batch where a batch is given.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .model import Modality, MultimodalClassifier

KL_MODES = ("av_only", "per_modality")


def entropy(p) -> Tensor:
    """Shannon entropy -sum p log p along the class axis (one value per row)."""
    p = ad.as_tensor(p)
    return ad.negate(ad.tsum(p * ad.log(p), axis=-1))


def kl_divergence(p, q) -> Tensor:
    """KL(p || q) along the class axis, with q clamped at 1e-12 inside the log."""
    p, q = ad.as_tensor(p), ad.as_tensor(q)
    if p.shape != q.shape:
        raise ContractError(f"kl_divergence: shapes differ {p.shape} vs {q.shape}")
    return ad.tsum(p * (ad.log(p) - ad.log(q)), axis=-1)


def _batch_mean(x: Tensor) -> Tensor:
    return x if x.data.ndim == 0 else ad.mean(x)


def _mean_of(views: Sequence[Tensor]) -> Tensor:
    total = views[0]
    for v in views[1:]:
        total = total + v
    return total * (1.0 / len(views))


def mi_loss(preds: Sequence) -> tuple[Tensor, Tensor, Tensor]:
    """(l_ent, l_div, l_mi) for predictions of the same input under several views.

    l_ent is the negative mean per-view entropy, l_div the negative entropy of
    the averaged prediction, and l_mi = l_ent - l_div. With a single view the
    two terms are computed from identical values, so l_mi is exactly zero.
    """
    if len(preds) == 0:
        raise ContractError("mi_loss needs at least one view")
    views = [ad.as_tensor(p) for p in preds]
    l_ent = ad.negate(_batch_mean(_mean_of([entropy(v) for v in views])))
    l_div = ad.negate(_batch_mean(entropy(_mean_of(views))))
    return l_ent, l_div, l_ent - l_div


@dataclass
class LossBreakdown:
    l_ent: Tensor
    l_div: Tensor
    l_mi: Tensor
    l_kl: Tensor
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("l_ent", "l_div", "l_mi", "l_kl", "total")}


def midl_objective(views: dict[Modality, Tensor], frozen_views: dict[Modality, np.ndarray],
                   lambda_mi: float = 3.0, lambda_kl: float = 3.0, kl_mode: str = "av_only",
                   use_mi: bool = True, use_kl: bool = True) -> LossBreakdown:
    """Assemble lambda_mi * L_MI + lambda_kl * L_KL from precomputed view predictions.

    ``views`` maps each of A, V, AV to the live model's probabilities;
    ``frozen_views`` holds the initial model's probabilities for AV (and for
    A and V when ``kl_mode == "per_modality"``). ``use_mi``/``use_kl`` select
    the ablation variants; the breakdown always reports both terms.
    """
    if kl_mode not in KL_MODES:
        raise ContractError(f"kl_mode must be one of {KL_MODES}, got {kl_mode!r}")
    order = (Modality.A, Modality.V, Modality.AV)
    l_ent, l_div, l_mi = mi_loss([views[m] for m in order])
    if kl_mode == "av_only":
        l_kl = _batch_mean(kl_divergence(views[Modality.AV], frozen_views[Modality.AV]))
    else:
        l_kl = _mean_of([_batch_mean(kl_divergence(views[m], frozen_views[m])) for m in order])
    total = None
    if use_mi:
        total = l_mi * lambda_mi
    if use_kl:
        term = l_kl * lambda_kl
        total = term if total is None else total + term
    if total is None:
        total = ad.Tensor(0.0)
    return LossBreakdown(l_ent, l_div, l_mi, l_kl, total)


def midl_loss(model: MultimodalClassifier, frozen: MultimodalClassifier, sample,
              lambda_mi: float = 3.0, lambda_kl: float = 3.0, kl_mode: str = "av_only",
              modality: Modality | str = Modality.AV) -> LossBreakdown:
    """Three live forward passes (A, V, AV) plus the frozen AV pass, then the objective.

    ``sample`` is anything with ``audio`` and ``video`` attributes (one sample
    or a batch). Only modality-complete inputs are accepted.
    """
    if Modality.parse(modality) is not Modality.AV:
        raise ContractError("midl_loss requires a modality-complete (AV) sample")
    audio, video = np.atleast_2d(sample.audio), np.atleast_2d(sample.video)
    views = {m: model.forward(audio, video, m) for m in (Modality.A, Modality.V, Modality.AV)}
    frozen_modes = (Modality.AV,) if kl_mode == "av_only" else tuple(views)
    frozen_views = {m: frozen.predict(audio, video, m) for m in frozen_modes}
    return midl_objective(views, frozen_views, lambda_mi, lambda_kl, kl_mode)


# ------------------------------------------------------------------ baselines


def tent_loss(pred) -> Tensor:
    """Mean prediction entropy."""
    return _batch_mean(entropy(pred))


def shot_loss(preds) -> Tensor:
    """Information-maximization objective: mean entropy minus entropy of the mean.

    A single prediction gives exactly zero.
    """
    preds = ad.as_tensor(preds)
    if preds.data.ndim == 1:
        preds = ad.stack([preds])
    if preds.shape[0] == 0:
        raise ContractError("shot_loss needs a non-empty batch")
    mean_pred = ad.mean(preds, axis=0)
    return ad.mean(entropy(preds)) - entropy(mean_pred)


def default_eta_threshold(num_classes: int) -> float:
    return 0.4 * float(np.log(num_classes))


def eta_weight(pred, e0: float) -> np.ndarray | float:
    """Sample weight 1/exp(H - e0) for confident predictions, 0 when H >= e0."""
    if e0 <= 0:
        raise ContractError(f"eta threshold must be positive, got {e0}")
    h = entropy(pred).data
    w = np.where(h < e0, np.exp(-(h - e0)), 0.0)
    return float(w) if w.ndim == 0 else w


def eta_loss(preds, e0: float) -> Tensor | None:
    """Weighted entropy over the reliable rows; ``None`` when no row qualifies."""
    preds = ad.as_tensor(preds)
    if preds.data.ndim == 1:
        preds = ad.stack([preds])
    h = entropy(preds)
    w = np.atleast_1d(eta_weight(preds.data, e0))
    keep = np.flatnonzero(w > 0)
    if keep.size == 0:
        return None
    return ad.mean(ad.take_rows(h, keep) * w[keep])
