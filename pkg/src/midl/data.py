"""Synthetic audio-visual datasets, feature-file I/O and supervised pretraining."""

from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DivergenceError, FeatureFileError, ValidationError
from .model import Modality, ModelConfig, MultimodalClassifier

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"MMFEAT\x00\x00"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<8sIIIIQ")  # magic, version, K, audio_dim, video_dim, count


@dataclass(frozen=True)
class MultimodalSample:
    audio: np.ndarray
    video: np.ndarray
    label: int


class MultimodalDataset:
    """Column-stored samples: ``audio`` (N, da), ``video`` (N, dv), ``labels`` (N,)."""

    def __init__(self, audio, video, labels, num_classes: int):
        self.audio = np.asarray(audio, dtype=np.float64)
        self.video = np.asarray(video, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.num_classes = int(num_classes)
        n = len(self.labels)
        if self.audio.ndim != 2 or self.video.ndim != 2:
            raise ValidationError("feature arrays must be 2-D")
        if self.audio.shape[0] != n or self.video.shape[0] != n:
            raise ValidationError(
                f"row counts differ: audio {self.audio.shape[0]}, video {self.video.shape[0]}, labels {n}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError(f"labels must lie in [0, {self.num_classes})")
        if not (np.isfinite(self.audio).all() and np.isfinite(self.video).all()):
            raise ValidationError("feature values must be finite")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> MultimodalSample:
        return MultimodalSample(self.audio[i], self.video[i], int(self.labels[i]))

    @property
    def audio_dim(self) -> int:
        return self.audio.shape[1]

    @property
    def video_dim(self) -> int:
        return self.video.shape[1]

    def subset(self, indices) -> MultimodalDataset:
        idx = np.asarray(indices, dtype=np.intp)
        return MultimodalDataset(self.audio[idx], self.video[idx], self.labels[idx], self.num_classes)

    def with_labels(self, labels) -> MultimodalDataset:
        return MultimodalDataset(self.audio, self.video, labels, self.num_classes)

    def check_model(self, config: ModelConfig) -> None:
        if (self.audio_dim, self.video_dim) != (config.audio_dim, config.video_dim):
            raise ConfigurationError(
                f"dataset dims (audio {self.audio_dim}, video {self.video_dim}) do not match "
                f"model dims (audio {config.audio_dim}, video {config.video_dim})")
        if self.num_classes != config.num_classes:
            raise ConfigurationError(
                f"dataset has {self.num_classes} classes, model has {config.num_classes}")


@dataclass(frozen=True)
class DomainShift:
    offset_scale: float = 1.0
    covariance_scale: float = 1.0


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 8
    audio_dim: int = 16
    video_dim: int = 16
    samples_per_class: int = 625
    latent_dim: int = 8
    class_separation: float = 1.0
    modality_correlation: float = 0.0
    noise_sigma: float = 2.0
    domain_shift: DomainShift | None = field(default=None)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        for name in ("audio_dim", "video_dim", "samples_per_class", "latent_dim"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.class_separation > 0:
            raise ValidationError(f"class_separation must be > 0, got {self.class_separation}")
        if not self.noise_sigma > 0:
            raise ValidationError(f"noise_sigma must be > 0, got {self.noise_sigma}")
        if not 0.0 <= self.modality_correlation <= 1.0:
            raise ValidationError(
                f"modality_correlation must lie in [0, 1], got {self.modality_correlation}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticSplits:
    train: MultimodalDataset
    val: MultimodalDataset


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream])))


def _f32(x: np.ndarray) -> np.ndarray:
    # values are kept float32-representable so feature files round-trip exactly
    return x.astype(np.float32).astype(np.float64)


def _orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """A rows x cols matrix with orthonormal rows or columns (whichever is fewer)."""
    m = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, _ = np.linalg.qr(m)
    return q if rows >= cols else q.T


def _structure(spec: SyntheticSpec, seed: int):
    rng = _rng(seed, 0)
    r = spec.latent_dim
    centers = rng.standard_normal((spec.num_classes, r)) * spec.class_separation
    audio_proj = rng.standard_normal((spec.audio_dim, r)) / np.sqrt(r)
    video_proj = rng.standard_normal((spec.video_dim, r)) / np.sqrt(r)
    noise_map = _orthonormal(rng, spec.video_dim, spec.audio_dim)
    return centers, audio_proj, video_proj, noise_map


def _draw(spec: SyntheticSpec, structure, rng: np.random.Generator,
          offset: tuple[np.ndarray, np.ndarray] | None = None, noise_scale: float = 1.0):
    centers, audio_proj, video_proj, noise_map = structure
    n = spec.samples_per_class * spec.num_classes
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    z = centers[labels]
    e_audio = rng.standard_normal((n, spec.audio_dim))
    e_video = rng.standard_normal((n, spec.video_dim))
    rho = spec.modality_correlation
    # video noise shares a rho-weighted component with the audio noise
    e_video = rho * (e_audio @ noise_map.T) + np.sqrt(1.0 - rho * rho) * e_video
    sigma = spec.noise_sigma * noise_scale
    audio = z @ audio_proj.T + sigma * e_audio
    video = z @ video_proj.T + sigma * e_video
    if offset is not None:
        audio = audio + offset[0]
        video = video + offset[1]
    return MultimodalDataset(_f32(audio), _f32(video), labels, spec.num_classes)


def generate_synthetic(spec: SyntheticSpec, seed: int) -> SyntheticSplits:
    """Class-latent mixture observed through two noisy linear views, split 80/20."""
    structure = _structure(spec, seed)
    data = _draw(spec, structure, _rng(seed, 1))
    perm = _rng(seed, 2).permutation(len(data))
    n_train = int(round(0.8 * len(data)))
    return SyntheticSplits(data.subset(np.sort(perm[:n_train])), data.subset(np.sort(perm[n_train:])))


def generate_shifted(spec: SyntheticSpec, seed: int) -> MultimodalDataset:
    """Same class structure as ``generate_synthetic(spec, seed)``, shifted features.

    Features receive a fixed random mean offset scaled by
    ``domain_shift.offset_scale`` and noise scaled by
    ``domain_shift.covariance_scale``.
    """
    if spec.domain_shift is None:
        raise ValidationError("generate_shifted needs spec.domain_shift")
    shift = spec.domain_shift
    if shift.covariance_scale <= 0:
        raise ValidationError(f"covariance_scale must be > 0, got {shift.covariance_scale}")
    structure = _structure(spec, seed)
    rng_dir = _rng(seed, 4)
    da = rng_dir.standard_normal(spec.audio_dim)
    dv = rng_dir.standard_normal(spec.video_dim)
    scale = shift.offset_scale * spec.noise_sigma
    offset = (scale * da / np.linalg.norm(da) * np.sqrt(spec.audio_dim),
              scale * dv / np.linalg.norm(dv) * np.sqrt(spec.video_dim))
    return _draw(spec, structure, _rng(seed, 3), offset=offset, noise_scale=shift.covariance_scale)


# --------------------------------------------------------------- feature file


def save_features(dataset: MultimodalDataset, path: str | Path) -> None:
    """Binary little-endian layout: header, then (label u32, audio f32*, video f32*) per sample."""
    n = len(dataset)
    header = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, dataset.num_classes,
                          dataset.audio_dim, dataset.video_dim, n)
    rec = np.dtype([("label", "<u4"), ("audio", "<f4", (dataset.audio_dim,)),
                    ("video", "<f4", (dataset.video_dim,))])
    records = np.zeros(n, dtype=rec)
    records["label"] = dataset.labels
    records["audio"] = dataset.audio
    records["video"] = dataset.video
    Path(path).write_bytes(header + records.tobytes())


def load_features(path: str | Path, config: ModelConfig | None = None) -> MultimodalDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureFileError(f"truncated header: {len(raw)} of {_HEADER.size} bytes", len(raw))
    magic, version, k, da, dv, n = _HEADER.unpack_from(raw, 0)
    if magic != FEATURE_MAGIC:
        raise FeatureFileError("bad magic tag", 0)
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"unsupported format version {version}", 8)
    if k < 2 or da < 1 or dv < 1:
        raise FeatureFileError(f"invalid header values K={k}, audio_dim={da}, video_dim={dv}", 12)
    if n == 0:
        raise ValidationError("empty dataset")
    rec_size = 4 * (1 + da + dv)
    body = len(raw) - _HEADER.size
    if body < n * rec_size:
        complete = body // rec_size
        offset = _HEADER.size + complete * rec_size
        raise FeatureFileError(f"truncated record {complete} of {n}", offset)
    if body > n * rec_size:
        raise FeatureFileError("trailing bytes after last record", _HEADER.size + n * rec_size)
    rec = np.dtype([("label", "<u4"), ("audio", "<f4", (da,)), ("video", "<f4", (dv,))])
    records = np.frombuffer(raw, dtype=rec, count=n, offset=_HEADER.size)
    labels = records["label"].astype(np.int64)
    bad = np.flatnonzero(labels >= k)
    if bad.size:
        raise FeatureFileError(f"label {labels[bad[0]]} out of range for K={k}",
                               _HEADER.size + int(bad[0]) * rec_size)
    audio = records["audio"].astype(np.float64)
    video = records["video"].astype(np.float64)
    finite = np.isfinite(audio).all(axis=1) & np.isfinite(video).all(axis=1)
    if not finite.all():
        first = int(np.flatnonzero(~finite)[0])
        raise FeatureFileError(f"non-finite feature in record {first}", _HEADER.size + first * rec_size)
    dataset = MultimodalDataset(audio, video, labels, k)
    if config is not None:
        dataset.check_model(config)
    return dataset


# ---------------------------------------------------------------- pretraining


@dataclass
class PretrainResult:
    model: MultimodalClassifier
    train_accuracy: float
    val_accuracy: float | None
    losses: list[float]
    modality: Modality = Modality.AV


def accuracy(model: MultimodalClassifier, dataset: MultimodalDataset,
             modality: Modality | str = Modality.AV, batch_size: int = 512) -> float:
    if len(dataset) == 0:
        return float("nan")
    correct = 0
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        probs = model.predict(dataset.audio[sl], dataset.video[sl], modality)
        correct += int((probs.argmax(axis=1) == dataset.labels[sl]).sum())
    return correct / len(dataset)


def pretrain(config: ModelConfig, train: MultimodalDataset, epochs: int = 10,
             lr: float = 0.1, seed: int = 0, val: MultimodalDataset | None = None,
             batch_size: int = 32, modality: Modality | str = Modality.AV) -> PretrainResult:
    """Cross-entropy training with plain minibatch SGD.

    ``modality`` selects which inputs the model sees during training: AV for
    the multimodal model, A or V for the unimodal reference models.
    """
    train.check_model(config)
    modality = Modality.parse(modality)
    model = MultimodalClassifier(config, seed=seed)
    params = list(model.params.values())
    rng = np.random.default_rng(seed)
    onehot = np.eye(config.num_classes)
    losses: list[float] = []
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        total, batches = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            probs = model.forward(train.audio[idx], train.video[idx], modality)
            loss = ad.negate(ad.mean(ad.tsum(ad.log(probs) * onehot[train.labels[idx]], axis=-1)))
            if not np.isfinite(loss.data):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {batches} (lr={lr}); lower the learning rate")
            ad.zero_grad(params)
            ad.backward(loss)
            for p in params:
                p.data = p.data - lr * p.grad
                if not np.isfinite(p.data).all():
                    raise DivergenceError(
                        f"parameter {p.name} became non-finite at epoch {epoch}, batch {batches} "
                        f"(lr={lr}); lower the learning rate")
            total += loss.item()
            batches += 1
        losses.append(total / max(batches, 1))
        log.debug("pretrain epoch %d loss %.4f", epoch, losses[-1])
    model = model.clone(trainable=False)
    return PretrainResult(
        model=model,
        train_accuracy=accuracy(model, train, modality),
        val_accuracy=accuracy(model, val, modality) if val is not None else None,
        losses=losses,
        modality=modality,
    )
