"""Two-branch multimodal classifier with learnable normalization layers.

Each modality has an MLP encoder (affine -> normalization -> relu, repeated);
the encodings are fused, normalized once more and mapped to class
probabilities. A missing modality is represented by zero-filling its raw
features before encoding.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError

NORM_EPS = 1e-5
CHECKPOINT_FORMAT = "midl-checkpoint"
CHECKPOINT_VERSION = 1


class Modality(str, enum.Enum):
    A = "A"
    V = "V"
    AV = "AV"

    @property
    def has_audio(self) -> bool:
        return self is not Modality.V

    @property
    def has_video(self) -> bool:
        return self is not Modality.A

    @classmethod
    def parse(cls, value) -> Modality:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ConfigurationError(f"unknown modality {value!r}; expected A, V or AV") from None


class ParameterSelection(str, enum.Enum):
    NORM_LAYERS_ONLY = "norm"
    ALL_PARAMETERS = "all"


@dataclass(frozen=True)
class ModelConfig:
    audio_dim: int = 16
    video_dim: int = 16
    hidden_dim: int = 32
    num_classes: int = 8
    encoder_layers: int = 2
    fusion: str = "concat"

    def __post_init__(self):
        for name in ("audio_dim", "video_dim", "hidden_dim", "encoder_layers"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ConfigurationError(f"model.num_classes must be >= 2, got {self.num_classes}")
        if self.fusion not in ("concat", "gated"):
            raise ConfigurationError(f"model.fusion must be 'concat' or 'gated', got {self.fusion!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _norm_names(prefix: str) -> tuple[str, str]:
    return f"{prefix}.norm.scale", f"{prefix}.norm.shift"


def parameter_layout(config: ModelConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """Ordered (name, shape, fan_in) for every parameter; fan_in 0 marks norm tensors."""
    layout: list[tuple[str, tuple[int, ...], int]] = []
    h = config.hidden_dim

    def affine(prefix, n_in, n_out):
        layout.append((f"{prefix}.weight", (n_in, n_out), n_in))
        layout.append((f"{prefix}.bias", (n_out,), n_in))

    def norm(prefix, n):
        scale, shift = _norm_names(prefix)
        layout.append((scale, (n,), 0))
        layout.append((shift, (n,), 0))

    for branch, dim in (("audio", config.audio_dim), ("video", config.video_dim)):
        for i in range(config.encoder_layers):
            affine(f"{branch}.{i}", dim if i == 0 else h, h)
            norm(f"{branch}.{i}", h)
    if config.fusion == "concat":
        affine("fusion", 2 * h, h)
    else:
        affine("fusion.gate", 2 * h, h)
    norm("fusion", h)
    affine("head", h, config.num_classes)
    return layout


class MultimodalClassifier:
    """Maps (audio, video, modality) to a probability vector over K classes."""

    def __init__(self, config: ModelConfig, seed: int = 0, trainable: bool = True):
        self.config = config
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        for name, shape, fan_in in parameter_layout(config):
            if fan_in == 0:
                values = np.ones(shape) if name.endswith("scale") else np.zeros(shape)
            else:
                bound = 1.0 / np.sqrt(fan_in)
                values = rng.uniform(-bound, bound, size=shape)
            self.params[name] = Tensor(values, requires_grad=trainable, name=name)

    # -- construction helpers ------------------------------------------------

    @classmethod
    def from_state(cls, config: ModelConfig, state: dict[str, np.ndarray],
                   trainable: bool = True) -> MultimodalClassifier:
        model = cls.__new__(cls)
        model.config = config
        model.params = {}
        for name, shape, _ in parameter_layout(config):
            if name not in state:
                raise ConfigurationError(f"parameter {name!r} missing from state")
            values = np.array(state[name], dtype=np.float64)
            if values.shape != shape:
                raise ConfigurationError(
                    f"parameter {name!r} has shape {values.shape}, config expects {shape}")
            model.params[name] = Tensor(values, requires_grad=trainable, name=name)
        return model

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def clone(self, trainable: bool = False) -> MultimodalClassifier:
        return MultimodalClassifier.from_state(self.config, self.state(), trainable=trainable)

    # -- parameter enumeration -----------------------------------------------

    def norm_parameter_names(self) -> list[str]:
        return [n for n in self.params if ".norm." in n]

    def num_norm_layers(self) -> int:
        return len(self.norm_parameter_names()) // 2

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def select_parameters(self, selection: ParameterSelection | str) -> dict[str, Tensor]:
        selection = ParameterSelection(selection)
        if selection is ParameterSelection.ALL_PARAMETERS:
            return dict(self.params)
        return {n: self.params[n] for n in self.norm_parameter_names()}

    def set_trainable(self, names: Iterable[str]) -> None:
        """Only the named parameters take part in differentiation."""
        names = set(names)
        for name, p in self.params.items():
            p.requires_grad = name in names
            p.grad = np.zeros_like(p.data) if p.requires_grad else None

    # -- forward -------------------------------------------------------------

    def _check_inputs(self, audio: np.ndarray, video: np.ndarray) -> None:
        cfg = self.config
        if audio.ndim != 2 or audio.shape[1] != cfg.audio_dim:
            raise ConfigurationError(
                f"audio features have shape {audio.shape}, model expects (batch, {cfg.audio_dim})")
        if video.ndim != 2 or video.shape[1] != cfg.video_dim:
            raise ConfigurationError(
                f"video features have shape {video.shape}, model expects (batch, {cfg.video_dim})")
        if audio.shape[0] != video.shape[0]:
            raise ConfigurationError(
                f"batch sizes differ: audio {audio.shape[0]} vs video {video.shape[0]}")

    def _norm(self, prefix: str, x: Tensor) -> Tensor:
        scale, shift = _norm_names(prefix)
        return ad.standardize(x, NORM_EPS) * self.params[scale] + self.params[shift]

    def _encode(self, branch: str, x: Tensor) -> Tensor:
        p = self.params
        for i in range(self.config.encoder_layers):
            x = ad.matmul(x, p[f"{branch}.{i}.weight"]) + p[f"{branch}.{i}.bias"]
            x = ad.relu(self._norm(f"{branch}.{i}", x))
        return x

    def logits(self, audio, video, modalities: Modality | Sequence[Modality]) -> Tensor:
        audio = np.atleast_2d(np.asarray(audio, dtype=np.float64))
        video = np.atleast_2d(np.asarray(video, dtype=np.float64))
        self._check_inputs(audio, video)
        n = audio.shape[0]
        if isinstance(modalities, (Modality, str)):
            modalities = [Modality.parse(modalities)] * n
        else:
            modalities = [Modality.parse(m) for m in modalities]
        if len(modalities) != n:
            raise ConfigurationError(f"{len(modalities)} modalities for a batch of {n}")
        keep_a = np.array([[m.has_audio] for m in modalities])
        keep_v = np.array([[m.has_video] for m in modalities])
        # zero-fill the absent modality on the raw features
        audio = np.where(keep_a, audio, 0.0)
        video = np.where(keep_v, video, 0.0)

        p = self.params
        ha = self._encode("audio", Tensor(audio))
        hv = self._encode("video", Tensor(video))
        joint = ad.concat([ha, hv], axis=-1)
        if self.config.fusion == "concat":
            fused = ad.matmul(joint, p["fusion.weight"]) + p["fusion.bias"]
        else:
            gate = ad.sigmoid(ad.matmul(joint, p["fusion.gate.weight"]) + p["fusion.gate.bias"])
            fused = gate * ha + (1.0 - gate) * hv
        fused = ad.relu(self._norm("fusion", fused))
        return ad.matmul(fused, p["head.weight"]) + p["head.bias"]

    def forward(self, audio, video, modalities) -> Tensor:
        """Class probabilities, shape (batch, K)."""
        return ad.softmax(self.logits(audio, video, modalities), axis=-1)

    def predict(self, audio, video, modalities) -> np.ndarray:
        with ad.no_grad():
            return self.forward(audio, video, modalities).data


def forward(model: MultimodalClassifier, sample, modality: Modality | str) -> np.ndarray:
    """Probabilities for a single sample under the given available modality."""
    return model.predict(sample.audio, sample.video, Modality.parse(modality))[0]


def clone_parameters(model: MultimodalClassifier) -> dict[str, np.ndarray]:
    """Deep copy of every parameter array."""
    return model.state()


def select_parameters(model: MultimodalClassifier,
                      selection: ParameterSelection | str) -> dict[str, Tensor]:
    return model.select_parameters(selection)


# ---------------------------------------------------------------- checkpoint


def save_checkpoint(model: MultimodalClassifier, path: str | Path,
                    metadata: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "parameters": {
            name: {"shape": list(p.data.shape), "values": p.data.reshape(-1).tolist()}
            for name, p in model.params.items()
        },
        "metadata": metadata or {},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path, trainable: bool = True
                    ) -> tuple[MultimodalClassifier, dict]:
    """Returns the model and the metadata stored alongside it."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {doc.get('version')}")
    config = ModelConfig(**doc["config"])
    state = {
        name: np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["parameters"].items()
    }
    return MultimodalClassifier.from_state(config, state, trainable=trainable), doc.get("metadata", {})
