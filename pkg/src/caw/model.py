"""Dual-encoder zero-shot classifier and its checkpoint format.

The image pathway is a small tanh MLP. The text pathway is replaced by a
fixed matrix of unit-norm class prototypes; classification is by the highest
cosine similarity between an image embedding and a prototype, scaled by a
temperature.
"""

from __future__ import annotations

import copy
import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import binfmt
from .errors import ContractError, DimensionError, DomainError
from .tensor import NORM_EPS, Tensor, cosine_similarity, matmul, row_norm, tanh

CHECKPOINT_KIND = "caw-model"
CHECKPOINT_VERSION = 1

# counts events that are handled rather than raised (zero-norm rows etc.)
diagnostics: Counter = Counter()


@dataclass
class ModelConfig:
    input_dim: int = 64
    hidden_dims: tuple = (128, 128)
    embed_dim: int = 32
    temperature: float = 0.07
    seed: int = 0

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.input_dim < 1 or self.embed_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise DomainError("model dimensions must be positive")
        if not self.temperature > 0:
            raise DomainError("temperature must be positive")


class ImageEncoder:
    """tanh MLP mapping [B x input_dim] to [B x embed_dim].

    ``layers`` is a list of (weight, bias) pairs; the activation is applied
    between layers but not after the last one. An encoder with no layers is
    the identity map and has no parameters.
    """

    def __init__(self, layers, input_dim: int, embed_dim: int, trainable: bool = True):
        self.input_dim = int(input_dim)
        self.embed_dim = int(embed_dim)
        self.trainable = trainable
        self.layers = [(Tensor(w, requires_grad=trainable), Tensor(b, requires_grad=trainable))
                       for w, b in layers]
        if not self.layers and self.input_dim != self.embed_dim:
            raise DimensionError("an identity encoder needs input_dim == embed_dim")

    @classmethod
    def init(cls, input_dim: int, hidden_dims, embed_dim: int, rng: np.random.Generator):
        dims = [input_dim, *hidden_dims, embed_dim]
        layers = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, fan_out))
            layers.append((w, np.zeros(fan_out)))
        return cls(layers, input_dim, embed_dim)

    def parameters(self) -> list:
        return [t for pair in self.layers for t in pair]

    def parameter_names(self) -> list:
        return [f"{kind}{i}" for i in range(len(self.layers)) for kind in ("w", "b")]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def snapshot(self) -> "ImageEncoder":
        """Deep copy with gradient tracking switched off."""
        return ImageEncoder([(w.data.copy(), b.data.copy()) for w, b in self.layers],
                            self.input_dim, self.embed_dim, trainable=False)

    def __call__(self, x: Tensor, track: bool = True) -> Tensor:
        return encode(self, x, track=track)


def encode(encoder: ImageEncoder, x: Tensor, track: bool = True) -> Tensor:
    """Embed a batch. With ``track=False`` the parameters act as constants."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim != 2 or x.shape[1] != encoder.input_dim:
        raise DimensionError(f"encoder expects [B x {encoder.input_dim}], got {x.shape}")
    h = x
    last = len(encoder.layers) - 1
    for i, (w, b) in enumerate(encoder.layers):
        if not (track and encoder.trainable):
            w, b = w.detach(), b.detach()
        h = matmul(h, w) + b
        if i < last:
            h = tanh(h)
    return h


def zero_shot_logits(features: Tensor, prototypes, temperature: float) -> Tensor:
    """logits[i, j] = cos(features_i, prototypes_j) / temperature."""
    if not temperature > 0:
        raise DomainError("temperature must be positive")
    if not isinstance(prototypes, Tensor):
        prototypes = Tensor(prototypes)
    if features.ndim != 2 or prototypes.ndim != 2 or features.shape[1] != prototypes.shape[1]:
        raise DimensionError(f"features {features.shape} vs prototypes {prototypes.shape}")
    if features.shape[0]:
        zero_rows = int(np.sum(np.sqrt((features.data ** 2).sum(axis=1)) <= NORM_EPS))
        if zero_rows:
            diagnostics["zero_norm_feature_rows"] += zero_rows
    return cosine_similarity(features, prototypes) * (1.0 / temperature)


@dataclass
class ClassPrototypeSet:
    vectors: np.ndarray
    names: list = field(default_factory=list)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise DimensionError("prototype matrix must be 2-D")
        if not self.names:
            self.names = [f"class_{i}" for i in range(len(self.vectors))]
        if len(self.names) != len(self.vectors):
            raise DimensionError("one name per prototype required")
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise DomainError("prototype rows must have unit norm")
        if len(np.unique(self.vectors, axis=0)) != len(self.vectors):
            raise DomainError("prototype rows must be pairwise distinct")

    @property
    def num_classes(self) -> int:
        return self.vectors.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def random(cls, num_classes: int, embed_dim: int, rng: np.random.Generator, names=None):
        """Seeded unit vectors, orthonormal whenever num_classes <= embed_dim."""
        raw = rng.normal(size=(num_classes, embed_dim))
        if num_classes <= embed_dim:
            q, r = np.linalg.qr(raw.T)
            vecs = (q * np.sign(np.diag(r))).T
        else:
            vecs = raw
        vecs = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
        return cls(vecs, list(names) if names else [])


class DualEncoderModel:
    """Trainable encoder, optional frozen snapshot, fixed prototypes, temperature."""

    def __init__(self, tuned: ImageEncoder, class_embeddings, temperature: float = 0.07,
                 frozen: Optional[ImageEncoder] = None, seed: int = 0):
        if not temperature > 0:
            raise DomainError("temperature must be positive")
        if isinstance(class_embeddings, ClassPrototypeSet):
            class_embeddings = class_embeddings.vectors
        emb = np.array(class_embeddings, dtype=np.float64, copy=True)
        if emb.ndim != 2 or emb.shape[1] != tuned.embed_dim:
            raise DimensionError(f"class embeddings {emb.shape} vs embed_dim {tuned.embed_dim}")
        if emb.size and np.any(np.abs(np.linalg.norm(emb, axis=1) - 1.0) > 1e-9):
            raise DomainError("class embedding rows must have unit norm")
        emb.flags.writeable = False
        self.tuned = tuned
        self.frozen = frozen
        self.class_embeddings = emb
        self.temperature = float(temperature)
        self.seed = seed

    @classmethod
    def create(cls, config: ModelConfig, prototypes) -> "DualEncoderModel":
        rng = np.random.default_rng(config.seed)
        enc = ImageEncoder.init(config.input_dim, config.hidden_dims, config.embed_dim, rng)
        return cls(enc, prototypes, config.temperature, seed=config.seed)

    @property
    def num_classes(self) -> int:
        return self.class_embeddings.shape[0]

    @property
    def has_snapshot(self) -> bool:
        return self.frozen is not None

    def require_frozen(self) -> ImageEncoder:
        if self.frozen is None:
            raise ContractError("model has no frozen snapshot; call snapshot_frozen() first")
        return self.frozen

    def with_prototypes(self, prototypes) -> "DualEncoderModel":
        """Same encoders (shared, read-only use) against a different prototype set."""
        return DualEncoderModel(self.tuned, prototypes, self.temperature, self.frozen, self.seed)

    def logits(self, x, use_frozen: bool = False, track: bool = True) -> Tensor:
        enc = self.require_frozen() if use_frozen else self.tuned
        return zero_shot_logits(encode(enc, x, track=track), self.class_embeddings, self.temperature)

    def clone(self) -> "DualEncoderModel":
        return copy.deepcopy(self)


def snapshot_frozen(model: DualEncoderModel, force: bool = False) -> DualEncoderModel:
    """Copy the tuned encoder into the frozen slot (once, unless forced)."""
    if model.frozen is not None and not force:
        raise ContractError("frozen snapshot already taken; pass force=True to retake it")
    model.frozen = model.tuned.snapshot()
    return model


def predict(model: DualEncoderModel, x, use_frozen: bool = False) -> np.ndarray:
    """Arg-max class per row; np.argmax already breaks ties toward the lowest index."""
    logits = model.logits(x, use_frozen=use_frozen, track=False)
    if logits.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmax(logits.data, axis=1).astype(np.int64)


def parameter_hash(encoder: Optional[ImageEncoder]) -> str:
    h = hashlib.sha256()
    if encoder is not None:
        for p in encoder.parameters():
            h.update(str(p.shape).encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


def model_hash(model: DualEncoderModel) -> str:
    h = hashlib.sha256()
    h.update(parameter_hash(model.tuned).encode())
    h.update(parameter_hash(model.frozen).encode())
    h.update(np.ascontiguousarray(model.class_embeddings, dtype="<f8").tobytes())
    h.update(repr(model.temperature).encode())
    return h.hexdigest()


# -- checkpoint file ----------------------------------------------------------


def _layer_shapes(encoder: ImageEncoder) -> list:
    return [[list(w.shape), list(b.shape)] for w, b in encoder.layers]


def save_model(model: DualEncoderModel, path, extra: Optional[dict] = None) -> None:
    """Write header + float64 blob: tuned params, frozen params, class embeddings."""
    arrays = [p.data for p in model.tuned.parameters()]
    if model.frozen is not None:
        arrays += [p.data for p in model.frozen.parameters()]
    arrays.append(model.class_embeddings)
    header = {
        "input_dim": model.tuned.input_dim,
        "embed_dim": model.tuned.embed_dim,
        "layer_shapes": _layer_shapes(model.tuned),
        "has_frozen": model.frozen is not None,
        "num_classes": int(model.class_embeddings.shape[0]),
        "temperature": model.temperature,
        "seed": model.seed,
    }
    if extra:
        header["extra"] = extra
    binfmt.write(path, CHECKPOINT_KIND, CHECKPOINT_VERSION, header, float_arrays=arrays)


def load_model(path) -> tuple:
    """Return (model, extra-header-dict)."""
    header, floats, _ = binfmt.read(path, CHECKPOINT_KIND, CHECKPOINT_VERSION)
    try:
        shapes = header["layer_shapes"]
        n_layers = len(shapes)
        per_encoder = 2 * n_layers
        expected = per_encoder * (2 if header["has_frozen"] else 1) + 1
        if len(floats) != expected:
            raise binfmt.LengthMismatchError(
                f"checkpoint holds {len(floats)} arrays, header implies {expected}")
        for arr, shape in zip(floats, [s for pair in shapes for s in pair]):
            if list(arr.shape) != shape:
                raise binfmt.LengthMismatchError("array shape disagrees with layer_shapes")

        def pairs(offset):
            return [(floats[offset + 2 * i], floats[offset + 2 * i + 1]) for i in range(n_layers)]

        tuned = ImageEncoder(pairs(0), header["input_dim"], header["embed_dim"])
        frozen = None
        if header["has_frozen"]:
            frozen = ImageEncoder(pairs(per_encoder), header["input_dim"], header["embed_dim"],
                                  trainable=False)
        model = DualEncoderModel(tuned, floats[-1], header["temperature"], frozen,
                                 seed=header.get("seed", 0))
    except (KeyError, TypeError) as exc:
        raise binfmt.CorruptHeaderError(f"checkpoint header missing/invalid field: {exc}") from exc
    return model, header.get("extra", {})


def checkpoint_path(directory, name: str = "checkpoint.bin") -> Path:
    return Path(directory) / name
