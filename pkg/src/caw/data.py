"""Synthetic Gaussian-cluster tasks and their on-disk format.

A *world* is a seeded bank of cluster centres in ``[0, 1]^input_dim`` and a
matching bank of unit-norm class prototypes. A dataset picks some of the
world's clusters through ``linkage``; its class ``k`` is sampled around
centre ``linkage[k]`` and named by prototype ``linkage[k]``. Different
linkages give tasks with disjoint classes, which is how held-out
("zero-shot") evaluation sets are built.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import binfmt
from .errors import ConfigError
from .model import ClassPrototypeSet

DATASET_KIND = "caw-dataset"
DATASET_VERSION = 1


@dataclass
class SyntheticDatasetSpec:
    num_classes: int = 8
    input_dim: int = 64
    samples_per_class: int = 200
    center_scale: float = 0.15
    noise_sigma: float = 0.05
    value_range: tuple = (0.0, 1.0)
    seed: int = 0
    linkage: Optional[tuple] = None
    world_size: int = 32
    embed_dim: int = 32
    split: str = "train"

    def __post_init__(self):
        self.value_range = tuple(float(v) for v in self.value_range)
        if self.linkage is None:
            self.linkage = tuple(range(self.num_classes))
        self.linkage = tuple(int(i) for i in self.linkage)
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1", key="num_classes")
        if self.input_dim < 1 or self.embed_dim < 1:
            raise ConfigError("dimensions must be >= 1", key="input_dim")
        if self.samples_per_class < 0:
            raise ConfigError("samples_per_class must be >= 0", key="samples_per_class")
        if not self.noise_sigma >= 0:
            raise ConfigError("noise_sigma must be >= 0", key="noise_sigma")
        lo, hi = self.value_range
        if not lo < hi:
            raise ConfigError("value_range must be increasing", key="value_range")
        if not 0 <= self.center_scale <= (hi - lo) / 2:
            raise ConfigError("center_scale must lie in [0, half the value range]", key="center_scale")
        if len(self.linkage) != self.num_classes:
            raise ConfigError("linkage needs one world cluster per class", key="linkage")
        if len(set(self.linkage)) != len(self.linkage):
            raise ConfigError("linkage entries must be distinct", key="linkage")
        if min(self.linkage) < 0 or max(self.linkage) >= self.world_size:
            raise ConfigError("linkage index outside the world", key="linkage")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["value_range"] = list(self.value_range)
        d["linkage"] = list(self.linkage)
        return d


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    prototypes: ClassPrototypeSet
    name: str = "dataset"
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ConfigError(f"x {self.x.shape} and y {self.y.shape} disagree")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def num_classes(self) -> int:
        return self.prototypes.num_classes

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        same = lambda a, b: a.shape == b.shape and a.tobytes() == b.tobytes()  # noqa: E731
        return (same(self.x, other.x) and same(self.y, other.y)
                and same(self.prototypes.vectors, other.prototypes.vectors)
                and self.prototypes.names == other.prototypes.names
                and self.name == other.name and self.spec == other.spec)

    def subset(self, index) -> "Dataset":
        return Dataset(self.x[index], self.y[index], self.prototypes, self.name, self.spec)


def world(spec: SyntheticDatasetSpec):
    """(centres [world_size x input_dim], prototype bank [world_size x embed_dim])."""
    rng = np.random.default_rng([spec.seed, 0])
    mid = sum(spec.value_range) / 2
    centers = mid + spec.center_scale * rng.uniform(-1.0, 1.0, size=(spec.world_size, spec.input_dim))
    bank = ClassPrototypeSet.random(spec.world_size, spec.embed_dim, rng,
                                    names=[f"concept_{i}" for i in range(spec.world_size)])
    return centers, bank


def generate_synthetic(spec: SyntheticDatasetSpec, name: Optional[str] = None) -> Dataset:
    centers, bank = world(spec)
    link = np.array(spec.linkage)
    split_key = zlib.crc32(spec.split.encode("utf-8"))
    rng = np.random.default_rng([spec.seed, 1, split_key, *spec.linkage])
    y = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    x = centers[link][y]
    if spec.noise_sigma > 0:
        x = x + spec.noise_sigma * rng.normal(size=x.shape)
    x = np.clip(x, *spec.value_range)
    protos = ClassPrototypeSet(bank.vectors[link], [bank.names[i] for i in link])
    return Dataset(x, y, protos, name or spec.split, spec.to_dict())


def default_suite(seed: int = 0, center_scale: float = 0.15, samples_per_class: int = 200,
                  noise_sigma: float = 0.05, num_classes: int = 8, input_dim: int = 64, embed_dim: int = 32,
                  world_size: int = 32, num_transfer: int = 2) -> dict:
    """Pretraining, fine-tuning, test and held-out transfer sets from one world.

    The fine-tuning task uses world clusters ``0..C-1``; transfer set ``k``
    uses the next disjoint block of ``C`` clusters. Pretraining covers the
    whole world, mirroring a broadly pre-trained encoder.
    """
    if num_classes * (1 + num_transfer) > world_size:
        raise ConfigError("world too small for the requested transfer sets", key="world_size")
    common = dict(center_scale=center_scale, input_dim=input_dim, samples_per_class=samples_per_class,
                  noise_sigma=noise_sigma, seed=seed, world_size=world_size, embed_dim=embed_dim)
    out = {
        "pretrain": generate_synthetic(SyntheticDatasetSpec(
            num_classes=world_size, split="pretrain", **common), "pretrain"),
        "train": generate_synthetic(SyntheticDatasetSpec(num_classes=num_classes, split="train", **common)),
        "test": generate_synthetic(SyntheticDatasetSpec(num_classes=num_classes, split="test", **common)),
    }
    for k in range(num_transfer):
        link = tuple(range(num_classes * (k + 1), num_classes * (k + 2)))
        name = f"transfer_{chr(ord('a') + k)}"
        out[name] = generate_synthetic(SyntheticDatasetSpec(
            num_classes=num_classes, linkage=link, split=name, **common), name)
    return out


def write_dataset(path, ds: Dataset) -> None:
    meta = {"name": ds.name, "spec": ds.spec, "num_samples": len(ds),
            "input_dim": ds.x.shape[1], "class_names": ds.prototypes.names,
            "seed": ds.spec.get("seed")}
    binfmt.write(path, DATASET_KIND, DATASET_VERSION, meta,
                 float_arrays=[ds.x, ds.prototypes.vectors], int_arrays=[ds.y])


def read_dataset(path) -> Dataset:
    meta, floats, ints = binfmt.read(path, DATASET_KIND, DATASET_VERSION)
    if len(floats) != 2 or len(ints) != 1:
        raise binfmt.LengthMismatchError("dataset file must hold x, prototypes and labels")
    x, protos = floats
    (y,) = ints
    try:
        if x.shape != (meta["num_samples"], meta["input_dim"]):
            raise binfmt.LengthMismatchError("sample array disagrees with the header")
        return Dataset(x, y, ClassPrototypeSet(protos, list(meta["class_names"])),
                       meta["name"], meta["spec"])
    except (KeyError, TypeError) as exc:
        raise binfmt.CorruptHeaderError(f"dataset header missing/invalid field: {exc}") from exc
