"""Run configuration shared by every CLI subcommand.

A config file is a JSON object with the sections below; every key is
optional and falls back to the documented default. Unknown keys are rejected
and type errors name the offending key as ``section.key``.

    {
      "version": 1,
      "seed": 0,
      "out_dir": "runs/caw",
      "model":     {"input_dim": 64, "hidden_dims": [128, 128], "embed_dim": 32, "temperature": 0.07},
      "data":      {"path": null, "num_classes": 8, "samples_per_class": 200, "center_scale": 0.15,
                    "noise_sigma": 0.05, "world_size": 32, "num_transfer": 2},
      "train":     {"alpha": 6.0, "beta": 3.0, "learning_rate": 1e-4, "momentum": 0.9, "batch_size": 128,
                    "epochs": 10, "inner_attack": {"kind": "pgd", "epsilon": 0.0125, "steps": 2}, ...},
      "eval":      {"attacks": [<PGD-20 at 0.05, 0.025, 0.0125>], "sets": ["test", "transfer_a", "transfer_b"],
                    "batch_size": null, "checkpoint": null},
      "attack":    {"kind": "pgd", "epsilon": 0.0125, "steps": 20, "step_size": null, "random_start": false,
                    "set": "test", "checkpoint": null},
      "ablate":    {"include_baseline": true},
      "gradcheck": {"states": 100, "h": 1e-5, "tolerance": 1e-4, "identity": false}
    }

``seed`` drives the world, the model initialisation, batch order and every
attack. ``out_dir`` is the only field left out of the config digest, so the
same run written to two directories carries the same digest.
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .attacks import AttackConfig
from .data import SyntheticDatasetSpec
from .errors import CawError, ConfigError
from .evaluation import eval_ladder
from .training import TrainConfig, digest

CONFIG_VERSION = 1


@dataclass
class ModelSection:
    input_dim: int = 64
    hidden_dims: list = field(default_factory=lambda: [128, 128])
    embed_dim: int = 32
    temperature: float = 0.07


@dataclass
class DataSection:
    path: Optional[str] = None  # dataset file used as the fine-tuning set instead of the generated one
    num_classes: int = 8
    samples_per_class: int = 200
    center_scale: float = 0.15
    noise_sigma: float = 0.05
    world_size: int = 32
    num_transfer: int = 2


@dataclass
class AttackSection:
    kind: str = "pgd"
    epsilon: float = 0.0125
    steps: int = 20
    step_size: Optional[float] = None
    random_start: bool = False
    set: str = "test"
    checkpoint: Optional[str] = None

    def attack_config(self, seed: int) -> AttackConfig:
        return AttackConfig(epsilon=self.epsilon, steps=self.steps, step_size=self.step_size, kind=self.kind,
                            random_start=self.random_start, seed=seed)


def _attack_defaults() -> dict:
    d = AttackConfig().to_dict()
    d.pop("seed")
    d["step_size"] = None
    return d


def _default_eval_attacks() -> list:
    return [{**_attack_defaults(), **{k: v for k, v in a.to_dict().items() if k != "seed"}}
            for a in eval_ladder((0.05, 0.025, 0.0125), steps=20)]


@dataclass
class EvalSection:
    attacks: list = field(default_factory=_default_eval_attacks)
    sets: list = field(default_factory=lambda: ["test", "transfer_a", "transfer_b"])
    batch_size: Optional[int] = None
    checkpoint: Optional[str] = None


@dataclass
class AblateSection:
    include_baseline: bool = True


@dataclass
class GradcheckSection:
    states: int = 100
    h: float = 1e-5
    tolerance: float = 1e-4
    identity: bool = False


def _train_defaults() -> dict:
    d = TrainConfig().to_dict()
    d.pop("seed")
    d["inner_attack"].pop("seed")
    return d


_TRAIN_KEYS = tuple(_train_defaults())


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    out_dir: str = "runs/caw"
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    train: dict = field(default_factory=_train_defaults)
    eval: EvalSection = field(default_factory=EvalSection)
    attack: AttackSection = field(default_factory=AttackSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        return digest(d)

    def train_config(self) -> TrainConfig:
        try:
            inner = AttackConfig(**{**self.train["inner_attack"], "seed": self.seed})
            return TrainConfig(seed=self.seed, **{**self.train, "inner_attack": inner})
        except ConfigError as exc:
            raise ConfigError(str(exc), key=f"train.{exc.key}" if exc.key else "train") from exc

    def eval_attacks(self) -> list:
        out = []
        for i, a in enumerate(self.eval.attacks):
            try:
                out.append(AttackConfig(**{**a, "seed": self.seed}))
            except ConfigError as exc:
                raise ConfigError(str(exc), key=f"eval.attacks[{i}].{exc.key}") from exc
        return out

    def model_config(self):
        from .model import ModelConfig
        try:
            return ModelConfig(input_dim=self.model.input_dim, hidden_dims=tuple(self.model.hidden_dims),
                               embed_dim=self.model.embed_dim, temperature=self.model.temperature, seed=self.seed)
        except CawError as exc:
            raise ConfigError(str(exc), key="model") from exc


# -- loading ------------------------------------------------------------------


def _type_ok(value, default) -> bool:
    if default is None:
        return True  # optional fields; checked by the consumer
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, (list, tuple)):
        return isinstance(value, list)
    return isinstance(value, type(default))


def _check_keys(path: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object", key=path or None)
    for k in given:
        if k not in allowed:
            name = f"{path}.{k}" if path else k
            raise ConfigError(f"unknown config key '{name}'", key=name)


def _merge(path: str, defaults: dict, given: dict) -> dict:
    _check_keys(path, given, defaults)
    out = dict(defaults)
    for k, v in given.items():
        if not _type_ok(v, defaults[k]):
            raise ConfigError(f"config key '{path}.{k}' has the wrong type ({type(v).__name__})", key=f"{path}.{k}")
        out[k] = float(v) if isinstance(defaults[k], float) else v
    return out


def _section(cls, path: str, given) -> object:
    merged = _merge(path, dataclasses.asdict(cls()), given or {})
    return cls(**merged)


def _attack_dict(path: str, given: dict) -> dict:
    merged = _merge(path, _attack_defaults(), given)
    try:
        AttackConfig(**merged)
    except ConfigError as exc:
        raise ConfigError(str(exc), key=f"{path}.{exc.key}" if exc.key else path) from exc
    if merged["step_size"] is not None:
        merged["step_size"] = float(merged["step_size"])
    return merged


def from_dict(raw: dict) -> RunConfig:
    top = RunConfig()
    _check_keys("", raw, top.to_dict())
    version = raw.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r}", key="version")
    for k in ("seed",):
        if k in raw and not _type_ok(raw[k], 0):
            raise ConfigError(f"config key '{k}' must be an integer", key=k)
    if "out_dir" in raw and not isinstance(raw["out_dir"], str):
        raise ConfigError("config key 'out_dir' must be a string", key="out_dir")

    train_raw = dict(raw.get("train") or {})
    _check_keys("train", train_raw, _TRAIN_KEYS)
    inner = train_raw.pop("inner_attack", {})
    train = _merge("train", {k: v for k, v in top.train.items() if k != "inner_attack"}, train_raw)
    default_inner = {k: v for k, v in top.train["inner_attack"].items() if k != "seed"}
    if not isinstance(inner, dict):
        raise ConfigError("train.inner_attack must be a JSON object", key="train.inner_attack")
    train["inner_attack"] = _attack_dict("train.inner_attack", {**default_inner, **inner})

    eval_raw = raw.get("eval") or {}
    ev = _section(EvalSection, "eval", eval_raw)
    ev.attacks = [_attack_dict(f"eval.attacks[{i}]", a) for i, a in enumerate(ev.attacks)]

    cfg = RunConfig(version=version, seed=raw.get("seed", 0), out_dir=raw.get("out_dir", top.out_dir),
                    model=_section(ModelSection, "model", raw.get("model")),
                    data=_section(DataSection, "data", raw.get("data")),
                    train=train, eval=ev,
                    attack=_section(AttackSection, "attack", raw.get("attack")),
                    ablate=_section(AblateSection, "ablate", raw.get("ablate")),
                    gradcheck=_section(GradcheckSection, "gradcheck", raw.get("gradcheck")))
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> RunConfig:
    """Build every derived object once so bad values fail before any work starts."""
    cfg.model_config()
    cfg.train_config()
    cfg.eval_attacks()
    try:
        cfg.attack.attack_config(cfg.seed)
    except ConfigError as exc:
        raise ConfigError(str(exc), key=f"attack.{exc.key}") from exc
    d = cfg.data
    try:
        SyntheticDatasetSpec(num_classes=d.num_classes, input_dim=cfg.model.input_dim,
                             samples_per_class=d.samples_per_class, center_scale=d.center_scale,
                             noise_sigma=d.noise_sigma, world_size=d.world_size, embed_dim=cfg.model.embed_dim)
    except ConfigError as exc:
        raise ConfigError(str(exc), key=f"data.{exc.key}" if exc.key else "data") from exc
    if d.num_classes * (1 + d.num_transfer) > d.world_size:
        raise ConfigError("data.world_size too small for the transfer sets", key="data.world_size")
    if cfg.gradcheck.states < 1:
        raise ConfigError("gradcheck.states must be >= 1", key="gradcheck.states")
    if cfg.eval.batch_size is not None and (not isinstance(cfg.eval.batch_size, int) or cfg.eval.batch_size < 1):
        raise ConfigError("eval.batch_size must be a positive integer or null", key="eval.batch_size")
    return cfg


def load(path) -> RunConfig:
    """Read and validate a config file. ``None`` gives the all-defaults config."""
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}", key="--config") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc.msg} at line {exc.lineno} column {exc.colno}",
                          key=_key_near(text, exc.pos)) from exc
    return from_dict(raw)


def _key_near(text: str, pos: int) -> Optional[str]:
    """Last quoted key before a JSON syntax error, as a hint for the user."""
    keys = re.findall(r'"([^"\\]+)"\s*:', text[:pos])
    return keys[-1] if keys else None


def with_overrides(cfg: RunConfig, **changes) -> RunConfig:
    """Apply CLI-style overrides (``train.alpha=...`` as keyword ``train__alpha``) and re-validate."""
    raw = cfg.to_dict()
    for name, value in changes.items():
        if value is None:
            continue
        node = raw
        *parents, leaf = name.split("__")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return from_dict(raw)
