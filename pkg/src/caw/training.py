"""Adversarial fine-tuning loop: inner PGD on cross-entropy, outer SGD-momentum on the total loss."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import binfmt
from .attacks import AttackConfig, pgd_attack
from .errors import ConfigError, ContractError, NumericError
from .losses import CawConfig, cross_entropy_loss, total_loss
from .model import DualEncoderModel, parameter_hash, save_model, snapshot_frozen
from .tensor import backward

log = logging.getLogger(__name__)

OPTIMIZER_KIND = "caw-optimizer"
OPTIMIZER_VERSION = 1


def digest(obj) -> str:
    """Short SHA-256 of the canonical JSON form of ``obj``."""
    return hashlib.sha256(binfmt.canonical_json(obj).encode("utf-8")).hexdigest()[:16]


@dataclass
class TrainConfig:
    alpha: float = 6.0
    beta: float = 3.0
    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 128
    epochs: int = 10
    seed: int = 0
    inner_attack: AttackConfig = field(default_factory=lambda: AttackConfig(epsilon=0.0125, steps=2))
    detach_weight: bool = True
    kl_direction: str = "adv_first"
    ce_on_adv: bool = True
    pretrain_epochs: int = 20
    pretrain_learning_rate: float = 0.05
    checkpoint_every: int = 1

    def __post_init__(self):
        if isinstance(self.inner_attack, dict):
            self.inner_attack = AttackConfig(**self.inner_attack)
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0", key="learning_rate")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)", key="momentum")
        if not self.weight_decay >= 0:
            raise ConfigError("weight_decay must be >= 0", key="weight_decay")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", key="batch_size")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("epoch counts must be >= 0", key="epochs")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1", key="checkpoint_every")
        self.caw  # validates alpha/beta/kl_direction

    @property
    def caw(self) -> CawConfig:
        return CawConfig(self.alpha, self.beta, self.detach_weight, self.kl_direction, self.ce_on_adv)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return digest(self.to_dict())

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def clean_baseline(cfg: TrainConfig) -> TrainConfig:
    """Same run with alpha = beta = 0 and a zero attack budget: plain clean CE fine-tuning."""
    return cfg.replace(alpha=0.0, beta=0.0,
                       inner_attack=dataclasses.replace(cfg.inner_attack, epsilon=0.0, step_size=0.0))


@dataclass
class OptimizerState:
    velocity: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params], 0)


def sgd_momentum_update(params, grads, state: OptimizerState, lr: float, momentum: float,
                        weight_decay: float = 0.0) -> None:
    """v <- momentum * v + g (+ wd * theta); theta <- theta - lr * v."""
    if len(params) != len(state.velocity):
        raise ContractError("optimizer state does not match the parameter list")
    for i, (p, g) in enumerate(zip(params, grads)):
        if weight_decay:
            g = g + weight_decay * p.data
        v = momentum * state.velocity[i] + g
        if v.shape != p.data.shape:
            raise ContractError("velocity shape changed")
        state.velocity[i] = v
        p.data = p.data - lr * v
    state.step += 1


def _collect_grads(params) -> list:
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
    for p in params:
        p.grad = None
    return grads


@dataclass
class TrainLogRecord:
    epoch: int
    step: int
    losses: dict
    attack_success_rate: float
    duration: float = 0.0

    def to_json(self, meta: Optional[dict] = None) -> str:
        """Deterministic JSON line; wall-clock duration is left out."""
        body = {**(meta or {}), "epoch": self.epoch, "step": self.step, **self.losses,
                "attack_success_rate": self.attack_success_rate}
        return binfmt.canonical_json(body)


def train_step(model: DualEncoderModel, state: OptimizerState, x, y, cfg: TrainConfig,
               epoch: int = 0):
    """One inner-max / outer-min step. Returns (LossBreakdown, TrainLogRecord)."""
    t0 = time.perf_counter()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] == 0:
        raise ContractError("empty batch")
    adv = pgd_attack(model, x, y, cfg.inner_attack)
    params = model.tuned.parameters()
    for p in params:
        p.grad = None
    losses = total_loss(model, x, adv.x_adv, y, cfg.caw)
    backward(losses.total)
    grads = _collect_grads(params)
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NumericError(f"non-finite gradient at step {state.step}: losses={losses.to_dict()}")
    sgd_momentum_update(params, grads, state, cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    record = TrainLogRecord(epoch, state.step, losses.to_dict(), adv.success_rate,
                            time.perf_counter() - t0)
    return losses, record


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int):
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def pretrain(model: DualEncoderModel, x, y, epochs: int, learning_rate: float,
             momentum: float = 0.9, batch_size: int = 128, seed: int = 0) -> list:
    """Clean cross-entropy training of the tuned encoder; returns per-epoch mean loss."""
    if model.has_snapshot:
        raise ContractError("pre-training must happen before the frozen snapshot")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    params = model.tuned.parameters()
    state = OptimizerState.zeros_like(params)
    history = []
    for epoch in range(epochs):
        total = 0.0
        batches = epoch_batches(len(x), batch_size, seed + 7919, epoch)
        for idx in batches:
            loss = cross_entropy_loss(model.logits(x[idx]), y[idx])
            backward(loss)
            sgd_momentum_update(params, _collect_grads(params), state, learning_rate, momentum)
            total += loss.item()
        history.append(total / max(len(batches), 1))
    return history


@dataclass
class FitResult:
    model: DualEncoderModel
    logs: list
    optimizer: OptimizerState


def _fixed_hash(model: DualEncoderModel) -> str:
    h = hashlib.sha256(parameter_hash(model.frozen).encode())
    h.update(np.ascontiguousarray(model.class_embeddings).tobytes())
    h.update(repr(model.temperature).encode())
    return h.hexdigest()


def fit(model: DualEncoderModel, x, y, cfg: TrainConfig, optimizer: Optional[OptimizerState] = None,
        log_path=None, checkpoint_dir=None, extra_meta: Optional[dict] = None) -> FitResult:
    """Run ``cfg.epochs`` epochs of adversarial fine-tuning on (x, y).

    Per-step records are appended to ``log_path`` as JSON lines (and their
    wall-clock durations to ``<log_path>.timing``). The model and optimizer
    are checkpointed into ``checkpoint_dir`` every ``cfg.checkpoint_every``
    epochs and once more at the end.
    """
    model.require_frozen()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    state = optimizer or OptimizerState.zeros_like(model.tuned.parameters())
    fixed_before = _fixed_hash(model)
    logs = []
    log_fh = timing_fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(log_path, "w", encoding="utf-8")
        timing_fh = open(str(log_path) + ".timing", "w", encoding="utf-8")
    meta = {"config_digest": cfg.digest(), "seed": cfg.seed, **(extra_meta or {})}
    try:
        for epoch in range(cfg.epochs):
            for idx in epoch_batches(len(x), cfg.batch_size, cfg.seed, epoch):
                _, record = train_step(model, state, x[idx], y[idx], cfg, epoch)
                logs.append(record)
                if log_fh:
                    log_fh.write(record.to_json(meta) + "\n")
                    timing_fh.write(json.dumps({"step": record.step, "duration": record.duration}) + "\n")
            if logs:
                log.debug("epoch %d: %s", epoch, logs[-1].losses)
            if checkpoint_dir is not None and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint_dir, model, state, {**meta, "epoch": epoch + 1})
    finally:
        if log_fh:
            log_fh.close()
            timing_fh.close()
    if _fixed_hash(model) != fixed_before:
        raise ContractError("frozen encoder, prototypes or temperature changed during fit")
    if checkpoint_dir is not None:
        save_checkpoint(checkpoint_dir, model, state, {**meta, "epoch": cfg.epochs})
    return FitResult(model, logs, state)


def prepare_model(model: DualEncoderModel, x_pre, y_pre, cfg: TrainConfig, prototypes=None) -> DualEncoderModel:
    """Optional clean pre-training phase followed by the frozen snapshot.

    ``prototypes`` names the classes of the pre-training data when they differ
    from the model's own class embeddings; the encoder is shared either way.
    """
    if cfg.pretrain_epochs:
        target = model if prototypes is None else model.with_prototypes(prototypes)
        hist = pretrain(target, x_pre, y_pre, cfg.pretrain_epochs, cfg.pretrain_learning_rate,
                        cfg.momentum, cfg.batch_size, cfg.seed)
        log.info("pre-training loss %.4f -> %.4f", hist[0], hist[-1])
    return snapshot_frozen(model)


# -- optimizer / checkpoint files ---------------------------------------------


def save_optimizer(state: OptimizerState, path) -> None:
    binfmt.write(path, OPTIMIZER_KIND, OPTIMIZER_VERSION, {"step": state.step},
                 float_arrays=state.velocity)


def load_optimizer(path) -> OptimizerState:
    meta, floats, _ = binfmt.read(path, OPTIMIZER_KIND, OPTIMIZER_VERSION)
    try:
        return OptimizerState(list(floats), int(meta["step"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise binfmt.CorruptHeaderError(f"optimizer header missing/invalid field: {exc}") from exc


def save_checkpoint(directory, model: DualEncoderModel, state: OptimizerState, meta: dict) -> None:
    directory = Path(directory)
    save_model(model, directory / "checkpoint.bin", extra=meta)
    save_optimizer(state, directory / "optimizer.bin")
