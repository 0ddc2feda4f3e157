"""White-box l-infinity attacks against the tuned encoder: FGSM, PGD, CW-margin PGD."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DomainError
from .model import DualEncoderModel, diagnostics, predict
from .tensor import Tensor, backward, gather_rows, log_softmax_rows, max_rows

MARGIN_MASK = 1e6


@dataclass
class AttackConfig:
    """Budget and schedule of an l-inf attack.

    ``step_size=None`` means "equal to epsilon". ``epsilon=0`` is accepted
    and turns the attack into the identity map.
    """

    epsilon: float = 0.0125
    steps: int = 2
    step_size: float | None = None
    kind: str = "pgd"
    norm: str = "linf"
    random_start: bool = False
    clamp_min: float = 0.0
    clamp_max: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.step_size is None:
            self.step_size = self.epsilon
        if self.norm != "linf":
            raise ConfigError(f"unsupported norm {self.norm!r}", key="norm")
        if self.kind not in ("pgd", "fgsm", "cw"):
            raise ConfigError(f"unknown attack kind {self.kind!r}", key="kind")
        if not self.epsilon >= 0:
            raise ConfigError("epsilon must be >= 0", key="epsilon")
        if not self.step_size >= 0 or (self.epsilon > 0 and self.step_size == 0):
            raise ConfigError("step_size must be > 0", key="step_size")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigError("steps must be an integer >= 1", key="steps")
        if not self.clamp_min < self.clamp_max:
            raise ConfigError("clamp_min must be < clamp_max", key="clamp_min")
        self.steps = int(self.steps)

    @property
    def name(self) -> str:
        return f"{self.kind}-{self.steps}@{self.epsilon:g}"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttackResult:
    x_adv: np.ndarray
    loss_trace: list = field(default_factory=list)
    success_mask: np.ndarray = None

    @property
    def success_rate(self) -> float:
        return float(self.success_mask.mean()) if self.success_mask.size else 0.0


def project_linf(x_adv, x, epsilon: float, clamp_min: float = 0.0, clamp_max: float = 1.0) -> np.ndarray:
    """Clip x_adv into the l-inf ball around x, then into [clamp_min, clamp_max].

    Written as min/max against the ball edges so a second application is a
    bit-exact no-op.
    """
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_adv.shape != x.shape:
        raise DomainError(f"shape mismatch {x_adv.shape} vs {x.shape}")
    out = np.minimum(np.maximum(x_adv, x - epsilon), x + epsilon)
    return np.clip(out, clamp_min, clamp_max)


def ce_objective(model: DualEncoderModel, x: Tensor, y: np.ndarray) -> Tensor:
    """Mean cross-entropy of the tuned encoder; parameters treated as constants."""
    logp = log_softmax_rows(model.logits(x, track=False))
    return -gather_rows(logp, y).mean()


def margin_objective(model: DualEncoderModel, x: Tensor, y: np.ndarray) -> Tensor:
    """Mean of max_{j != y} logit_j - logit_y (kappa = 0)."""
    logits = model.logits(x, track=False)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(y)), y] = 1.0
    best_other = max_rows(logits - onehot * MARGIN_MASK)
    return (best_other - gather_rows(logits, y)).mean()


OBJECTIVES = {"pgd": ce_objective, "fgsm": ce_objective, "cw": margin_objective}


def input_gradient(objective, model, x_adv: np.ndarray, y: np.ndarray):
    xt = Tensor(x_adv, requires_grad=True)
    loss = objective(model, xt, y)
    backward(loss)
    return loss.item(), xt.grad


def _check_labels(model, x, y):
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise DomainError(f"batch {x.shape} and labels {y.shape} disagree")
    if y.size and (y.min() < 0 or y.max() >= model.num_classes):
        raise DomainError("label out of range")
    return y


def run_attack(model: DualEncoderModel, x, y, cfg: AttackConfig, objective=None) -> AttackResult:
    """Iterate x <- proj(x + step_size * sign(grad objective)) for cfg.steps steps.

    ``loss_trace`` holds the objective at every iterate, including the final
    one, so it has ``steps + 1`` entries.
    """
    x = np.asarray(x, dtype=np.float64)
    y = _check_labels(model, x, y)
    objective = objective or OBJECTIVES[cfg.kind]
    if x.shape[0] == 0:
        return AttackResult(x.copy(), [], np.zeros(0, dtype=bool))

    x_adv = x.copy()
    if cfg.random_start and cfg.epsilon > 0:
        rng = np.random.default_rng(cfg.seed)
        x_adv = project_linf(x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape), x,
                             cfg.epsilon, cfg.clamp_min, cfg.clamp_max)
    trace = []
    for _ in range(cfg.steps):
        value, grad = input_gradient(objective, model, x_adv, y)
        trace.append(value)
        if not np.any(grad):
            diagnostics["zero_input_gradient"] += 1
        x_adv = project_linf(x_adv + cfg.step_size * np.sign(grad), x,
                             cfg.epsilon, cfg.clamp_min, cfg.clamp_max)
    trace.append(objective(model, Tensor(x_adv), y).item())
    success = predict(model, x_adv) != y
    return AttackResult(x_adv, trace, success)


def pgd_attack(model: DualEncoderModel, x, y, cfg: AttackConfig) -> AttackResult:
    """PGD on the cross-entropy objective (``cfg.kind`` is ignored)."""
    return run_attack(model, x, y, cfg, objective=ce_objective)


def fgsm_attack(model: DualEncoderModel, x, y, epsilon: float,
                clamp_min: float = 0.0, clamp_max: float = 1.0) -> AttackResult:
    cfg = AttackConfig(epsilon=epsilon, steps=1, step_size=epsilon, kind="fgsm",
                       random_start=False, clamp_min=clamp_min, clamp_max=clamp_max)
    return pgd_attack(model, x, y, cfg)


def cw_pgd_attack(model: DualEncoderModel, x, y, cfg: AttackConfig) -> AttackResult:
    return run_attack(model, x, y, cfg, objective=margin_objective)


def attack(model: DualEncoderModel, x, y, cfg: AttackConfig) -> AttackResult:
    """Dispatch on ``cfg.kind``."""
    if cfg.kind == "fgsm":
        return fgsm_attack(model, x, y, cfg.epsilon, cfg.clamp_min, cfg.clamp_max)
    if cfg.kind == "cw":
        return cw_pgd_attack(model, x, y, cfg)
    return pgd_attack(model, x, y, cfg)
