"""Finite-difference verification of every loss gradient.

For each component the analytic gradient from :func:`caw.tensor.backward` is
compared against central differences at seeded random states of a small
model. The error reported for one state is

    max_i |analytic_i - numeric_i| / max(max_i |numeric_i|, max_i |analytic_i|, 1e-8)

and a component passes when the worst state stays below the tolerance.

When the confidence weight is detached, the numeric side holds the weight at
its value at the base point and differentiates only the KL factor.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attacks import ce_objective, margin_objective
from .losses import (CawConfig, confidence_aware_loss, cross_entropy_loss, feature_reg_loss,
                     prediction_distributions, total_loss)
from .model import ClassPrototypeSet, DualEncoderModel, ImageEncoder, encode, snapshot_frozen, zero_shot_logits
from .tensor import Tensor, backward, finite_diff_grad, gather_rows, kl_divergence_rows, softmax_rows

CA_VARIANTS = [(d, k) for d in (True, False) for k in ("adv_first", "clean_first")]
COMPONENTS = (["ce"] + [f"ca[detach={d},{k}]" for d, k in CA_VARIANTS]
              + ["reg", "total", "ce_input", "cw_margin_input"])


@dataclass
class GradcheckConfig:
    states: int = 100
    h: float = 1e-5
    tolerance: float = 1e-4
    batch: int = 4
    input_dim: int = 4
    hidden_dims: tuple = (4,)
    embed_dim: int = 3
    num_classes: int = 3
    identity: bool = False
    alpha: float = 6.0
    beta: float = 3.0
    seed: int = 0


@dataclass
class GradcheckReport:
    components: dict = field(default_factory=dict)
    tolerance: float = 1e-4
    states: int = 0
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.components.values())

    @property
    def failing(self) -> list:
        return [k for k, c in self.components.items() if not c["passed"]]

    def to_dict(self, timing: bool = True) -> dict:
        out = {"passed": self.passed, "tolerance": self.tolerance, "states": self.states,
               "failing": self.failing, "components": self.components}
        if timing:
            out["seconds"] = round(self.seconds, 3)
        return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def random_state(cfg: GradcheckConfig, index: int):
    """A small model whose tuned encoder has drifted away from its frozen snapshot."""
    rng = np.random.default_rng([cfg.seed, index])
    if cfg.identity:
        enc = ImageEncoder([], cfg.input_dim, cfg.input_dim)
        embed = cfg.input_dim
    else:
        enc = ImageEncoder.init(cfg.input_dim, cfg.hidden_dims, cfg.embed_dim, rng)
        embed = cfg.embed_dim
    protos = ClassPrototypeSet.random(cfg.num_classes, embed, rng)
    model = DualEncoderModel(enc, protos.vectors, temperature=float(rng.uniform(0.1, 1.0)))
    snapshot_frozen(model)
    for p in model.tuned.parameters():
        p.data = p.data + 0.3 * rng.normal(size=p.shape)
    x = rng.uniform(0.0, 1.0, size=(cfg.batch, cfg.input_dim))
    x_adv = np.clip(x + rng.uniform(-0.1, 0.1, size=x.shape), 0.0, 1.0)
    y = rng.integers(0, cfg.num_classes, size=cfg.batch)
    return model, x, x_adv, y


def _flat(arrays) -> np.ndarray:
    return np.concatenate([a.reshape(-1) for a in arrays]) if arrays else np.zeros(0)


def _param_check(model, loss_fn, h: float, fault: bool) -> float:
    """Compare backward() with central differences over all tuned parameters."""
    return _split_check(model, loss_fn, loss_fn, h, fault)


def _input_check(objective, model, x, y, h: float, fault: bool) -> float:
    xt = Tensor(x, requires_grad=True)
    backward(objective(model, xt, y))
    analytic = xt.grad * 1.01 + 1e-3 if fault else xt.grad
    numeric = finite_diff_grad(lambda t: objective(model, t, y), x, h).data
    return relative_error(analytic, numeric)


def _fixed_weight_ca(model, x, x_adv, y, weight, kl_direction):
    """CA loss with the confidence weight replaced by constants (numeric oracle)."""
    feats = encode(model.tuned, Tensor(x_adv))
    p_adv = softmax_rows(zero_shot_logits(feats, model.class_embeddings, model.temperature))
    p_clean = softmax_rows(model.logits(x, use_frozen=True)).detach()
    kl = kl_divergence_rows(p_adv, p_clean) if kl_direction == "adv_first" else kl_divergence_rows(p_clean, p_adv)
    return (kl * weight).mean()


def check_state(model, x, x_adv, y, cfg: GradcheckConfig, inject_fault: Optional[str] = None) -> dict:
    errors = {}

    def fault(name):
        return inject_fault is not None and inject_fault in (name, "all")

    errors["ce"] = _param_check(model, lambda: cross_entropy_loss(model.logits(x_adv), y), cfg.h, fault("ce"))

    p_adv0, _ = prediction_distributions(model, x, x_adv)
    weight0 = 1.0 - gather_rows(p_adv0, y).data
    for detach, direction in CA_VARIANTS:
        name = f"ca[detach={detach},{direction}]"

        def analytic_ca(detach=detach, direction=direction):
            p_adv, p_clean = prediction_distributions(model, x, x_adv)
            return confidence_aware_loss(p_adv, p_clean, y, detach, direction)

        if detach:
            # analytic side from the detached loss, numeric side from the fixed-weight oracle
            errors[name] = _split_check(model, analytic_ca,
                                        lambda direction=direction: _fixed_weight_ca(model, x, x_adv, y, weight0, direction),
                                        cfg.h, fault(name))
        else:
            errors[name] = _param_check(model, analytic_ca, cfg.h, fault(name))

    errors["reg"] = _param_check(model, lambda: feature_reg_loss(model, x_adv), cfg.h, fault("reg"))

    caw = CawConfig(cfg.alpha, cfg.beta, detach_weight=True)

    def oracle_total():
        ce = cross_entropy_loss(model.logits(x_adv), y)
        return ce + cfg.alpha * _fixed_weight_ca(model, x, x_adv, y, weight0, "adv_first") \
            + cfg.beta * feature_reg_loss(model, x_adv)

    errors["total"] = _split_check(model, lambda: total_loss(model, x, x_adv, y, caw).total, oracle_total,
                                   cfg.h, fault("total"))
    errors["ce_input"] = _input_check(ce_objective, model, x_adv, y, cfg.h, fault("ce_input"))
    errors["cw_margin_input"] = _input_check(margin_objective, model, x_adv, y, cfg.h, fault("cw_margin_input"))
    return errors


def _split_check(model, analytic_fn, oracle_fn, h: float, fault: bool) -> float:
    """backward() of ``analytic_fn`` against finite differences of ``oracle_fn``."""
    params = model.tuned.parameters()
    if not params:
        return 0.0
    for p in params:
        p.grad = None
    backward(analytic_fn())
    analytic = _flat([p.grad for p in params])
    if fault:
        analytic = analytic * 1.01 + 1e-3
    numeric = []
    for p in params:
        orig = p.data

        def f(t, p=p):
            p.data = t.data
            return oracle_fn().item()

        numeric.append(finite_diff_grad(f, orig, h).data)
        p.data = orig
    for p in params:
        p.grad = None
    return relative_error(analytic, _flat(numeric))


def run_gradcheck(cfg: GradcheckConfig = GradcheckConfig(), inject_fault: Optional[str] = None) -> GradcheckReport:
    t0 = time.perf_counter()
    worst = {name: 0.0 for name in COMPONENTS}
    n_params = 0
    for i in range(cfg.states):
        model, x, x_adv, y = random_state(cfg, i)
        n_params = model.tuned.num_parameters()
        for name, err in check_state(model, x, x_adv, y, cfg, inject_fault).items():
            worst[name] = max(worst[name], err)
    report = GradcheckReport(tolerance=cfg.tolerance, states=cfg.states)
    for name, err in worst.items():
        vacuous = n_params == 0 and not name.endswith("_input")
        report.components[name] = {"max_rel_error": err, "passed": err < cfg.tolerance, "vacuous": vacuous}
    report.seconds = time.perf_counter() - t0
    return report
