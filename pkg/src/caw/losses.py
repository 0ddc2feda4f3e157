"""Fine-tuning objectives.

``total = ce + alpha * ca + beta * reg`` where

* ``ce``  is the cross-entropy of cosine/temperature logits (tuned encoder),
* ``ca``  is the per-sample KL between the tuned model's distribution on the
  adversarial input and the frozen model's distribution on the clean input,
  weighted by ``1 - p_adv[true label]`` and averaged over the batch,
* ``reg`` is the mean Euclidean distance between tuned and frozen embeddings
  of the same adversarial input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .model import DualEncoderModel, encode, zero_shot_logits
from .tensor import Tensor, gather_rows, kl_divergence_rows, log_softmax_rows, row_norm, softmax_rows

KL_DIRECTIONS = ("adv_first", "clean_first")


@dataclass
class CawConfig:
    alpha: float = 6.0
    beta: float = 3.0
    detach_weight: bool = True
    kl_direction: str = "adv_first"
    ce_on_adv: bool = True

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ConfigError("alpha must be >= 0", key="alpha")
        if not self.beta >= 0:
            raise ConfigError("beta must be >= 0", key="beta")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ConfigError(f"kl_direction must be one of {KL_DIRECTIONS}", key="kl_direction")


@dataclass
class LossBreakdown:
    l_ce: float
    l_ca: float
    l_reg: float
    l_total: float
    mean_confidence_weight: float
    total: Tensor = None  # graph root for backward()

    def to_dict(self) -> dict:
        return {"ce": self.l_ce, "ca": self.l_ca, "reg": self.l_reg,
                "total": self.l_total, "mean_weight": self.mean_confidence_weight}


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def cross_entropy_loss(logits: Tensor, y) -> Tensor:
    y = np.asarray(y, dtype=np.int64)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} vs labels {y.shape}")
    return -gather_rows(log_softmax_rows(logits), y).mean()


def prediction_distributions(model: DualEncoderModel, x_clean, x_adv, features_adv: Tensor = None):
    """(P_adv from the tuned encoder on x_adv, P_clean from the frozen encoder on x_clean).

    P_clean never carries a gradient. ``features_adv`` lets callers reuse an
    already computed tuned embedding of ``x_adv``.
    """
    x_clean, x_adv = _as_tensor(x_clean), _as_tensor(x_adv)
    if x_clean.shape != x_adv.shape:
        raise DimensionError(f"clean batch {x_clean.shape} and adversarial batch {x_adv.shape} differ")
    frozen = model.require_frozen()
    if features_adv is None:
        features_adv = encode(model.tuned, x_adv)
    p_adv = softmax_rows(zero_shot_logits(features_adv, model.class_embeddings, model.temperature))
    clean_logits = zero_shot_logits(encode(frozen, x_clean), model.class_embeddings, model.temperature)
    p_clean = softmax_rows(clean_logits).detach()
    return p_adv, p_clean


def true_label_prob(p_adv: Tensor, y) -> Tensor:
    return gather_rows(p_adv, y)


def confidence_aware_loss(p_adv: Tensor, p_clean: Tensor, y, detach_weight: bool = True,
                          kl_direction: str = "adv_first") -> Tensor:
    """mean_i KL_i * (1 - p_adv[i, y_i]); KL order set by ``kl_direction``."""
    if kl_direction == "adv_first":
        kl = kl_divergence_rows(p_adv, p_clean)
    elif kl_direction == "clean_first":
        kl = kl_divergence_rows(p_clean, p_adv)
    else:
        raise ConfigError(f"kl_direction must be one of {KL_DIRECTIONS}", key="kl_direction")
    weight = 1.0 - true_label_prob(p_adv, y)
    if detach_weight:
        weight = weight.detach()
    return (kl * weight).mean()


def feature_distance(tuned_features: Tensor, frozen_features: Tensor) -> Tensor:
    """Mean row-wise l2 distance (not squared). The frozen side is detached."""
    if tuned_features.shape != frozen_features.shape:
        raise DimensionError("feature shapes differ")
    return row_norm(tuned_features - frozen_features.detach()).mean()


def feature_reg_loss(model: DualEncoderModel, x_adv, features_adv: Tensor = None) -> Tensor:
    x_adv = _as_tensor(x_adv)
    if features_adv is None:
        features_adv = encode(model.tuned, x_adv)
    return feature_distance(features_adv, encode(model.require_frozen(), x_adv))


def total_loss(model: DualEncoderModel, x_clean, x_adv, y, cfg: CawConfig) -> LossBreakdown:
    """All three components plus their weighted sum; ``.total`` is ready for backward()."""
    x_clean, x_adv = _as_tensor(x_clean), _as_tensor(x_adv)
    y = np.asarray(y, dtype=np.int64)
    feats_adv = encode(model.tuned, x_adv)
    if cfg.ce_on_adv:
        ce_logits = zero_shot_logits(feats_adv, model.class_embeddings, model.temperature)
    else:
        ce_logits = model.logits(x_clean)
    l_ce = cross_entropy_loss(ce_logits, y)

    p_adv, p_clean = prediction_distributions(model, x_clean, x_adv, features_adv=feats_adv)
    l_ca = confidence_aware_loss(p_adv, p_clean, y, cfg.detach_weight, cfg.kl_direction)
    l_reg = feature_reg_loss(model, x_adv, features_adv=feats_adv)
    total = l_ce + cfg.alpha * l_ca + cfg.beta * l_reg

    weight = 1.0 - gather_rows(p_adv, y).data
    out = LossBreakdown(l_ce.item(), l_ca.item(), l_reg.item(), total.item(),
                        float(weight.mean()), total)
    if not np.isfinite(out.l_total):
        raise NumericError(f"non-finite loss: {out.to_dict()}")
    return out
