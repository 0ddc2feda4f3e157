"""Clean / robust accuracy reports and the three-arm component ablation."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .attacks import AttackConfig, attack
from .data import Dataset
from .errors import DimensionError
from .model import DualEncoderModel, predict
from .training import TrainConfig, clean_baseline, digest, fit

log = logging.getLogger(__name__)

ARM_NAMES = ("L_CE", "+L_CA", "+L_Reg")
REPORT_VERSION = 1


def _r4(v: float) -> float:
    return round(float(v), 4)


@dataclass
class EvalReport:
    dataset: str
    clean_accuracy: float
    robust: list = field(default_factory=list)  # dicts: attack, kind, epsilon, steps, step_size, accuracy
    num_samples: int = 0
    seed: int = 0
    config_digest: str = ""

    def robust_accuracy(self, name: Optional[str] = None) -> float:
        """Accuracy of the named attack, or of the first one."""
        for entry in self.robust:
            if name is None or entry["attack"] == name:
                return entry["accuracy"]
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "dataset": self.dataset,
            "clean_accuracy": _r4(self.clean_accuracy),
            "robust": [{**e, "accuracy": _r4(e["accuracy"])} for e in self.robust],
            "num_samples": self.num_samples,
            "seed": self.seed,
            "config_digest": self.config_digest,
        }


def _batched(n: int, batch_size: Optional[int]):
    if not batch_size or batch_size >= n:
        return [slice(0, n)]
    return [slice(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]


def evaluate(model: DualEncoderModel, dataset: Dataset, attacks: Sequence[AttackConfig] = (),
             batch_size: Optional[int] = None, seed: int = 0, config_digest: str = "") -> EvalReport:
    """Clean accuracy plus robust accuracy under every attack in ``attacks``.

    The model is scored against ``dataset.prototypes`` and is not modified.
    """
    if dataset.prototypes.embed_dim != model.tuned.embed_dim:
        raise DimensionError(
            f"dataset prototypes have dim {dataset.prototypes.embed_dim}, model embeds to {model.tuned.embed_dim}")
    scored = model.with_prototypes(dataset.prototypes.vectors)
    n = len(dataset)
    batches = _batched(n, batch_size)
    correct = sum(int(np.sum(predict(scored, dataset.x[b]) == dataset.y[b])) for b in batches)
    clean = correct / n if n else 0.0
    robust = []
    for cfg in attacks:
        survived = 0
        for b in batches:
            res = attack(scored, dataset.x[b], dataset.y[b], cfg)
            survived += int(np.sum(~res.success_mask))
        robust.append({"attack": cfg.name, "kind": cfg.kind, "epsilon": cfg.epsilon, "steps": cfg.steps,
                       "step_size": cfg.step_size, "accuracy": survived / n if n else 0.0})
    return EvalReport(dataset.name, clean, robust, n, seed, config_digest)


def eval_ladder(epsilons=(0.0125, 0.025, 0.05), steps: int = 20, kind: str = "pgd") -> list:
    """Attack configs with step size equal to the budget."""
    return [AttackConfig(epsilon=e, steps=steps, step_size=e, kind=kind) for e in epsilons]


# -- ablation -----------------------------------------------------------------


@dataclass
class ArmResult:
    name: str
    alpha: float
    beta: float
    robust: float
    clean: float
    config_digest: str
    reports: list = field(default_factory=list)
    first_step_loss: float = float("nan")

    @property
    def average(self) -> float:
        return (self.robust + self.clean) / 2

    def robust_by_attack(self) -> dict:
        """Mean robust accuracy across evaluation sets, per attack name."""
        names = [e["attack"] for e in self.reports[0].robust] if self.reports else []
        return {n: float(np.mean([r.robust_accuracy(n) for r in self.reports])) for n in names}

    def to_dict(self) -> dict:
        return {"arm": self.name, "alpha": self.alpha, "beta": self.beta,
                "robust": _r4(self.robust), "clean": _r4(self.clean), "average": _r4(self.average),
                "robust_by_attack": {k: _r4(v) for k, v in self.robust_by_attack().items()},
                "first_step_loss": self.first_step_loss,
                "config_digest": self.config_digest,
                "reports": [r.to_dict() for r in self.reports]}


@dataclass
class AblationReport:
    arms: list
    shared_digest: str
    seed: int
    headline_attack: str
    baseline: Optional[ArmResult] = None

    def arm(self, name: str) -> ArmResult:
        for a in self.arms:
            if a.name == name:
                return a
        raise KeyError(name)

    def to_dict(self) -> dict:
        out = {"version": REPORT_VERSION, "seed": self.seed, "shared_config_digest": self.shared_digest,
               "headline_attack": self.headline_attack, "arms": [a.to_dict() for a in self.arms]}
        if self.baseline is not None:
            out["baseline"] = self.baseline.to_dict()
        return out


def shared_digest(cfg: TrainConfig) -> str:
    """Digest of everything except the two loss weights."""
    d = cfg.to_dict()
    d.pop("alpha")
    d.pop("beta")
    return digest(d)


def _run_arm(name, model, train: Dataset, eval_sets, cfg, attacks, batch_size) -> ArmResult:
    arm_model = model.clone()
    result = fit(arm_model, train.x, train.y, cfg)
    reports = [evaluate(arm_model, ds, attacks, batch_size, cfg.seed, cfg.digest()) for ds in eval_sets]
    robust = float(np.mean([r.robust_accuracy() for r in reports])) if attacks else float("nan")
    clean = float(np.mean([r.clean_accuracy for r in reports]))
    first = result.logs[0].losses["total"] if result.logs else float("nan")
    log.info("arm %s: robust %.4f clean %.4f", name, robust, clean)
    return ArmResult(name, cfg.alpha, cfg.beta, robust, clean, cfg.digest(), reports, first)


def run_ablation(model: DualEncoderModel, train: Dataset, eval_sets: Sequence[Dataset], base_cfg: TrainConfig,
                 eval_attacks: Sequence[AttackConfig], include_baseline: bool = False,
                 batch_size: Optional[int] = None) -> AblationReport:
    """Train CE-only, +CA and +Reg arms from the same snapshot and seed, evaluate each identically.

    The headline robust number of an arm is the mean, over ``eval_sets``, of
    the accuracy under the first attack in ``eval_attacks``.
    """
    model.require_frozen()
    arm_cfgs = [
        (ARM_NAMES[0], base_cfg.replace(alpha=0.0, beta=0.0)),
        (ARM_NAMES[1], base_cfg.replace(beta=0.0)),
        (ARM_NAMES[2], base_cfg),
    ]
    arms = [_run_arm(n, model, train, eval_sets, c, eval_attacks, batch_size) for n, c in arm_cfgs]
    baseline = None
    if include_baseline:
        baseline = _run_arm("FT-Clean", model, train, eval_sets, clean_baseline(base_cfg), eval_attacks, batch_size)
    headline = eval_attacks[0].name if eval_attacks else ""
    return AblationReport(arms, shared_digest(base_cfg), base_cfg.seed, headline, baseline)


# -- serialisation ------------------------------------------------------------


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def ablation_csv(report: AblationReport, metric: str = "robust") -> str:
    """Paper-style table: arms as rows, evaluation sets as columns, percentages to 2 decimals."""
    rows = list(report.arms) + ([report.baseline] if report.baseline else [])
    names = [r.dataset for r in rows[0].reports]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", *names, "average"])
    for arm in rows:
        vals = [r.robust_accuracy() if metric == "robust" else r.clean_accuracy for r in arm.reports]
        writer.writerow([arm.name, *[f"{100 * v:.2f}" for v in vals], f"{100 * float(np.mean(vals)):.2f}"])
    return buf.getvalue()


def format_ablation(report: AblationReport) -> str:
    lines = [f"{'':10s} {'Robust':>8s} {'Clean':>8s} {'Average':>8s}"]
    for arm in ([report.baseline] if report.baseline else []) + list(report.arms):
        lines.append(f"{arm.name:10s} {100 * arm.robust:8.2f} {100 * arm.clean:8.2f} {100 * arm.average:8.2f}")
    return "\n".join(lines)
