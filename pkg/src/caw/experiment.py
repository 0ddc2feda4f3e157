"""Desk-scale component ablation: the protocol behind the directional checks.

One seed = one synthetic world. The encoder is pre-trained cleanly on every
world cluster, snapshotted, then fine-tuned on an 8-class subset under four
settings (clean CE baseline, CE-only adversarial, +CA, +Reg) and scored on a
fresh in-distribution test split plus two held-out transfer sets whose
classes never appear during fine-tuning.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .attacks import AttackConfig
from .data import default_suite
from .evaluation import AblationReport, eval_ladder, run_ablation
from .model import DualEncoderModel, ModelConfig
from .training import TrainConfig, prepare_model

EVAL_SETS = ("test", "transfer_a", "transfer_b")


@dataclass
class DeskProtocol:
    seeds: tuple = (0, 1, 2, 3, 4)
    center_scale: float = 0.15
    noise_sigma: float = 0.05
    samples_per_class: int = 200
    epochs: int = 30
    learning_rate: float = 1e-3
    train_epsilon: float = 0.05
    train_steps: int = 2
    alpha: float = 6.0
    beta: float = 3.0
    ladder: tuple = (0.05, 0.025, 0.0125)  # first entry is the headline attack
    eval_steps: int = 20
    pretrain_epochs: int = 20
    pretrain_learning_rate: float = 0.05
    model: ModelConfig = field(default_factory=ModelConfig)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(alpha=self.alpha, beta=self.beta, learning_rate=self.learning_rate,
                           epochs=self.epochs, seed=seed,
                           inner_attack=AttackConfig(epsilon=self.train_epsilon, steps=self.train_steps),
                           pretrain_epochs=self.pretrain_epochs,
                           pretrain_learning_rate=self.pretrain_learning_rate)

    def attacks(self) -> list:
        return eval_ladder(self.ladder, steps=self.eval_steps)


def run_seed(protocol: DeskProtocol, seed: int) -> AblationReport:
    suite = default_suite(seed=seed, center_scale=protocol.center_scale, noise_sigma=protocol.noise_sigma,
                          samples_per_class=protocol.samples_per_class,
                          input_dim=protocol.model.input_dim, embed_dim=protocol.model.embed_dim)
    cfg = protocol.train_config(seed)
    model = DualEncoderModel.create(dataclasses.replace(protocol.model, seed=seed), suite["train"].prototypes)
    pre = suite["pretrain"]
    prepare_model(model, pre.x, pre.y, cfg, prototypes=pre.prototypes.vectors)
    return run_ablation(model, suite["train"], [suite[n] for n in EVAL_SETS], cfg, protocol.attacks(),
                        include_baseline=True)


def summarize(reports) -> dict:
    """Per-seed headline numbers and the pairwise comparisons used by the directional checks."""
    rows = []
    for rep in reports:
        base = rep.baseline
        row = {"seed": rep.seed, "baseline": {"robust": base.robust, "clean": base.clean, "average": base.average}}
        for arm in rep.arms:
            row[arm.name] = {"robust": arm.robust, "clean": arm.clean, "average": arm.average,
                             "robust_margin_over_baseline": arm.robust - base.robust}
        row["full_minus_ce_average"] = rep.arm("+L_Reg").average - rep.arm("L_CE").average
        rows.append(row)
    return {"seeds": rows}
