"""Command-line entry point: ``caw {train,eval,attack,ablate,gradcheck}``.

Exit codes:
    0  success
    2  configuration problem (bad JSON, unknown key, invalid value, shape mismatch)
    3  numeric failure (non-finite loss or gradient)
    4  I/O or file-format problem
    5  gradient check tolerance violated

Human-readable progress goes to stderr. With ``--json`` a single JSON
summary is printed to stdout. On failure an error object
``{"error", "message", "key", "exit_code"}`` is always printed to stdout.
Logging verbosity comes from ``CAW_LOG_LEVEL`` (error, warn, info, debug).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import config as config_mod
from .attacks import attack
from .data import default_suite, read_dataset
from .errors import (CawError, ConfigError, ContractError, DimensionError, DomainError, FileFormatError,
                     NumericError)
from .evaluation import ablation_csv, evaluate, format_ablation, run_ablation, write_json
from .gradcheck import GradcheckConfig, run_gradcheck
from .model import DualEncoderModel, load_model, model_hash, predict
from .training import fit, prepare_model

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4
EXIT_GRADCHECK = 5

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("caw")


def _say(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _setup_logging() -> None:
    name = os.environ.get("CAW_LOG_LEVEL", "warn").strip().lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"CAW_LOG_LEVEL must be one of error, warn, info, debug (got {name!r})",
                          key="CAW_LOG_LEVEL")
    logging.basicConfig(level=LOG_LEVELS[name], stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        force=True)


# -- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults are used for missing keys)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", help="output directory (overrides out_dir)")
    common.add_argument("--json", action="store_true", help="print a machine-readable summary on stdout")

    budget = argparse.ArgumentParser(add_help=False)
    budget.add_argument("--eps", type=float, help="attack budget (l-inf)")
    budget.add_argument("--steps", type=int, help="attack iterations")

    weights = argparse.ArgumentParser(add_help=False)
    weights.add_argument("--alpha", type=float, help="weight of the confidence-aware term")
    weights.add_argument("--beta", type=float, help="weight of the feature regulariser")
    weights.add_argument("--epochs", type=int, help="fine-tuning epochs")

    parser = argparse.ArgumentParser(prog="caw", description="Confidence-aware adversarial fine-tuning, desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common, budget, weights], help="pre-train, snapshot, adversarially fine-tune")

    p = sub.add_parser("eval", parents=[common, budget], help="clean and robust accuracy of a checkpoint")
    p.add_argument("--checkpoint", help="checkpoint file (default: <out>/checkpoint.bin)")

    p = sub.add_parser("attack", parents=[common, budget], help="attack one evaluation set, per-sample JSON lines")
    p.add_argument("--checkpoint", help="checkpoint file (default: <out>/checkpoint.bin)")
    p.add_argument("--step-size", type=float, help="step size (default: equal to --eps)")
    p.add_argument("--attack", choices=["fgsm", "pgd", "cw"], help="attack kind")
    p.add_argument("--random-start", action="store_true", default=None, help="uniform start inside the ball")

    sub.add_parser("ablate", parents=[common, budget, weights], help="CE-only / +CA / +Reg component ablation")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every loss gradient")
    p.add_argument("--states", type=int, help="number of random states")
    p.add_argument("--identity", action="store_true", default=None, help="use the zero-parameter encoder")
    p.add_argument("--inject-fault", help=argparse.SUPPRESS)
    return parser


def resolve_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config)
    cmd = args.command
    changes = {"seed": args.seed, "out_dir": args.out}
    if cmd in ("train", "ablate"):
        changes.update(train__alpha=args.alpha, train__beta=args.beta, train__epochs=args.epochs,
                       train__inner_attack__epsilon=args.eps, train__inner_attack__steps=args.steps)
        if args.eps is not None:
            changes["train__inner_attack__step_size"] = args.eps
    elif cmd == "eval":
        if args.eps is not None or args.steps is not None:
            # a single PGD attack replaces the configured list
            eps = args.eps if args.eps is not None else cfg.eval.attacks[0]["epsilon"] if cfg.eval.attacks else 0.0125
            steps = args.steps if args.steps is not None else 20
            changes["eval__attacks"] = [{"kind": "pgd", "epsilon": eps, "steps": steps, "step_size": eps}]
        changes["eval__checkpoint"] = args.checkpoint
    elif cmd == "attack":
        changes.update(attack__epsilon=args.eps, attack__steps=args.steps, attack__step_size=args.step_size,
                       attack__kind=args.attack, attack__random_start=args.random_start,
                       attack__checkpoint=args.checkpoint)
    elif cmd == "gradcheck":
        changes.update(gradcheck__states=args.states, gradcheck__identity=args.identity)
    return config_mod.with_overrides(cfg, **changes)


# -- shared plumbing ----------------------------------------------------------


class _Suite:
    """Lazily generated datasets for one run config."""

    def __init__(self, cfg: config_mod.RunConfig):
        self.cfg = cfg
        self._sets = None

    def _generated(self) -> dict:
        if self._sets is None:
            d, m = self.cfg.data, self.cfg.model
            self._sets = default_suite(seed=self.cfg.seed, center_scale=d.center_scale,
                                       samples_per_class=d.samples_per_class, noise_sigma=d.noise_sigma,
                                       num_classes=d.num_classes, input_dim=m.input_dim, embed_dim=m.embed_dim,
                                       world_size=d.world_size, num_transfer=d.num_transfer)
        return self._sets

    def train(self):
        if self.cfg.data.path:
            return read_dataset(self.cfg.data.path)
        return self._generated()["train"]

    def pretrain(self):
        if self.cfg.data.path:
            return None
        return self._generated()["pretrain"]

    def get(self, name: str):
        """A generated set by name, or a dataset file by path."""
        if name.endswith(".bin") or os.sep in name:
            return read_dataset(name)
        sets = self._generated()
        if name not in sets:
            raise ConfigError(f"unknown evaluation set {name!r}; choose from {sorted(sets)} or a file path",
                              key="eval.sets")
        return sets[name]


def _prepared_model(cfg: config_mod.RunConfig, suite: _Suite):
    train = suite.train()
    tcfg = cfg.train_config()
    model = DualEncoderModel.create(cfg.model_config(), train.prototypes)
    pre = suite.pretrain()
    if pre is None:
        prepare_model(model, train.x, train.y, tcfg)
    else:
        prepare_model(model, pre.x, pre.y, tcfg, prototypes=pre.prototypes.vectors)
    return model, train, tcfg


def _stamp(cfg: config_mod.RunConfig) -> dict:
    return {"config_digest": cfg.digest(), "seed": cfg.seed}


def _out_dir(cfg: config_mod.RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint(cfg: config_mod.RunConfig, explicit) -> Path:
    return Path(explicit) if explicit else Path(cfg.out_dir) / "checkpoint.bin"


# -- subcommands --------------------------------------------------------------


def cmd_train(cfg: config_mod.RunConfig) -> tuple:
    out = _out_dir(cfg)
    suite = _Suite(cfg)
    model, train, tcfg = _prepared_model(cfg, suite)
    resolved = cfg.to_dict()
    resolved.pop("out_dir")  # keeps the file identical across output directories, like the digest
    write_json(out / "config.json", {**_stamp(cfg), "config": resolved})
    _say(f"fine-tuning {tcfg.epochs} epochs on {len(train)} samples (alpha={tcfg.alpha}, beta={tcfg.beta})")
    result = fit(model, train.x, train.y, tcfg, log_path=out / "train_log.jsonl", checkpoint_dir=out,
                 extra_meta=_stamp(cfg))
    last = result.logs[-1].losses if result.logs else {}
    _say(f"wrote {out / 'checkpoint.bin'} after {result.optimizer.step} steps")
    return EXIT_OK, {"command": "train", **_stamp(cfg), "checkpoint": str(out / "checkpoint.bin"),
                     "steps": result.optimizer.step, "final_losses": last}


def cmd_eval(cfg: config_mod.RunConfig) -> tuple:
    out = _out_dir(cfg)
    path = _checkpoint(cfg, cfg.eval.checkpoint)
    model, _ = load_model(path)
    suite = _Suite(cfg)
    attacks = cfg.eval_attacks()
    reports = [evaluate(model, suite.get(name), attacks, cfg.eval.batch_size, cfg.seed, cfg.digest())
               for name in cfg.eval.sets]
    body = {"version": 1, "command": "eval", **_stamp(cfg), "model_hash": model_hash(model),
            "reports": [r.to_dict() for r in reports]}
    write_json(out / "eval_report.json", body)
    for r in reports:
        robust = ", ".join(f"{e['attack']} {100 * e['accuracy']:.2f}" for e in r.robust)
        _say(f"{r.dataset:12s} clean {100 * r.clean_accuracy:.2f}" + (f" | {robust}" if robust else ""))
    return EXIT_OK, body


def cmd_attack(cfg: config_mod.RunConfig) -> tuple:
    import numpy as np

    out = _out_dir(cfg)
    model, _ = load_model(_checkpoint(cfg, cfg.attack.checkpoint))
    ds = _Suite(cfg).get(cfg.attack.set)
    scored = model.with_prototypes(ds.prototypes.vectors)
    acfg = cfg.attack.attack_config(cfg.seed)
    res = attack(scored, ds.x, ds.y, acfg)
    clean_pred = predict(scored, ds.x)
    adv_pred = predict(scored, res.x_adv)
    linf = np.abs(res.x_adv - ds.x).max(axis=1) if len(ds) else np.zeros(0)
    stamp = _stamp(cfg)
    lines = [json.dumps({**stamp, "attack": acfg.name, "index": i, "label": int(ds.y[i]),
                         "clean_pred": int(clean_pred[i]), "adv_pred": int(adv_pred[i]),
                         "success": bool(res.success_mask[i]), "linf": float(linf[i])}, sort_keys=True)
             for i in range(len(ds))]
    (out / "attack_results.jsonl").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    summary = {"command": "attack", **stamp, "attack": acfg.name, "set": ds.name, "num_samples": len(ds),
               "success_rate": round(res.success_rate, 4),
               "clean_accuracy": round(float(np.mean(clean_pred == ds.y)) if len(ds) else 0.0, 4),
               "max_linf": float(linf.max()) if len(ds) else 0.0}
    _say(f"{acfg.name} on {ds.name}: success rate {100 * res.success_rate:.2f}% over {len(ds)} samples")
    return EXIT_OK, summary


def cmd_ablate(cfg: config_mod.RunConfig) -> tuple:
    out = _out_dir(cfg)
    suite = _Suite(cfg)
    model, train, tcfg = _prepared_model(cfg, suite)
    eval_sets = [suite.get(n) for n in cfg.eval.sets]
    report = run_ablation(model, train, eval_sets, tcfg, cfg.eval_attacks(),
                          include_baseline=cfg.ablate.include_baseline, batch_size=cfg.eval.batch_size)
    stamp = _stamp(cfg)
    body = {**report.to_dict(), **stamp, "command": "ablate"}
    write_json(out / "ablation_report.json", body)
    header = f"# config_digest={stamp['config_digest']} seed={stamp['seed']}\n"
    for metric in ("robust", "clean"):
        (out / f"ablation_{metric}.csv").write_text(header + ablation_csv(report, metric), encoding="utf-8")
    _say(format_ablation(report))
    return EXIT_OK, {"command": "ablate", **stamp, "shared_config_digest": report.shared_digest,
                     "arms": {a.name: {"robust": round(a.robust, 4), "clean": round(a.clean, 4)}
                              for a in report.arms}}


def cmd_gradcheck(cfg: config_mod.RunConfig, inject_fault=None) -> tuple:
    out = _out_dir(cfg)
    g = cfg.gradcheck
    report = run_gradcheck(GradcheckConfig(states=g.states, h=g.h, tolerance=g.tolerance, identity=g.identity,
                                           seed=cfg.seed), inject_fault=inject_fault)
    body = {"version": 1, "command": "gradcheck", **_stamp(cfg), **report.to_dict(timing=False)}
    write_json(out / "gradcheck_report.json", body)
    for name, c in report.components.items():
        flag = "ok" if c["passed"] else "FAIL"
        note = " (vacuous)" if c["vacuous"] else ""
        _say(f"{name:28s} max rel. error {c['max_rel_error']:.3e}  {flag}{note}")
    _say(f"{report.states} states in {report.seconds:.1f}s")
    if not report.passed:
        _say(f"gradient check failed for: {', '.join(report.failing)}")
        return EXIT_GRADCHECK, body
    return EXIT_OK, body


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "attack": cmd_attack, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck}


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, DimensionError, ContractError)):
        return EXIT_CONFIG
    if isinstance(exc, (NumericError, DomainError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (FileFormatError, OSError)):
        return EXIT_IO
    return EXIT_CONFIG


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        cfg = resolve_config(args)
        if args.command == "gradcheck":
            code, body = cmd_gradcheck(cfg, inject_fault=args.inject_fault)
        else:
            code, body = COMMANDS[args.command](cfg)
    except (CawError, OSError) as exc:
        code = exit_code_for(exc)
        key = getattr(exc, "key", None)
        _say(f"error: {exc}" + (f" [key: {key}]" if key else ""))
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "key": key, "exit_code": code},
                         sort_keys=True))
        return code
    if args.json:
        print(json.dumps(body, sort_keys=True))
    return code


if __name__ == "__main__":
    sys.exit(main())
