import json
import subprocess
import sys

import numpy as np
import pytest

from caw import cli, config
from caw.errors import ConfigError
from caw.model import load_model, model_hash

SMALL = {
    "model": {"input_dim": 8, "hidden_dims": [10], "embed_dim": 6},
    "data": {"num_classes": 3, "samples_per_class": 20, "world_size": 9},
    "train": {"epochs": 2, "batch_size": 32, "pretrain_epochs": 5, "learning_rate": 1e-3},
    "eval": {"attacks": [{"epsilon": 0.05, "steps": 5, "step_size": 0.05}]},
    "attack": {"steps": 5},
    "gradcheck": {"states": 3},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


# -- config -------------------------------------------------------------------------


def test_default_training_settings():
    cfg = config.RunConfig()
    t = cfg.train_config()
    assert (t.alpha, t.beta, t.learning_rate, t.momentum, t.batch_size) == (6.0, 3.0, 1e-4, 0.9, 128)
    assert (t.inner_attack.steps, t.inner_attack.epsilon) == (2, 0.0125)
    assert [a.name for a in cfg.eval_attacks()] == ["pgd-20@0.05", "pgd-20@0.025", "pgd-20@0.0125"]


def test_config_round_trip_and_digest():
    cfg = config.RunConfig()
    back = config.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg and back.digest() == cfg.digest()
    moved = config.with_overrides(cfg, out_dir="elsewhere")
    assert moved.digest() == cfg.digest()
    assert config.with_overrides(cfg, train__alpha=1.0).digest() != cfg.digest()


def test_integer_and_float_spellings_share_a_digest():
    assert config.from_dict({"train": {"alpha": 6}}).digest() == config.from_dict({"train": {"alpha": 6.0}}).digest()


@pytest.mark.parametrize("raw,key", [
    ({"trian": {}}, "trian"),
    ({"train": {"alpah": 1}}, "train.alpah"),
    ({"train": {"alpha": "six"}}, "train.alpha"),
    ({"train": {"inner_attack": {"epsilon": -1}}}, "train.inner_attack.epsilon"),
    ({"train": {"momentum": 1.5}}, "train.momentum"),
    ({"eval": {"attacks": [{"kind": "apgd"}]}}, "eval.attacks[0].kind"),
    ({"data": {"noise_sigma": -0.1}}, "data.noise_sigma"),
    ({"model": {"extra": 1}}, "model.extra"),
    ({"version": 9}, "version"),
])
def test_bad_configs_name_the_key(raw, key):
    with pytest.raises(ConfigError) as info:
        config.from_dict(raw)
    assert info.value.key == key


def test_malformed_json_exit_2_names_key(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"train": {"epochs": 3,, "alpha": 1}}')
    code, out, err = run(["train", "--config", str(bad), "--out", str(tmp_path / "o")], capsys)
    assert code == 2
    payload = json.loads(out)
    assert payload["exit_code"] == 2 and payload["key"] == "epochs"
    assert "epochs" in err


def test_unknown_key_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"train": {"alpah": 1}}')
    code, out, _ = run(["eval", "--config", str(bad)], capsys)
    assert code == 2 and json.loads(out)["key"] == "train.alpah"


def test_bad_log_level_exit_2(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv("CAW_LOG_LEVEL", "chatty")
    code, out, _ = run(["gradcheck", "--out", str(tmp_path)], capsys)
    assert code == 2 and json.loads(out)["key"] == "CAW_LOG_LEVEL"


def test_missing_checkpoint_exit_4(tmp_path, capsys):
    code, out, _ = run(["eval", "--out", str(tmp_path / "none")], capsys)
    assert code == 4 and json.loads(out)["exit_code"] == 4


def test_corrupt_checkpoint_exit_4(tmp_path, small_config, capsys):
    out_dir = tmp_path / "run"
    assert run(["train", "--config", small_config, "--out", str(out_dir)], capsys)[0] == 0
    ck = out_dir / "checkpoint.bin"
    ck.write_bytes(ck.read_bytes()[:-5])
    code, out, _ = run(["eval", "--config", small_config, "--out", str(out_dir)], capsys)
    assert code == 4 and json.loads(out)["error"] == "TruncatedPayloadError"


# -- train / eval / attack -------------------------------------------------------------


def test_train_twice_byte_identical(tmp_path, small_config, capsys):
    for name in ("a", "b"):
        code, out, _ = run(["train", "--config", small_config, "--out", str(tmp_path / name), "--json"], capsys)
        assert code == 0
        summary = json.loads(out)
        assert summary["seed"] == 0 and summary["config_digest"]
    for f in ("checkpoint.bin", "optimizer.bin", "train_log.jsonl", "config.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    _, extra = load_model(tmp_path / "a" / "checkpoint.bin")
    assert extra["config_digest"] == summary["config_digest"] and extra["seed"] == 0


def test_seed_changes_outputs(tmp_path, small_config, capsys):
    run(["train", "--config", small_config, "--out", str(tmp_path / "a")], capsys)
    run(["train", "--config", small_config, "--out", str(tmp_path / "b"), "--seed", "1"], capsys)
    assert (tmp_path / "a/checkpoint.bin").read_bytes() != (tmp_path / "b/checkpoint.bin").read_bytes()


def test_zero_epochs_emits_unchanged_checkpoint(tmp_path, small_config, capsys):
    code, _, _ = run(["train", "--config", small_config, "--out", str(tmp_path), "--epochs", "0"], capsys)
    assert code == 0
    model, extra = load_model(tmp_path / "checkpoint.bin")
    assert extra["epoch"] == 0
    assert model_hash(model) != ""
    for t, f in zip(model.tuned.parameters(), model.frozen.parameters()):
        assert t.data.tobytes() == f.data.tobytes()
    assert (tmp_path / "train_log.jsonl").read_text() == ""


def test_eval_twice_identical_and_empty_attack_list(tmp_path, small_config, capsys):
    run(["train", "--config", small_config, "--out", str(tmp_path)], capsys)
    reports = []
    for _ in range(2):
        assert run(["eval", "--config", small_config, "--out", str(tmp_path)], capsys)[0] == 0
        reports.append((tmp_path / "eval_report.json").read_bytes())
    assert reports[0] == reports[1]
    body = json.loads(reports[0])
    assert [r["dataset"] for r in body["reports"]] == ["test", "transfer_a", "transfer_b"]
    assert body["reports"][0]["robust"][0]["attack"] == "pgd-5@0.05"

    clean_only = dict(SMALL, eval={"attacks": []})
    path = tmp_path / "clean.json"
    path.write_text(json.dumps(clean_only))
    code, out, _ = run(["eval", "--config", str(path), "--out", str(tmp_path), "--json"], capsys)
    assert code == 0
    assert all(r["robust"] == [] for r in json.loads(out)["reports"])


def test_attack_zero_eps_mask_equals_clean_errors(tmp_path, small_config, capsys):
    run(["train", "--config", small_config, "--out", str(tmp_path)], capsys)
    code, out, _ = run(["attack", "--config", small_config, "--out", str(tmp_path), "--eps", "0", "--json"], capsys)
    assert code == 0
    rows = [json.loads(s) for s in (tmp_path / "attack_results.jsonl").read_text().splitlines()]
    assert len(rows) == 60
    assert all(r["success"] == (r["clean_pred"] != r["label"]) for r in rows)
    assert all(r["linf"] == 0.0 for r in rows)
    assert json.loads(out)["attack"] == "pgd-5@0"


@pytest.mark.parametrize("kind", ["fgsm", "pgd", "cw"])
def test_attack_kinds_respect_budget(tmp_path, small_config, capsys, kind):
    run(["train", "--config", small_config, "--out", str(tmp_path)], capsys)
    argv = ["attack", "--config", small_config, "--out", str(tmp_path), "--attack", kind, "--eps", "0.05",
            "--steps", "3", "--step-size", "0.02", "--random-start"]
    assert run(argv, capsys)[0] == 0
    rows = [json.loads(s) for s in (tmp_path / "attack_results.jsonl").read_text().splitlines()]
    assert max(r["linf"] for r in rows) <= 0.05 + 1e-9
    assert all(r["seed"] == 0 and r["config_digest"] for r in rows)


def test_eval_override_replaces_ladder(tmp_path, small_config, capsys):
    run(["train", "--config", small_config, "--out", str(tmp_path)], capsys)
    code, out, _ = run(["eval", "--config", small_config, "--out", str(tmp_path), "--eps", "0.02", "--steps", "2",
                        "--json"], capsys)
    assert code == 0
    assert [e["attack"] for e in json.loads(out)["reports"][0]["robust"]] == ["pgd-2@0.02"]


def test_eval_reads_dataset_files(tmp_path, small_config, capsys):
    from caw.data import default_suite, write_dataset

    run(["train", "--config", small_config, "--out", str(tmp_path)], capsys)
    suite = default_suite(seed=0, samples_per_class=20, input_dim=8, embed_dim=6, num_classes=3, world_size=9)
    write_dataset(tmp_path / "t.bin", suite["test"])
    cfg = dict(SMALL, eval={"attacks": [], "sets": [str(tmp_path / "t.bin"), "test"]})
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    code, out, _ = run(["eval", "--config", str(path), "--out", str(tmp_path), "--json"], capsys)
    reps = json.loads(out)["reports"]
    assert code == 0 and reps[0]["clean_accuracy"] == reps[1]["clean_accuracy"]


# -- ablate / gradcheck ------------------------------------------------------------------


def test_ablate_three_arms_shared_digest(tmp_path, small_config, capsys):
    code, out, err = run(["ablate", "--config", small_config, "--out", str(tmp_path), "--epochs", "1", "--json"],
                         capsys)
    assert code == 0
    body = json.loads((tmp_path / "ablation_report.json").read_text())
    assert [a["arm"] for a in body["arms"]] == ["L_CE", "+L_CA", "+L_Reg"]
    assert body["baseline"]["arm"] == "FT-Clean"
    assert body["shared_config_digest"] == json.loads(out)["shared_config_digest"]
    assert body["config_digest"] == json.loads(out)["config_digest"]
    assert (tmp_path / "ablation_robust.csv").read_text().startswith("# config_digest=")
    assert "Robust" in err


def test_gradcheck_pass_fault_and_vacuous(tmp_path, small_config, capsys):
    code, out, err = run(["gradcheck", "--config", small_config, "--out", str(tmp_path), "--json"], capsys)
    assert code == 0 and json.loads(out)["passed"]
    assert "max rel. error" in err

    code, out, err = run(["gradcheck", "--config", small_config, "--out", str(tmp_path), "--json",
                          "--inject-fault", "reg"], capsys)
    assert code == 5
    assert json.loads(out)["failing"] == ["reg"] and "reg" in err

    code, out, _ = run(["gradcheck", "--config", small_config, "--out", str(tmp_path), "--json", "--identity"], capsys)
    body = json.loads(out)
    assert code == 0 and body["passed"]
    assert body["components"]["ce"]["vacuous"] and not body["components"]["ce_input"]["vacuous"]
    report = json.loads((tmp_path / "gradcheck_report.json").read_text())
    assert "seconds" not in report and report["seed"] == 0


def test_inject_fault_is_hidden():
    assert "inject" not in cli.build_parser().format_help()
    sub = cli.build_parser()._subparsers._group_actions[0].choices["gradcheck"]
    assert "inject" not in sub.format_help()


def test_console_script_entry_point(tmp_path, small_config):
    proc = subprocess.run([sys.executable, "-m", "caw.cli", "gradcheck", "--config", small_config,
                           "--out", str(tmp_path), "--json"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["passed"]


def test_exit_code_table():
    from caw.binfmt import ChecksumError
    from caw.errors import DimensionError, NumericError

    assert cli.exit_code_for(ConfigError("x")) == 2
    assert cli.exit_code_for(DimensionError("x")) == 2
    assert cli.exit_code_for(NumericError("x")) == 3
    assert cli.exit_code_for(ChecksumError("x")) == 4
    assert cli.exit_code_for(FileNotFoundError("x")) == 4
    assert np.all([cli.EXIT_GRADCHECK == 5])
