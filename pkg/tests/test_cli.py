"""CLI contract tests: subcommand behavior, exit codes, and the `error:`
prefix on every failure path.

Commands run in-process through run_cli() so the suite stays fast; one test
drives the installed console script end to end as a smoke check.
"""

import json
import subprocess
import sys

import pytest

from etcsnn.cli import run_cli
from etcsnn.train import load_checkpoint

TINY = """
# tiny but real training setup
data.classes=2
data.dim=8
data.drift_strength=0.5
data.noise_sigma=0.1
data.samples_per_class=10
network.hidden_sizes=8
network.timesteps=3
train.epochs=2
train.batch_size=8
opt.lr=0.01
"""


@pytest.fixture()
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


@pytest.fixture()
def trained_run(tmp_path, tiny_cfg):
    out = tmp_path / "run"
    code = run_cli(["train", "--config", str(tiny_cfg), "--out", str(out)])
    assert code == 0
    return out


# -- exit codes and error prefix -----------------------------------------------


def test_missing_config_exits_1(tmp_path, capsys):
    code = run_cli(["train", "--config", str(tmp_path / "missing.cfg")])
    assert code == 1
    err = capsys.readouterr().err
    assert err.startswith("error: config not found")


def test_unknown_config_key_exits_1_and_names_key(capsys):
    code = run_cli(["train", "--set", "train.lr=0.1", "--set", "train.epochs=0"])
    assert code == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and "train.lr" in err


def test_constraint_violation_exits_1(capsys):
    code = run_cli(["train", "--set", "etc.tau=-1", "--set", "train.epochs=0"])
    assert code == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and "etc.tau" in err


def test_malformed_set_exits_1(capsys):
    code = run_cli(["train", "--set", "no_equals_sign"])
    assert code == 1
    assert capsys.readouterr().err.startswith("error:")


def test_unknown_subcommand_exits_1(capsys):
    code = run_cli(["frobnicate"])
    assert code == 1
    assert capsys.readouterr().err.startswith("error:")


def test_help_exits_0(capsys):
    assert run_cli(["--help"]) == 0
    assert "synth" in capsys.readouterr().out


def test_missing_checkpoint_exits_1(tmp_path, capsys):
    code = run_cli(["eval", "--ckpt", str(tmp_path / "none.bin")])
    assert code == 1
    assert capsys.readouterr().err.startswith("error: checkpoint not found")


def test_corrupt_checkpoint_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"definitely not a checkpoint")
    code = run_cli(["eval", "--ckpt", str(bad)])
    assert code == 2
    assert capsys.readouterr().err.startswith("error:")


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_divergent_training_exits_2(tmp_path, tiny_cfg, capsys):
    code = run_cli([
        "train", "--config", str(tiny_cfg), "--out", str(tmp_path / "boom"),
        "--set", "opt.lr=1e300",
    ])
    assert code == 2
    err = capsys.readouterr().err
    assert err.startswith("error:") and "epoch 0" in err


# -- synth + train + eval happy paths ---------------------------------------------


def test_synth_writes_loadable_dataset(tmp_path, capsys):
    out = tmp_path / "d.bin"
    code = run_cli([
        "synth", "--out", str(out),
        "--spec", "classes=2", "--spec", "dim=8", "--spec", "samples_per_class=10",
        "--spec", "timesteps=3", "--spec", "noise_sigma=0.1",
        "--spec", "drift_strength=0.5", "--spec", "seed=5",
    ])
    assert code == 0
    assert "16 train / 4 test" in capsys.readouterr().out

    from etcsnn.data import load_synth_dataset

    spec, train_split, test_split = load_synth_dataset(out)
    assert spec.classes == 2 and spec.seed == 5
    assert len(train_split) == 16 and len(test_split) == 4


def test_train_writes_artifacts(trained_run, capsys):
    assert (trained_run / "metrics.jsonl").exists()
    assert (trained_run / "ckpt_final.bin").exists()
    ck = load_checkpoint(trained_run / "ckpt_final.bin")
    assert ck.epoch == 2


def test_synth_then_train_data_shorthand_is_deterministic(tmp_path, tiny_cfg):
    data = tmp_path / "d.bin"
    assert run_cli([
        "synth", "--out", str(data),
        "--spec", "classes=2", "--spec", "dim=8", "--spec", "samples_per_class=10",
        "--spec", "timesteps=3", "--spec", "noise_sigma=0.1",
        "--spec", "drift_strength=0.5",
    ]) == 0
    logs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = run_cli([
            "train", "--config", str(tiny_cfg), "--data", str(data),
            "--out", str(out),
        ])
        assert code == 0
        logs.append((out / "metrics.jsonl").read_bytes())
    assert logs[0] == logs[1]


def test_eval_reports_accuracy_per_timestep(trained_run, capsys):
    code = run_cli([
        "eval", "--ckpt", str(trained_run / "ckpt_final.bin"), "--timesteps", "1,3",
    ])
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert set(payload["accuracy"]) == {"1", "3"}
    for acc in payload["accuracy"].values():
        assert 0.0 <= acc <= 1.0


def test_eval_defaults_to_config_eval_list(trained_run, capsys):
    code = run_cli(["eval", "--ckpt", str(trained_run / "ckpt_final.bin")])
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert set(payload["accuracy"]) == {"1", "2", "3"}


def test_eval_rejects_out_of_range_timestep(trained_run, capsys):
    code = run_cli([
        "eval", "--ckpt", str(trained_run / "ckpt_final.bin"), "--timesteps", "9",
    ])
    assert code == 1
    assert capsys.readouterr().err.startswith("error:")


def test_resume_missing_checkpoint_exits_1(tiny_cfg, tmp_path, capsys):
    code = run_cli([
        "train", "--config", str(tiny_cfg), "--out", str(tmp_path / "x"),
        "--resume", str(tmp_path / "nope.bin"),
    ])
    assert code == 1
    assert capsys.readouterr().err.startswith("error: checkpoint not found")


# -- gradcheck ---------------------------------------------------------------------


def test_gradcheck_passes_and_prints_errors(capsys):
    code = run_cli(["gradcheck", "--seed", "7", "--cases", "10"])
    out = capsys.readouterr().out
    assert code == 0
    assert "ce_mean max_rel_err=" in out
    assert "consistency max_rel_err=" in out
    assert "fd_max_rel_err=" in out
    assert "PASS" in out


# -- analysis commands ---------------------------------------------------------------


def test_dump_dist_writes_csv(trained_run, tmp_path, capsys):
    out = tmp_path / "dist.csv"
    code = run_cli([
        "dump-dist", "--ckpt", str(trained_run / "ckpt_final.bin"),
        "--out", str(out), "--samples", "2",
    ])
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("sample_id,label,t,argmax,")
    assert len(lines) == 1 + 2 * 4  # header + (T rows + mean row) per sample


def test_consistency_prints_report(trained_run, capsys):
    code = run_cli([
        "consistency", "--ckpt", str(trained_run / "ckpt_final.bin"),
        "--samples", "4",
    ])
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["samples"] == 4
    assert payload["mean_pairwise_kl"] >= 0.0
    assert -1.0 <= payload["grad_cosine_mean"] <= 1.0


# -- installed console script ----------------------------------------------------


def test_console_script_smoke():
    proc = subprocess.run(
        [sys.executable, "-m", "etcsnn.cli", "gradcheck", "--cases", "3"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "PASS" in proc.stdout
