import subprocess
import sys

import numpy as np
import pytest

from racekit.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, TRIAL_COLUMNS, main, read_grid, read_table
from racekit.config import loads
from racekit.policy import init_params, policy_manifest, save_checkpoint

TINY = """seed = 3

[train]
horizon = 12
envs = 2
iterations = 3
eval_every = 2
eval_trials = 2
eval_horizon = 20

[policy]
arch = "mlp"
mlp_hidden = [8]

[fit]
episodes = 2
horizon = 40
window = 20
epochs = 5

[io]
figures = false
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY)
    return p


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def zero_checkpoint(path, text=TINY):
    cfg = loads(text)
    p = init_params(0, policy_manifest(cfg.policy), config=cfg.policy)
    p.flat[:] = 0.0
    save_checkpoint(path, p)
    return path


# field-dump


def test_field_dump_res2_has_8_rows_and_lints(tmp_path, cfg_path, capsys):
    out = tmp_path / "f.csv"
    code, stdout, _ = run(["field-dump", "--config", cfg_path, "--res", 2, "--out", out,
                           "--bounds", "0,10,-2,2,1,3"], capsys)
    assert code == EXIT_OK
    grid = read_grid(out)
    assert grid.shape == (8, 9)
    cols, rows, comments = read_table(out)
    assert comments[0].startswith("# config_sha256: ")
    assert run(["field-dump", "--lint", out], capsys)[0] == EXIT_OK


def test_field_dump_argument_errors(tmp_path, cfg_path, capsys):
    assert run(["field-dump", "-c", cfg_path, "--res", 1, "--out", tmp_path / "x.csv"], capsys)[0] == EXIT_CONFIG
    assert run(["field-dump", "-c", cfg_path, "--bounds", "1,2,3", "--out", tmp_path / "x.csv"], capsys)[0] == EXIT_CONFIG
    assert run(["field-dump", "-c", cfg_path, "--bounds", "5,1,0,1,0,1"], capsys)[0] == EXIT_CONFIG
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y\n1,2\n")
    assert run(["field-dump", "--lint", bad], capsys)[0] == EXIT_IO
    assert run(["field-dump", "--lint", tmp_path / "missing.csv"], capsys)[0] == EXIT_IO


# config errors


def test_unknown_config_key_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text("seed = 1\n[train]\nhorizn = 5\n")
    code, _, err = run(["train", "-c", p, "--out", tmp_path / "o"], capsys)
    assert code == EXIT_CONFIG
    assert ":3:" in err and "horizn" in err


def test_bad_override_exit_code(tmp_path, cfg_path, capsys):
    assert run(["train", "-c", cfg_path, "--set", "train.horizon=1", "--out", tmp_path / "o"], capsys)[0] == EXIT_CONFIG


def test_infeasible_track_exit_code(tmp_path, cfg_path, capsys):
    code, _, err = run(["field-dump", "-c", cfg_path, "--set", "track.spacing=1.0", "--res", 2,
                        "--out", tmp_path / "f.csv"], capsys)
    assert code == EXIT_CONFIG and "infeasible" in err


# train


def test_train_outputs_and_byte_identical_metrics(tmp_path, cfg_path, capsys):
    outs = []
    for name in ("a", "b"):
        code, stdout, _ = run(["train", "-c", cfg_path, "--out", tmp_path / name, "--ablation", "no-avf-lp"], capsys)
        assert code == EXIT_OK
        outs.append(tmp_path / name)
    a, b = outs
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "policy_final.ckpt").read_bytes() == (b / "policy_final.ckpt").read_bytes()
    cols, rows, comments = read_table(a / "metrics.csv")
    assert ",".join(cols) == "iter,loss_total,loss_C,loss_a,loss_j,loss_p,grad_norm,avf_norm,success_rate,success_cross,v_max"
    assert len(rows) == 3 and rows[0][8] == "" and rows[1][8] != ""
    assert any(c.startswith("# config_sha256:") for c in comments)
    for it in (0, 2, 3):
        assert (a / f"policy_{it:06d}.ckpt").is_file()
    assert loads((a / "config.toml").read_text()).train.avf_enabled is False


def test_train_init_checkpoint_mismatch(tmp_path, cfg_path, capsys):
    other = TINY.replace("mlp_hidden = [8]", "mlp_hidden = [4]")
    ck = zero_checkpoint(tmp_path / "z.ckpt", other)
    code, _, err = run(["train", "-c", cfg_path, "--init", ck, "--out", tmp_path / "o"], capsys)
    assert code == EXIT_IO and "manifest" in err


def test_train_finetune_with_frozen_delta(tmp_path, cfg_path, capsys):
    ck = zero_checkpoint(tmp_path / "z.ckpt")
    bias = ["--set", "target.action_bias=[0.5, 0, 0]"]
    assert run(["fit-delta", "-c", cfg_path, "--policy", ck, "--out", tmp_path / "d", *bias], capsys)[0] == EXIT_OK
    delta = tmp_path / "d" / "delta.ckpt"
    before = delta.read_bytes()
    code, _, _ = run(["train", "-c", cfg_path, "--init", ck, "--delta", delta, "--out", tmp_path / "ft", *bias], capsys)
    assert code == EXIT_OK
    assert delta.read_bytes() == before
    assert (tmp_path / "ft" / "policy_final.ckpt").read_bytes() != ck.read_bytes()
    code, _, err = run(["train", "-c", cfg_path, "--delta", ck, "--out", tmp_path / "bad"], capsys)
    assert code == EXIT_IO and "delta" in err


# eval


def test_eval_zero_policy(tmp_path, cfg_path, capsys):
    ck = zero_checkpoint(tmp_path / "z.ckpt")
    code, stdout, _ = run(["eval", ck, "-c", cfg_path, "--trials", 3, "--out", tmp_path / "e"], capsys)
    assert code == EXIT_OK
    assert "success_cross: 0/3 (0.00)" in stdout
    assert "success_rate: 3/3 (1.00)" in stdout
    cols, rows, _ = read_table(tmp_path / "e" / "report.csv")
    assert len(rows) == 3
    tcols, trows, _ = read_table(tmp_path / "e" / "trial_000.csv")
    assert tuple(tcols[:len(TRIAL_COLUMNS)]) == TRIAL_COLUMNS
    assert any(c.startswith("loss_") for c in tcols)
    assert len(trows) == 20
    first = (tmp_path / "e" / "report.csv").read_bytes()
    run(["eval", ck, "-c", cfg_path, "--trials", 3, "--out", tmp_path / "e"], capsys)
    assert (tmp_path / "e" / "report.csv").read_bytes() == first


def test_eval_missing_or_bad_checkpoint(tmp_path, cfg_path, capsys):
    code, _, err = run(["eval", tmp_path / "nope.ckpt", "-c", cfg_path, "--out", tmp_path / "e"], capsys)
    assert code == EXIT_IO and "not found" in err
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert run(["eval", bad, "-c", cfg_path, "--out", tmp_path / "e"], capsys)[0] == EXIT_IO
    assert run(["eval", bad, "-c", cfg_path, "--trials", 0], capsys)[0] == EXIT_CONFIG


def test_eval_perturbed_target(tmp_path, cfg_path, capsys):
    ck = zero_checkpoint(tmp_path / "z.ckpt")
    code, stdout, _ = run(["eval", ck, "-c", cfg_path, "--trials", 2, "--target", "perturbed",
                           "--set", "target.action_bias=[0.5, 0, 0]", "--out", tmp_path / "e"], capsys)
    assert code == EXIT_OK and "target: perturbed" in stdout
    _, rows, _ = read_table(tmp_path / "e" / "trial_000.csv")
    # the zero policy drifts backwards under the bias
    assert float(rows[-1][4]) < 0


# fit-delta


def test_fit_delta_null_and_bias(tmp_path, cfg_path, capsys):
    ck = zero_checkpoint(tmp_path / "z.ckpt")
    code, stdout, _ = run(["fit-delta", "-c", cfg_path, "--policy", ck, "--out", tmp_path / "n"], capsys)
    assert code == EXIT_OK and "null mismatch, corrections ~ 0" in stdout
    code, stdout, _ = run(["fit-delta", "-c", cfg_path, "--policy", ck, "--out", tmp_path / "b",
                           "--set", "target.action_bias=[0.5, 0, 0]"], capsys)
    assert code == EXIT_OK and "recovered bias" in stdout
    assert (tmp_path / "b" / "delta.ckpt").is_file()
    assert (tmp_path / "b" / "dataset" / "index.json").is_file()
    _, rows, _ = read_table(tmp_path / "b" / "fit_loss.csv")
    assert len(rows) == 6
    losses = np.array([float(r[1]) for r in rows])
    assert losses[-1] < losses[0]


def test_fit_delta_zero_episodes(tmp_path, cfg_path, capsys):
    ck = zero_checkpoint(tmp_path / "z.ckpt")
    code, _, err = run(["fit-delta", "-c", cfg_path, "--policy", ck, "--set", "fit.episodes=0",
                        "--out", tmp_path / "o"], capsys)
    assert code == EXIT_CONFIG and "empty" in err


def test_console_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "racekit.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "field-dump" in out.stdout
