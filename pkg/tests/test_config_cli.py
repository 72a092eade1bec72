import os

import numpy as np
import pytest

from mcdm.cli import main
from mcdm.config import ConfigError, RunConfig, desk_preset, load_config, parse_pairs, valid_keys
from mcdm.metrics import read_curve_csv


def test_defaults():
    c = RunConfig()
    assert (c.T, c.a, c.n, c.L, c.alpha, c.lr) == (16, 16, 16, 8, 0.1, 1e-5)
    assert c.seed_list() == [0, 1, 2]
    d = desk_preset()
    assert (d.lr, d.L, d.factor) == (1e-3, 4, 8)


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment line\nalpha = 0.9   # trailing\n\nsteps=10\nout_dir = some/where\n", encoding="utf-8")
    c = load_config(p, ["alpha=0.5"])
    assert c.alpha == 0.5 and c.steps == 10 and c.out_dir == "some/where"


@pytest.mark.parametrize("lines, match", [
    (["nope = 1"], "valid keys: stage, T"),
    (["steps = ten"], "cannot parse"),
    (["just words"], "expected 'key = value'"),
])
def test_parse_errors(lines, match):
    with pytest.raises(ConfigError, match=match):
        parse_pairs(lines)


@pytest.mark.parametrize("kv", ["alpha=1.5", "steps=0", "a=8", "frames=100", "stage=4", "m=256",
                                "beta_end=0.0001"])
def test_validation(kv):
    with pytest.raises(ConfigError):
        load_config(None, [kv])


def test_valid_keys_cover_fields():
    assert {"alpha", "lr", "steps", "seeds", "T_steps", "landmark_dropout"} <= set(valid_keys())


# --- cli ---------------------------------------------------------------------------------------
def test_cli_selftest(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "PASS philox_reproducible" in out and "FAIL" not in out


def test_cli_usage_errors(capsys):
    assert main([]) == 1
    assert main(["train"]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["selftest", "--set", "bogus=1"]) == 1
    assert "valid keys:" in capsys.readouterr().err


def test_cli_missing_config_file(tmp_path):
    assert main(["selftest", "--config", str(tmp_path / "absent.cfg")]) == 1


def test_cli_stage3_without_checkpoints(tmp_path, capsys):
    rc = main(["train", "--stage", "3", "--set", f"out_dir={tmp_path}", "--set", f"data_dir={tmp_path}/d"])
    assert rc == 2
    assert "stage-1 checkpoint" in capsys.readouterr().err


def test_cli_train_without_dataset(tmp_path, capsys):
    assert main(["train", "--stage", "1", "--set", f"out_dir={tmp_path}", "--set", f"data_dir={tmp_path}/d"]) == 2
    assert "gen-data" in capsys.readouterr().err


TINY = ["--preset", "desk", "--set", "N=1", "--set", "T_steps=2", "--set", "steps=2", "--set", "n_clips=4",
        "--set", "d_model=16", "--set", "seeds=0", "--set", "log_every=1"]


def _tiny(tmp_path, *extra):
    return TINY + ["--set", f"out_dir={tmp_path}/run", "--set", f"data_dir={tmp_path}/data", *extra]


def test_cli_end_to_end(tmp_path, capsys):
    cfg = tmp_path / "x.cfg"
    cfg.write_text("alpha = 0.9\n", encoding="utf-8")
    assert main(["gen-data"] + _tiny(tmp_path)) == 0
    assert os.path.exists(tmp_path / "data" / "manifest.txt")
    for s in (1, 2, 3):
        assert main(["train", "--stage", str(s)] + _tiny(tmp_path)) == 0
        assert os.path.exists(tmp_path / "run" / f"stage{s}.mct")
    lines = (tmp_path / "run" / "stage1.log").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 2 and len(lines[0].split()) == 3
    argv = ["eval", "drift", "--frames", "16", "--config", str(cfg)] + _tiny(tmp_path, "--set", "alpha=0.5")
    assert main(argv) == 0
    log = (tmp_path / "run" / "run.log").read_text(encoding="utf-8")
    eff = [l for l in log.splitlines() if "command eval" in l or "effective:" in l][-2:]
    assert "alpha=0.5" in eff[0] and eff[1].rstrip().endswith("alpha=0.5")
    first = read_curve_csv(tmp_path / "run" / "drift_seed0.csv")
    assert len(first) == 16
    assert os.path.exists(tmp_path / "run" / "drift_seed0.pgm")
    assert main(argv) == 0      # same config and seeds reproduce the curve exactly
    assert np.array_equal(read_curve_csv(tmp_path / "run" / "drift_seed0.csv"), first)
    assert main(["infer", "--frames", "16", "--out", str(tmp_path / "vid")] + _tiny(tmp_path)) == 0
    assert (tmp_path / "vid" / "manifest.txt").read_text().startswith("frames=16 height=64 width=64")
    capsys.readouterr()
    assert main(["eval", "lipsync", "--frames", "32"] + _tiny(tmp_path)) in (0, 2)   # degenerate r is a runtime error


def test_cli_bench_attention(capsys):
    assert main(["bench", "attention"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("r\tmedian_rel_err") and "L\texact_ms\tfast_ms" in out
