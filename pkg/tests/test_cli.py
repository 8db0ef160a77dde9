import json
import subprocess
import sys

import pytest

from normforge.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, main
from normforge.config import from_flat, parse_lines, preset

from test_harness import TINY


def tiny_args(tmp_path, **extra):
    vals = dict(TINY, out_dir=str(tmp_path / "run"), max_epochs="1")
    vals.update({k: str(v) for k, v in extra.items()})
    args = []
    for k, v in vals.items():
        args += ["--set", f"{k}={v}"]
    return args


def test_dump_config_preset(capsys):
    assert main(["train", "--preset", "paper-envi", "--dump-config"]) == EXIT_OK
    text = capsys.readouterr().out
    assert "model.d_model=512" in text and "schedule.n_warmup=8000" in text
    assert from_flat(parse_lines(text.splitlines())) == preset("paper-envi")


def test_set_overrides_config_file(tmp_path, capsys):
    p = tmp_path / "c.cfg"
    p.write_text("seed=1\nmodel.d_model=32\n")
    assert main(["train", "--config", str(p), "--set", "seed=7", "--dump-config"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "seed=7" in out.splitlines() and "model.d_model=32" in out.splitlines()


def test_config_error_exit_code(tmp_path, capsys):
    assert main(["train", "--set", "model.bogus=1", "--dump-config"]) == EXIT_CONFIG
    assert "unknown config key" in capsys.readouterr().err
    bad = tmp_path / "b.cfg"
    bad.write_text("not a pair\n")
    assert main(["train", "--config", str(bad)]) == EXIT_CONFIG


def test_train_ok_and_diverged(tmp_path, capsys):
    assert main(["train", *tiny_args(tmp_path / "a")]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    assert rep["status"] == "converged" and rep["steps"] == 4
    assert main(["train", *tiny_args(tmp_path / "b", inject_nan_step=2)]) == EXIT_DIVERGED
    assert json.loads(capsys.readouterr().out)["failed_step"] == 2


def test_gprofile_and_curves(tmp_path, capsys):
    main(["train", *tiny_args(tmp_path)])
    capsys.readouterr()
    assert main(["gprofile", "--checkpoint", str(tmp_path / "run" / "best.npz")]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "site,layer,step,g" and len(lines) > 1
    assert main(["curves", "--runs", str(tmp_path), "--out", str(tmp_path / "cv")]) == EXIT_OK
    assert (tmp_path / "cv" / "run_curve.csv").exists()
    assert main(["curves", "--runs", str(tmp_path / "cv")]) == EXIT_CONFIG


def test_grid_command(tmp_path, capsys):
    cfg = tmp_path / "g.cfg"
    body = "".join(f"{k}={v}\n" for k, v in TINY.items())
    cfg.write_text(body + f"max_epochs=1\nout_dir={tmp_path}/g\ngrid.seeds=0\n"
                   "grid.pre.model.residual=PreNorm\ngrid.nan.inject_nan_step=1\n")
    assert main(["grid", "--config", str(cfg), "--workers", "1"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "config,seed_0,mean,divergence_rate,mean_step_ms"
    assert "nan,fail," in out
    assert main(["grid", "--config", str(cfg), "--workers", "1", "--strict-exit"]) == EXIT_DIVERGED


def test_bleu_and_significance(tmp_path, capsys):
    (tmp_path / "h").write_text("a b c d\ne f g h\n")
    (tmp_path / "r").write_text("a b c d\ne f g h\n")
    assert main(["bleu", "--hyp", str(tmp_path / "h"), "--ref", str(tmp_path / "r")]) == EXIT_OK
    assert "100.0" in capsys.readouterr().out
    assert main(["significance", "--hypA", str(tmp_path / "h"), "--hypB", str(tmp_path / "h"),
                 "--ref", str(tmp_path / "r"), "--n", "100", "--seed", "3"]) == EXIT_OK
    assert "ties=100 p=0.5000" in capsys.readouterr().out
    assert main(["bleu", "--hyp", str(tmp_path / "missing"), "--ref", str(tmp_path / "r")]) == 1


def test_bench_norms_command(capsys):
    assert main(["bench-norms", "--d", "16", "--batch", "8", "--repeats", "1"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "ops=     112" in out and "ops=      48" in out and "ratio" in out


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "normforge.cli", "train", "--preset", "toy-copy",
                        "--dump-config"], capture_output=True, text=True)
    assert r.returncode == 0 and "name=toy-copy" in r.stdout
    r = subprocess.run([sys.executable, "-m", "normforge.cli", "train", "--set", "x=1"],
                       capture_output=True, text=True)
    assert r.returncode == 2
