import csv
import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from bitransfer.analysis import recovered
from bitransfer.cli import main, manifest_hashes, read_manifest, sha256_file
from bitransfer.config import RunConfig, load_config
from bitransfer.errors import ConfigError
from bitransfer.models import load_checkpoint, save_checkpoint

TINY = """\
# tiny classification run
data.classification.n_train=200
data.classification.n_eval=100
model.hidden=8
pretrain.epochs=3
pretrain.lr=0.02
transfer.epochs=2
transfer.lr=1e-3
"""


@pytest.fixture()
def cfgfile(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(TINY)
    return p


def run(*args):
    return main([str(a) for a in args])


def rows(path):
    lines = Path(path).read_text().splitlines()
    assert lines[0].startswith("# schema=")
    return list(csv.DictReader(lines[1:]))


def test_config_defaults_and_overrides(cfgfile, tmp_path):
    cfg = load_config(cfgfile, ["transfer.method=vanilla-kd", "run.out=rel"], seed=7)
    assert cfg["transfer.method"] == "vanilla-kd" and cfg["run.seed"] == 7
    assert cfg["model.hidden"] == (8,) and cfg["transfer.lr"] == 1e-3
    assert Path(cfg["run.out"]).is_absolute()
    assert cfg.data_spec().n_train == 200 and cfg.data_spec().seed == 7
    with pytest.raises(ConfigError):
        RunConfig({"transfer.nope": "1"})
    with pytest.raises(ConfigError):
        RunConfig({"transfer.epochs": "many"})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")
    again = RunConfig(dict(line.split("=", 1) for line in cfg.text().splitlines()))
    assert again.text() == cfg.text()


def test_missing_config_exit_2(tmp_path, capsys):
    missing = tmp_path / "nope.cfg"
    assert run("pretrain", "--config", missing) == 2
    assert str(missing) in capsys.readouterr().err


def test_bad_keys_and_values_exit_2(cfgfile, tmp_path):
    assert run("pretrain", "--config", cfgfile, "--set", "model.widths=3", "--out", tmp_path / "o") == 2
    assert run("pretrain", "--config", cfgfile, "--set", "transfer.method=magic", "--out", tmp_path / "o") == 2
    assert run("transfer", "--config", cfgfile, "--out", tmp_path / "empty") == 2


def test_training_failure_exit_1(cfgfile, tmp_path, capsys):
    assert run("pretrain", "--config", cfgfile, "--set", "pretrain.lr=1e200", "--out", tmp_path / "o") == 1
    assert "diverged" in capsys.readouterr().err


def test_pretrain_transfer_analyze(cfgfile, tmp_path):
    out = tmp_path / "o"
    assert run("pretrain", "--config", cfgfile, "--out", out) == 0
    ck = out / "model1.ckpt"
    m = load_checkpoint(ck)
    save_checkpoint(m, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == ck.read_bytes()
    met = rows(out / "metrics.csv")
    assert [r["epoch"] for r in met if r["model"] == "model1"] == ["1", "2", "3"]

    before = {p.name: sha256_file(p) for p in out.glob("*.ckpt")}
    assert run("transfer", "--config", cfgfile, "--out", out) == 0
    assert {p: sha256_file(out / p) for p in before} == before
    rep = json.loads((out / "report.json").read_text())
    assert rep["method"] == "bi-kd" and len(rep["epochs"]) == 2
    body = (out / "report.json").read_text()
    assert run("transfer", "--config", cfgfile, "--out", out) == 0
    again = json.loads((out / "report.json").read_text())
    assert again["digest"] == rep["digest"]
    strip = lambda d: {k: v for k, v in d.items() if k != "wall_clock"}
    assert strip(again) == strip(rep)
    assert body.splitlines()[0].startswith('{"schema": "bitransfer.report/1"')

    assert run("analyze", "--config", cfgfile, "--out", out) == 0
    an = rows(out / "analysis.csv")
    for r in an:
        b, a, e = float(r["before"]), float(r["after"]), float(r["ensemble"])
        if e == b:
            assert np.isnan(float(r["recovered"]))  # undefined quotient is written as nan
        else:
            assert float(r["recovered"]) == recovered(b, a, e)
    cases = rows(out / "cases.csv")
    for r in cases:
        assert sum(float(r[c]) for c in ("case1", "case2", "case3", "inverted")) == pytest.approx(1.0, abs=1e-12)
    assert (out / "cca.json").read_text().startswith('{"schema": "bitransfer.cca/1"')


def test_analyze_same_checkpoints(cfgfile, tmp_path):
    out = tmp_path / "o"
    assert run("pretrain", "--config", cfgfile, "--out", out) == 0
    both = f"{out / 'model1.ckpt'},{out / 'model2.ckpt'}"
    assert run("analyze", "--config", cfgfile, "--out", out, "--set", f"analyze.before={both}",
               "--set", f"analyze.after={both}") == 0
    for r in rows(out / "analysis.csv"):
        assert float(r["recovered"]) == 0.0
    c = json.loads((out / "cca.json").read_text())
    assert c["before"] == c["after"]


def test_vanilla_teacher_checkpoint_untouched(cfgfile, tmp_path):
    out = tmp_path / "o"
    assert run("pretrain", "--config", cfgfile, "--out", out) == 0
    h = sha256_file(out / "model1.ckpt")
    assert run("transfer", "--config", cfgfile, "--out", out, "--set", "transfer.method=vanilla-kd") == 0
    assert sha256_file(out / "model1.ckpt") == h
    assert load_checkpoint(out / "model1.transfer.ckpt").digest() == load_checkpoint(out / "model1.ckpt").digest()


def test_method_task_mismatch_exit_2(cfgfile, tmp_path):
    out = tmp_path / "o"
    assert run("pretrain", "--config", cfgfile, "--out", out) == 0
    assert run("transfer", "--config", cfgfile, "--out", out, "--set", "data.task=dense-seg") == 2


def test_experiment_manifest(cfgfile, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("experiment", "--config", cfgfile, "--out", a) == 0
    assert run("experiment", "--config", cfgfile, "--out", b) == 0
    ha, hb = manifest_hashes(a / "manifest.txt"), manifest_hashes(b / "manifest.txt")
    assert ha == hb and len(ha) >= 8
    sections = read_manifest(a / "manifest.txt")
    assert sections["stages"] == ["generate", "pretrain:model1", "pretrain:model2", "transfer", "analyze"]
    assert (a / "manifest.txt").read_text().startswith("# schema=bitransfer.manifest/1")
    # rerun from the manifest itself after deleting an intermediate checkpoint
    (a / "pretrain" / "model1.ckpt").unlink()
    assert run("experiment", "--config", a / "manifest.txt", "--out", a) == 0
    assert manifest_hashes(a / "manifest.txt") == ha
    for rel in ha:
        first = (a / rel).read_bytes().split(b"\n", 1)[0]
        assert first.startswith((b"# schema=", b'{"schema"', b"BTC/1 "))


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "bitransfer.cli", "pretrain", "--config", str(tmp_path / "x")],
                       capture_output=True, text=True)
    assert r.returncode == 2 and "configuration error" in r.stderr
