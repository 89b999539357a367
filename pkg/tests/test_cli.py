import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from ubw import container
from ubw.cli import main
from ubw.data import load_dataset
from ubw.nn import load_checkpoint

SMALL = {
    "data": {"synth": {"num_classes": 4, "per_class": 60, "test_per_class": 25, "image_size": 8, "sigma": 0.1}},
    "arch": {"kind": "mlp", "hidden": [16]},
    "train": {"epochs": 6, "batch_size": 16, "milestones": []},
    "verify": {"m": 20},
    "defense": {"fine_tune": {"epochs": 2, "fraction": 0.5}, "prune": {"rates": [0.0]}},
}


@pytest.fixture
def cfg(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(SMALL))
    return p


def run(*argv):
    return main([str(a) for a in argv])


def last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_train_log_and_accuracy(cfg, tmp_path, capsys):
    assert run("train", "--config", cfg, "--out-dir", tmp_path / "o") == 0
    out = last_json(capsys)
    assert out["epochs"] == 6 and out["final_test_ba"] >= 0.95
    rows = list(csv.DictReader(open(tmp_path / "o" / "train_log.csv")))
    assert len(rows) == 6
    resolved = json.loads((tmp_path / "o" / "model.ckpt.config.json").read_text())
    assert resolved["config_digest"] == out["config_digest"]
    assert resolved["config"]["train"]["epochs"] == 6


def test_same_config_same_checkpoint(cfg, tmp_path, capsys):
    for d in ("a", "b"):
        assert run("train", "--config", cfg, "--out-dir", tmp_path / d) == 0
    blobs = [(tmp_path / d / "model.ckpt").read_bytes() for d in ("a", "b")]
    assert blobs[0] == blobs[1]


def test_output_root_from_environment(cfg, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("UBW_OUTPUT_ROOT", str(tmp_path / "env"))
    assert run("train", "--config", cfg, "--epochs", "1") == 0
    assert (tmp_path / "env" / "model.ckpt").exists()


def test_poison_ubw_p_counts(cfg, tmp_path, capsys):
    assert run("poison", "--config", cfg, "--out-dir", tmp_path, "--method", "ubw-p", "--gamma", "0.1") == 0
    out = last_json(capsys)
    assert out["n"] == 240 and out["poisoned"] == 24
    data = load_dataset(tmp_path / "poisoned.ubwd")
    assert len(data.provenance["plan"]["indices"]) == 24


def test_poison_badnets_labels(cfg, tmp_path, capsys):
    assert run("poison", "--config", cfg, "--out-dir", tmp_path, "--method", "badnets", "--target", "1") == 0
    data = load_dataset(tmp_path / "poisoned.ubwd")
    idx = np.array(data.provenance["plan"]["indices"])
    assert np.all(data.labels[idx] == 1)


@pytest.mark.parametrize("argv", [
    ("poison", "--gamma", "1.5"),
    ("poison", "--gamma", "0"),
    ("train", "--set", "train.nonsense=1"),
    ("train", "--set", "no_equals_sign"),
    ("ablate", "--sweep", "gamma="),
    ("ablate", "--sweep", "width=1,2"),
])
def test_usage_errors_exit_2(cfg, tmp_path, argv, capsys):
    assert run(*argv, "--config", cfg, "--out-dir", tmp_path) == 2
    assert "error" in capsys.readouterr().err


def test_unknown_config_key_exit_2(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"train": {"epochz": 3}}))
    assert run("train", "--config", p, "--out-dir", tmp_path) == 2
    assert "train.epochz" in capsys.readouterr().err
    assert run("train", "--config", tmp_path / "missing.json") == 2


@pytest.fixture
def trained(cfg, tmp_path, capsys):
    assert run("poison", "--config", cfg, "--out-dir", tmp_path, "--method", "ubw-p") == 0
    assert run("train", "--config", cfg, "--out-dir", tmp_path, "--dataset", tmp_path / "poisoned.ubwd") == 0
    capsys.readouterr()
    return tmp_path


def test_evaluate_and_verify(cfg, trained, capsys):
    d = trained
    assert run("evaluate", "--config", cfg, "--out-dir", d, "--checkpoint", d / "model.ckpt",
               "--trigger", d / "trigger.json", "--verify-digests") == 0
    m = json.loads((d / "metrics.json").read_text())
    assert set(m) >= {"ba", "asr_a", "asr_c", "d_p"}
    assert run("verify", "--config", cfg, "--out-dir", d, "--checkpoint", d / "model.ckpt",
               "--trigger", d / "poisoned.ubwd", "--scenario", "malicious") == 0
    rep = json.loads((d / "verification.json").read_text())
    assert rep["scenario"] == "malicious" and len(rep["records"]) == 20
    assert (d / "verification.csv").exists()


def test_missing_trigger_exit_2(cfg, trained, capsys):
    d = trained
    assert run("evaluate", "--config", cfg, "--checkpoint", d / "model.ckpt", "--trigger", d / "nope.json") == 2
    doc = json.loads((d / "trigger.json").read_text())
    del doc["digest"]
    (d / "undigested.json").write_text(json.dumps(doc))
    assert run("evaluate", "--config", cfg, "--checkpoint", d / "model.ckpt", "--trigger", d / "undigested.json") == 2


def test_tampered_trigger_exit_1(cfg, trained, capsys):
    d = trained
    doc = json.loads((d / "trigger.json").read_text())
    doc["digest"] = "0" * 64
    (d / "forged.json").write_text(json.dumps(doc))
    assert run("evaluate", "--config", cfg, "--checkpoint", d / "model.ckpt", "--trigger", d / "forged.json") == 1
    assert "DigestError" in capsys.readouterr().err


def test_verify_digests_catches_config_mismatch(cfg, trained, capsys):
    d = trained
    resolved = d / "model.ckpt.config.json"
    doc = json.loads(resolved.read_text())
    doc["config"]["train"]["epochs"] = 99
    resolved.write_text(json.dumps(doc))
    argv = ("evaluate", "--config", cfg, "--checkpoint", d / "model.ckpt", "--trigger", d / "trigger.json")
    assert run(*argv) == 0
    assert run(*argv, "--verify-digests") == 1


def test_corrupt_checkpoint_exit_1(cfg, trained, capsys):
    d = trained
    blob = bytearray((d / "model.ckpt").read_bytes())
    blob[-1] ^= 0xFF
    (d / "model.ckpt").write_bytes(bytes(blob))
    assert run("evaluate", "--config", cfg, "--checkpoint", d / "model.ckpt", "--trigger", d / "trigger.json") == 1


def test_defend_fine_tune_and_prune(tmp_path, capsys):
    cnn = {**SMALL, "arch": {"kind": "cnn", "conv_channels": [4, 6], "hidden": [8]},
           "data": {"synth": {**SMALL["data"]["synth"], "image_size": 10}}}
    p = tmp_path / "cnn.json"
    p.write_text(json.dumps(cnn))
    assert run("poison", "--config", p, "--out-dir", tmp_path) == 0
    assert run("train", "--config", p, "--out-dir", tmp_path, "--dataset", tmp_path / "poisoned.ubwd") == 0
    common = ("--config", p, "--out-dir", tmp_path, "--checkpoint", tmp_path / "model.ckpt",
              "--trigger", tmp_path / "trigger.json")
    assert run("defend", *common, "--kind", "fine-tune") == 0
    assert len((tmp_path / "defense_fine-tune.csv").read_text().splitlines()) == 4  # header, baseline, 2 epochs
    assert load_checkpoint(tmp_path / "fine_tuned.ckpt").arch.kind == "cnn"
    assert run("defend", *common, "--kind", "prune") == 0
    doc = json.loads((tmp_path / "defense_prune.json").read_text())
    first = dict(doc["points"][0])
    assert first.pop("parameter") == 0.0 and first == doc["before"]


def test_synth_writes_containers(cfg, tmp_path, capsys):
    assert run("synth", "--config", cfg, "--out-dir", tmp_path) == 0
    out = last_json(capsys)
    _, header, _ = container.read(tmp_path / "train.ubwd", expect_kind="dataset", verify=True)
    assert out["train"] == header["digest"]
    assert len(load_dataset(tmp_path / "test.ubwd")) == 100


def test_ablate_small_sweep(cfg, tmp_path, capsys):
    assert run("ablate", "--config", cfg, "--out-dir", tmp_path, "--sweep", "gamma=0.05,0.2", "--seeds", "0,1") == 0
    out = last_json(capsys)
    assert out["rows"] == 4 and out["metric"] == "asr_a"
    rows = list(csv.DictReader(open(tmp_path / "ablation_gamma.csv")))
    assert [float(r["value"]) for r in rows] == [0.05, 0.2, 0.05, 0.2]


def test_entry_point_exit_codes(tmp_path):
    base = [sys.executable, "-m", "ubw.cli"]
    assert subprocess.run(base + ["--help"], capture_output=True).returncode == 0
    assert subprocess.run(base + ["bogus"], capture_output=True).returncode == 2
    r = subprocess.run(base + ["poison", "--gamma", "1.5", "--out-dir", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 2 and "Traceback" not in r.stderr
