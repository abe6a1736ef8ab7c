import json

import numpy as np
import pytest

from soma import checkpoint as ckpt
from soma import io
from soma.cli import main

TINY_TRAIN = {
    "n_train": 48, "n_val": 16,
    "net": {"d_model": 8, "heads": 2, "layers": 1, "feature_width": 8},
    "train": {"max_epochs": 3, "batch_size": 16, "lr": 3e-3},
}


def _cfg(tmp_path, name, obj):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    cfg = d / "synth.json"
    cfg.write_text(json.dumps({"duration_s": 1.0, "n_sequences": 2}))
    assert main(["synth", "--config", str(cfg), str(d / "out")]) == 0
    return d / "out"


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("train")
    cfg = d / "train.json"
    cfg.write_text(json.dumps(TINY_TRAIN))
    assert main(["train", "--config", str(cfg), str(d / "run")]) == 0
    return d, cfg


def test_synth_outputs(synth_dir):
    man = json.loads((synth_dir / "manifest.json").read_text())
    assert set(man["files"]) == {f"seq_00{i}{ext}" for i in (0, 1) for ext in (".jsonl", ".labels.jsonl", ".gt.jsonl")}
    seq = io.read_mpc(synth_dir / "seq_000.jsonl")
    assert len(seq) == 30 and all(f.labels is None for f in seq.frames)
    ls, labels = io.read_labelled(synth_dir / "seq_000.gt.jsonl")
    _, labels2 = io.read_labelled(synth_dir / "seq_000.labels.jsonl")
    assert all(np.array_equal(a, b) for a, b in zip(labels, labels2))
    assert man["config_hash"] == seq.meta["config_hash"]


def test_synth_byte_identical(synth_dir, tmp_path):
    cfg = _cfg(tmp_path, "s.json", {"duration_s": 1.0, "n_sequences": 2})
    assert main(["synth", "--config", cfg, str(tmp_path / "again")]) == 0
    for name in ("seq_000.jsonl", "seq_001.gt.jsonl", "manifest.json"):
        assert (tmp_path / "again" / name).read_bytes() == (synth_dir / name).read_bytes()
    assert main(["synth", "--config", cfg, "--seed", "5", str(tmp_path / "other")]) == 0
    assert (tmp_path / "other" / "seq_000.jsonl").read_bytes() != (synth_dir / "seq_000.jsonl").read_bytes()


def test_train_outputs(trained):
    d, _ = trained
    run = d / "run"
    rows, meta = io.read_csv(run / "history.csv")
    assert len(rows) == 3 and meta["config_sha256"]
    best, last = ckpt.load(run / "best.ckpt"), ckpt.load(run / "last.ckpt")
    assert last.adam_m is not None and last.meta["epoch"] == 3
    assert best.meta["config_hash"] == meta["config_sha256"]


def test_train_deterministic_and_resume(trained, tmp_path):
    d, cfg = trained
    assert main(["train", "--config", str(cfg), str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "history.csv").read_bytes() == (d / "run" / "history.csv").read_bytes()
    assert (tmp_path / "again" / "last.ckpt").read_bytes() == (d / "run" / "last.ckpt").read_bytes()
    # two epochs, then resume for the third
    two = dict(TINY_TRAIN, train=dict(TINY_TRAIN["train"], max_epochs=2))
    c2 = _cfg(tmp_path, "two.json", two)
    assert main(["train", "--config", c2, str(tmp_path / "part")]) == 0
    assert main(["train", "--config", str(cfg), "--resume", str(tmp_path / "part" / "last.ckpt"),
                 str(tmp_path / "part")]) == 0
    a = ckpt.load(tmp_path / "part" / "last.ckpt")
    b = ckpt.load(d / "run" / "last.ckpt")
    for k in b.params:
        np.testing.assert_allclose(a.params[k].value, b.params[k].value, rtol=0, atol=1e-6)


def test_label_and_eval(trained, synth_dir, tmp_path, capsys):
    d, _ = trained
    model = str(d / "run" / "best.ckpt")
    out = tmp_path / "lab.jsonl"
    assert main(["label", model, str(synth_dir / "seq_000.jsonl"), str(out), "--tracklets"]) == 0
    seq = io.read_mpc(out)
    assert len(seq) == 30 and all(f.labels is not None for f in seq.frames)
    rows, _ = io.read_csv(str(out) + ".conf.csv")
    assert len(rows) == 30 and all(0 <= float(r["confidence"]) <= 1 for r in rows)
    capsys.readouterr()
    rep_path = tmp_path / "rep.json"
    assert main(["eval", str(out), str(synth_dir / "seq_000.gt.jsonl"), "--out", str(rep_path)]) == 0
    assert "Acc." in capsys.readouterr().out
    rep = json.loads(rep_path.read_text())
    assert rep["frames"] == 30 and 0 <= rep["acc_mean"] <= 100
    # labelling twice gives identical bytes
    out2 = tmp_path / "lab2.jsonl"
    assert main(["label", model, str(synth_dir / "seq_000.jsonl"), str(out2), "--tracklets"]) == 0
    assert out.read_bytes() == out2.read_bytes()


def test_eval_self_is_perfect(synth_dir, capsys):
    gt = str(synth_dir / "seq_001.gt.jsonl")
    assert main(["eval", str(synth_dir / "seq_001.labels.jsonl"), gt]) == 0
    assert "100.00 ± 0.00" in capsys.readouterr().out


def test_attention_report(trained, synth_dir, tmp_path):
    d, _ = trained
    out = tmp_path / "att"
    assert main(["attention-report", str(d / "run" / "best.ckpt"), str(synth_dir / "seq_000.labels.jsonl"),
                 str(out)]) == 0
    rows, _ = io.read_csv(out / "attention_span.csv")
    assert [r["layer"] for r in rows] == ["1"]
    js = json.loads((out / "attention_span.json").read_text())
    assert js["x"] == [1] and js["y"][0] > 0


def test_errors(tmp_path, capsys, synth_dir):
    assert main(["label", str(tmp_path / "missing.ckpt"), str(synth_dir / "seq_000.jsonl"), str(tmp_path / "o")]) == 2
    assert "checkpoint not found" in capsys.readouterr().err
    cfg = _cfg(tmp_path, "e.json", {"grid": "occlusion", "checkpoint": str(tmp_path / "nope.ckpt")})
    assert main(["experiment", "--config", cfg, str(tmp_path / "x")]) == 2
    assert "soma train" in capsys.readouterr().err
    bad = _cfg(tmp_path, "b.json", {"nosuchkey": 1})
    assert main(["synth", "--config", bad, str(tmp_path / "y")]) == 2
    assert "unknown config keys" in capsys.readouterr().err


def test_threads_env(monkeypatch, tmp_path):
    monkeypatch.setenv("SOMA_THREADS", "lots")
    cfg = _cfg(tmp_path, "t.json", dict(TINY_TRAIN, train={"max_epochs": 1}))
    assert main(["train", "--config", cfg, str(tmp_path / "r")]) == 2
    monkeypatch.setenv("SOMA_THREADS", "3")
    assert main(["train", "--config", cfg, str(tmp_path / "r")]) == 0


def test_experiment_layout_smoke(tmp_path):
    cfg = _cfg(tmp_path, "x.json", {"grid": "occlusion", "n_train": 32, "n_val": 16, "n_test": 16,
                                     "net": TINY_TRAIN["net"], "train": {"max_epochs": 1}})
    assert main(["experiment", "--config", cfg, str(tmp_path / "x")]) == 0
    rows, meta = io.read_csv(tmp_path / "x" / "results.csv")
    assert [r["occlusions"] for r in rows] == ["0", "1", "2", "3", "4", "5", "5"]
    assert (tmp_path / "x" / "results.txt").read_text().startswith("# config_sha256=" + meta["config_sha256"])


def test_config_merge(tmp_path):
    from soma.cli import TRAIN_DEFAULTS, load_config
    cfg = load_config(_cfg(tmp_path, "m.json", {"train": {"max_epochs": 2}, "n_train": 5}), TRAIN_DEFAULTS, seed=9)
    assert cfg["train"] == {**TRAIN_DEFAULTS["train"], "max_epochs": 2}
    assert cfg["n_train"] == 5 and cfg["seed"] == 9 and cfg["net"] == TRAIN_DEFAULTS["net"]
