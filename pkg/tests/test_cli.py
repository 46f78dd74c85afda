from __future__ import annotations

import math
import subprocess
import sys

import numpy as np
import pytest
from conftest import chain_model

from pnc.cli import main, parse_var_spec
from pnc.data import synthesize, write_idx
from pnc.errors import QueryError
from pnc.model import Model
from pnc.oracle import enumerate_joint, oracle_marginal_at
from pnc.persistence import Config, parse_config, save_checkpoint
from pnc.structure import build_1d_structure, build_2d_structure

TINY = """\
layout = 2d
height = 2
width = 4
components = 3
categories = 2
learning_rate = 0.05
batch_size = 10
epochs = 2
"""


@pytest.fixture
def workdir(tmp_path):
    gen = chain_model(8, "neural", seed=9, scale=1.5)
    d = synthesize(gen, 40, seed=0, shape=(2, 4))
    write_idx(tmp_path / "img.idx", d.images)
    write_idx(tmp_path / "lab.idx.gz", (d.flat().sum(axis=1) > 4).astype(np.uint8))
    (tmp_path / "tiny.cfg").write_text(TINY)
    return tmp_path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out.splitlines(), err


def kv(line):
    return dict(item.split("=", 1) for item in line.split())


def test_train_writes_checkpoint_and_trace(workdir, capsys):
    code, lines, _ = run(capsys, "train", "--config", workdir / "tiny.cfg",
                         "--images", workdir / "img.idx", "--out", workdir / "m.ckpt")
    assert code == 0
    records = [kv(ln) for ln in lines if ln.startswith("epoch=")]
    assert [(r["epoch"], r["split"]) for r in records] == [
        ("1", "train"), ("1", "val"), ("2", "train"), ("2", "val")]
    assert all(r["acc"] == "na" for r in records)
    assert (workdir / "m.ckpt").exists()
    assert lines[-1].startswith("checkpoint=")


def test_train_is_deterministic(workdir, capsys):
    outs = []
    for name in ("a.ckpt", "b.ckpt"):
        code, lines, _ = run(capsys, "train", "--config", workdir / "tiny.cfg", "--seed", 5,
                             "--images", workdir / "img.idx", "--out", workdir / name)
        assert code == 0
        outs.append([ln for ln in lines if ln.startswith("epoch=")])
    assert outs[0] == outs[1]
    assert (workdir / "a.ckpt").read_bytes() == (workdir / "b.ckpt").read_bytes()


def test_cross_entropy_without_labels(workdir, capsys):
    (workdir / "ce.cfg").write_text(TINY + "objective = cross_entropy\nnum_classes = 2\n")
    code, lines, err = run(capsys, "train", "--config", workdir / "ce.cfg",
                           "--images", workdir / "img.idx", "--out", workdir / "x.ckpt")
    assert code == 3 and lines == []
    assert "labels" in err
    code, lines, _ = run(capsys, "train", "--config", workdir / "ce.cfg", "--images",
                         workdir / "img.idx", "--labels", workdir / "lab.idx.gz",
                         "--out", workdir / "x.ckpt")
    assert code == 0
    assert all(kv(ln)["acc"] != "na" for ln in lines if ln.startswith("epoch="))


def test_config_error_exit(workdir, capsys):
    (workdir / "bad.cfg").write_text("nu = -1\n")
    code, _, err = run(capsys, "train", "--config", workdir / "bad.cfg",
                       "--images", workdir / "img.idx", "--out", workdir / "x.ckpt")
    assert code == 2 and "line 1" in err


def test_data_error_exit(workdir, capsys):
    code, _, _ = run(capsys, "train", "--config", workdir / "tiny.cfg",
                     "--images", workdir / "lab.idx.gz", "--out", workdir / "x.ckpt")
    assert code == 3


def uniform_checkpoint(path):
    m = Model(build_1d_structure(8, 2, 2), num_categories=2)
    for v in m.params.values():
        v[...] = 0.0
    save_checkpoint(m, path)
    return m


def test_eval_uniform(tmp_path, capsys):
    uniform_checkpoint(tmp_path / "u.ckpt")
    x = np.random.default_rng(0).integers(0, 2, size=(5, 1, 8))
    write_idx(tmp_path / "x.idx", x)
    code, lines, _ = run(capsys, "eval", "--checkpoint", tmp_path / "u.ckpt",
                         "--images", tmp_path / "x.idx")
    assert code == 0
    for i, ln in enumerate(lines[:-1]):
        rec = kv(ln)
        assert rec["sample"] == str(i)
        assert float(rec["logp"]) == pytest.approx(-8 * math.log(2), abs=1e-12)
    assert float(kv(lines[-1])["bpd"]) == pytest.approx(1.0, abs=1e-12)


def test_eval_empty(tmp_path, capsys):
    uniform_checkpoint(tmp_path / "u.ckpt")
    write_idx(tmp_path / "e.idx", np.zeros((0, 1, 8), np.uint8))
    code, lines, _ = run(capsys, "eval", "--checkpoint", tmp_path / "u.ckpt",
                         "--images", tmp_path / "e.idx")
    assert code == 0 and lines == ["bpd=na"]


def test_eval_checkpoint_errors(tmp_path, capsys):
    (tmp_path / "junk.ckpt").write_bytes(b"PNC1" + b"\0" * 50)
    write_idx(tmp_path / "x.idx", np.zeros((1, 1, 8), np.uint8))
    code, lines, _ = run(capsys, "eval", "--checkpoint", tmp_path / "junk.ckpt",
                         "--images", tmp_path / "x.idx")
    assert code == 3 and lines == []
    uniform_checkpoint(tmp_path / "u.ckpt")
    write_idx(tmp_path / "y.idx", np.zeros((1, 3, 3), np.uint8))
    code, _, _ = run(capsys, "eval", "--checkpoint", tmp_path / "u.ckpt",
                     "--images", tmp_path / "y.idx")
    assert code == 3


@pytest.fixture
def grid_ckpt(tmp_path):
    m = Model(build_2d_structure(4, 4, 2, 2), num_categories=2, seed=0)
    m.randomize(np.random.default_rng(1))
    save_checkpoint(m, tmp_path / "g.ckpt")
    x = np.random.default_rng(2).integers(0, 2, size=(4, 16))
    np.savetxt(tmp_path / "ev.txt", x, fmt="%d")
    return m, x, tmp_path


def test_marginal_lower_half_matches_oracle(grid_ckpt, capsys):
    m, x, d = grid_ckpt
    code, lines, _ = run(capsys, "marginal", "--checkpoint", d / "g.ckpt",
                         "--evidence-file", d / "ev.txt", "--marginalize", "ranks:9-16")
    assert code == 0
    got = [float(kv(ln)["logp"]) for ln in lines]
    expect = oracle_marginal_at(enumerate_joint(m), x, range(8, 16))
    np.testing.assert_allclose(got, expect, atol=1e-9)


def test_marginal_all(grid_ckpt, capsys):
    _, _, d = grid_ckpt
    code, lines, _ = run(capsys, "marginal", "--checkpoint", d / "g.ckpt",
                         "--evidence-file", d / "ev.txt", "--marginalize", "all")
    assert code == 0 and [kv(ln)["logp"] for ln in lines] == ["0.0"] * 4


def test_marginal_rejects_non_suffix(grid_ckpt, capsys):
    _, _, d = grid_ckpt
    code, lines, err = run(capsys, "marginal", "--checkpoint", d / "g.ckpt",
                           "--evidence-file", d / "ev.txt", "--marginalize", "vars:1")
    assert code == 4 and lines == []
    assert "variable 0" in err


def test_var_specs():
    s = build_2d_structure(4, 4, 2, 2)
    assert parse_var_spec("ranks:9-16", s) == set(range(8, 16))
    assert parse_var_spec("ranks:3", s) == {4}
    assert parse_var_spec("vars:3,7-8", s) == {2, 6, 7}
    assert parse_var_spec("none", s) == set()
    assert parse_var_spec("all", s) == set(range(16))
    for bad in ("ranks:0-3", "rows:1", "vars:a", "ranks:5-2", "vars:17"):
        with pytest.raises(QueryError):
            parse_var_spec(bad, s)


def test_classify(workdir, capsys):
    (workdir / "ce.cfg").write_text(TINY + "objective = cross_entropy\nnum_classes = 2\n")
    run(capsys, "train", "--config", workdir / "ce.cfg", "--images", workdir / "img.idx",
        "--labels", workdir / "lab.idx.gz", "--out", workdir / "c.ckpt")
    code, lines, _ = run(capsys, "classify", "--checkpoint", workdir / "c.ckpt",
                         "--images", workdir / "img.idx", "--labels", workdir / "lab.idx.gz")
    assert code == 0
    rows = [kv(ln) for ln in lines if ln.startswith("sample=")]
    assert len(rows) == 40
    for r in rows:
        p = [float(v) for v in r["posterior"].split(",")]
        assert sum(p) == pytest.approx(1.0, abs=1e-12)
        assert int(r["pred"]) == int(np.argmax(p))
    assert lines[-1].startswith("acc=")


def test_classify_generative_model(tmp_path, capsys):
    uniform_checkpoint(tmp_path / "u.ckpt")
    write_idx(tmp_path / "x.idx", np.zeros((1, 1, 8), np.uint8))
    code, _, _ = run(capsys, "classify", "--checkpoint", tmp_path / "u.ckpt",
                     "--images", tmp_path / "x.idx")
    assert code == 4


SMALL = "layout = 1d\nnum_vars = 8\ncomponents = 3\ncategories = 2\n"


def test_validate_fresh_model(tmp_path, capsys):
    (tmp_path / "s.cfg").write_text(SMALL)
    code, lines, _ = run(capsys, "validate", "--config", tmp_path / "s.cfg", "--seeds", 2)
    assert code == 0
    checks = [kv(ln) for ln in lines]
    assert [c["check"] for c in checks] == ["normalization", "marginal", "gradient"] * 2
    assert all(c["status"] == "pass" for c in checks)


def test_validate_zero_seeds(tmp_path, capsys):
    (tmp_path / "s.cfg").write_text(SMALL)
    code, lines, _ = run(capsys, "validate", "--config", tmp_path / "s.cfg", "--seeds", 0)
    assert code == 0 and lines == []


def test_validate_negative_control():
    from pnc.checks import run_checks

    m = chain_model(8, "neural", seed=1)
    m.normalize_weights = False
    results = {r.name: r for r in run_checks(m, 0)}
    assert not results["normalization"].passed


def test_validate_checkpoint_and_exit_code(tmp_path, capsys, monkeypatch):
    m = chain_model(8, "plain", seed=2)
    save_checkpoint(m, tmp_path / "p.ckpt")
    code, lines, _ = run(capsys, "validate", "--checkpoint", tmp_path / "p.ckpt", "--seeds", 1)
    assert code == 0 and len(lines) == 3

    import pnc.checks

    real = pnc.checks.check_normalization

    def broken(model, seed=0):
        model.normalize_weights = False
        return real(model, seed)

    monkeypatch.setattr(pnc.checks, "check_normalization", broken)
    m2 = chain_model(8, "plain", seed=2)
    for i in m2.structure.internal_layers:
        m2.params[f"layer{i}.sum"] += 2.0
    save_checkpoint(m2, tmp_path / "q.ckpt")
    code, lines, _ = run(capsys, "validate", "--checkpoint", tmp_path / "q.ckpt", "--seeds", 1)
    assert code == 5
    assert "status=fail" in lines[0]


def test_validate_too_large(capsys):
    code, _, err = run(capsys, "validate", "--config", "/dev/null", "--seeds", 1)
    assert code == 3 and "too large" in err


def test_gradcheck(tmp_path, capsys):
    (tmp_path / "s.cfg").write_text(SMALL + "layer_kind = quotient\n")
    code, lines, _ = run(capsys, "gradcheck", "--config", tmp_path / "s.cfg", "--seed", 3)
    assert code == 0
    assert lines[-1].startswith("status=pass")
    assert {kv(ln)["group"] for ln in lines[:-1]} == set(
        parse_config(SMALL + "layer_kind = quotient\n").build_model().params)


def test_needs_exactly_one_source(tmp_path, capsys):
    code, _, _ = run(capsys, "validate", "--seeds", 1)
    assert code == 2


def test_entry_point_threads(tmp_path):
    cfg = Config(layout="1d", num_vars=4, components=2, categories=2)
    save_checkpoint(cfg.build_model(), tmp_path / "m.ckpt", cfg)
    write_idx(tmp_path / "x.idx", np.zeros((2, 1, 4), np.uint8))
    proc = subprocess.run([sys.executable, "-m", "pnc.cli", "--threads", "1", "eval",
                           "--checkpoint", str(tmp_path / "m.ckpt"),
                           "--images", str(tmp_path / "x.idx")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.splitlines()[-1].startswith("bpd=")
    assert proc.stderr == ""
