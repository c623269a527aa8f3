import json

import pytest

from submoe.cli import main
from submoe.io import load_checkpoint, read_container

GEN = ["--d-model", "8", "--d-expert", "16", "--n-layers", "2", "--n-experts", "8", "--top-k", "2"]


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture
def pipeline(tmp_path):
    p = {k: tmp_path / v for k, v in dict(model="m.smoe", calib="c.smoe", trace="t.smoe", plan="plan.json",
                                           comp="comp.smoe", report="report.json", eval="eval.json").items()}
    assert run("gen", *GEN, "--n-distinct", 4, "--noise", 0, "--seed", 1, "--calib", "synth:256",
               "-o", p["model"], "--calib-out", p["calib"]) == 0
    calib = f"file:{p['calib']}"
    assert run("stats", p["model"], "--calib", calib, "-o", p["trace"]) == 0
    return p, calib


def test_lossless_duplicate_pipeline(pipeline):
    p, calib = pipeline
    assert run("plan", p["model"], p["trace"], "--keep-ratio", 0.5, "-o", p["plan"]) == 0
    plan = json.loads(p["plan"].read_text())
    assert [e["groups"] for e in plan["layers"]] == [[[0, 4], [1, 5], [2, 6], [3, 7]]] * 2
    assert run("merge", p["model"], p["plan"], p["trace"], "-o", p["comp"], "--report", p["report"]) == 0
    report = json.loads(p["report"].read_text())
    assert report["expert_params_after"] * 2 == report["expert_params_before"]
    assert run("eval", p["model"], p["comp"], "--calib", calib, "-o", p["eval"]) == 0
    assert json.loads(p["eval"].read_text())["end_to_end"]["rel_error"] <= 1e-5


def test_identity_merge_bitwise(pipeline):
    p, _ = pipeline
    assert run("plan", p["model"], p["trace"], "--keep-ratio", 1, "-o", p["plan"]) == 0
    assert run("merge", p["model"], p["plan"], p["trace"], "--rank-ratio", 0, "-o", p["comp"]) == 0
    _, a = read_container(p["model"])
    _, b = read_container(p["comp"])
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_factored_merge_and_config_file(pipeline, tmp_path):
    p, _ = pipeline
    cfg = tmp_path / "run.toml"
    cfg.write_text('keep_ratio = 0.5\nrank_ratio = 0.2\nwhiten = true\nstore_factored = true\nalgo = "hier"\n')
    assert run("plan", p["model"], p["trace"], "--config", cfg, "-o", p["plan"]) == 0
    assert run("merge", p["model"], p["plan"], p["trace"], "--config", cfg, "-o", p["comp"],
               "--report", p["report"]) == 0
    comp = load_checkpoint(p["comp"])
    assert comp.layers[0].experts[0].gate.rank == 4  # floor(0.8 * 16*8 / 24)


def test_store_factored_without_rank_is_usage_error(pipeline, capsys):
    p, _ = pipeline
    code = run("merge", p["model"], p["plan"], p["trace"], "--store-factored", "-o", p["comp"])
    assert code == 2
    assert "store-factored" in capsys.readouterr().err


def test_bad_checkpoint_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.smoe"
    bad.write_bytes(b"NOPE" + b"\0" * 20)
    assert run("stats", bad, "-o", tmp_path / "t.smoe") == 1
    assert "magic" in capsys.readouterr().err


def test_inspect_writes_csv(pipeline, tmp_path):
    p, _ = pipeline
    out = tmp_path / "heat"
    assert run("inspect", p["model"], p["trace"], "--layer", 1, "--out-dir", out) == 0
    assert sorted(x.name for x in out.iterdir()) == ["layer1_alignment.json", "layer1_post.csv", "layer1_pre.csv"]


def test_determinism(tmp_path):
    outs = []
    for tag in ("a", "b"):
        d = tmp_path / tag
        d.mkdir()
        run("gen", *GEN, "--n-distinct", 5, "--noise", 0.05, "--seed", 3, "-o", d / "m.smoe")
        run("stats", d / "m.smoe", "--calib", "synth:128", "--seed", 3, "-o", d / "t.smoe")
        run("plan", d / "m.smoe", d / "t.smoe", "--keep-ratio", 0.5, "--seed", 3, "-o", d / "p.json")
        run("merge", d / "m.smoe", d / "p.json", d / "t.smoe", "-o", d / "c.smoe", "--report", d / "r.json")
        run("eval", d / "m.smoe", d / "c.smoe", "--calib", "synth:128", "-o", d / "e.json")
        outs.append({f: (d / f).read_bytes() for f in ("m.smoe", "t.smoe", "p.json", "c.smoe", "r.json", "e.json")})
    assert outs[0] == outs[1]
