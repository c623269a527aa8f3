import numpy as np
import pytest

from submoe import ModelConfig, RedundancySpec, capture, gen_synthetic, make_calib
from submoe.cluster import ClusterPlan
from submoe.evaluation import alignment_heatmaps, group_residuals, matrix_csv, output_divergence, write_heatmaps
from submoe.merge import compress_model
from submoe.model import ExpertWeights, MoELayer, MoEStack


def test_identity_divergence_zero(small_model, calib8):
    rep = output_divergence(small_model, small_model, calib8)
    assert rep.end_to_end_rel_error == 0.0
    assert rep.end_to_end_cosine == pytest.approx(1.0, abs=1e-15)
    for entry in rep.layers:
        assert entry["rel_error"] == 0.0
        assert all(v == 0.0 for g in entry["groups"] for v in g["residual"].values())


def test_duplicate_merge_divergence(dup_model, dup_trace, calib8):
    plan = ClusterPlan([[[i, i + 4] for i in range(4)]] * 2, 1, 0.5, 8)
    comp, _ = compress_model(dup_model, plan, dup_trace)
    rep = output_divergence(dup_model, comp, calib8)
    assert rep.end_to_end_rel_error <= 1e-5
    for entry in rep.layers:
        for g in entry["groups"]:
            assert len(g["members"]) == 2
            assert max(g["residual"].values()) <= 1e-10


def test_zero_compressed_model(small_model, calib8):
    cfg = small_model.config
    z = ExpertWeights(np.zeros((12, 8)), np.zeros((12, 8)), np.zeros((8, 12)))
    zero = MoEStack(cfg, [MoELayer(ly.router, [z] * 6) for ly in small_model.layers])
    rep = output_divergence(small_model, zero, calib8, residuals=False)
    for entry in rep.layers:
        assert entry["rel_error"] == pytest.approx(1.0)
        assert entry["cosine"] == 0.0


def test_group_residual_oracle(small_model, calib8):
    # merge experts 0 and 1 by plain averaging and compare against a per-token loop
    from submoe.merge import MergeConfig
    tr = capture(small_model, calib8)
    plan = ClusterPlan([[[0, 1], [2], [3], [4], [5]], [[i] for i in range(6)]], 1, 1.0, 11)
    comp, _ = compress_model(small_model, plan, tr, MergeConfig(v_merge="average"))
    x = calib8.tokens
    res = group_residuals(small_model, comp, 0, x)[0]
    assert res["members"] == [0, 1]
    ly, wm = small_model.layers[0], comp.layers[0].experts[0].up
    vals = []
    for t in range(x.shape[0]):
        logits = ly.router @ x[t]
        top = np.argsort(-logits, kind="stable")[:2]
        g = np.exp(logits[top] - logits[top].max())
        g /= g.sum()
        acc = np.zeros(12)
        for i, gi in zip(top, g):
            if i in (0, 1):
                acc += gi * (ly.experts[i].up - wm) @ x[t]
        vals.append(np.linalg.norm(acc))
    assert res["residual"]["up"] == pytest.approx(np.mean(vals), rel=1e-10)


def test_divergence_monotone_in_noise():
    cfg = ModelConfig(8, 16, 2, 8, 2, seed=1)
    cal = make_calib(8, 128, seed=0)
    errs = []
    for eps in (0.0, 0.01, 0.1):
        m = gen_synthetic(cfg, RedundancySpec(4, eps))
        tr = capture(m, cal)
        plan = ClusterPlan([[[i, i + 4] for i in range(4)]] * 2, 1, 0.5, 8)
        comp, _ = compress_model(m, plan, tr)
        errs.append(output_divergence(m, comp, cal, residuals=False).end_to_end_rel_error)
    assert errs[0] <= errs[1] <= errs[2]


def test_alignment_duplicates(dup_model, dup_trace):
    rep = alignment_heatmaps(dup_model, dup_trace, 0)
    for r in (rep.pre, rep.post):
        assert np.max(np.abs(r - r.T)) <= 1e-12
        np.testing.assert_allclose(np.diag(r), 1.0, atol=1e-9)
    for i in range(4):
        assert rep.pre[i, i + 4] == pytest.approx(1.0, abs=1e-12)
        assert rep.post[i, i + 4] == pytest.approx(1.0, abs=1e-8)


def test_alignment_orthogonal_outputs():
    # expert 0 writes only to coordinate 0, expert 1 only to coordinate 1
    cfg = ModelConfig(2, 2, 1, 2, 1)
    rng = np.random.default_rng(0)
    gate, up = rng.standard_normal((2, 2)), rng.standard_normal((2, 2))
    e0 = ExpertWeights(gate, up, np.array([[1.0, 1.0], [0.0, 0.0]]))
    e1 = ExpertWeights(gate, up, np.array([[0.0, 0.0], [1.0, 1.0]]))
    model = MoEStack(cfg, [MoELayer(np.eye(2), [e0, e1])])
    tr = capture(model, make_calib(2, 50, seed=1))
    rep = alignment_heatmaps(model, tr, 0)
    assert rep.pre[0, 1] == pytest.approx(0.0, abs=1e-12)


def test_heatmap_csv(tmp_path, dup_model, dup_trace):
    rep = alignment_heatmaps(dup_model, dup_trace, 1)
    paths = write_heatmaps(rep, tmp_path)
    assert [p.name for p in paths] == ["layer1_pre.csv", "layer1_post.csv"]
    rows = paths[0].read_text().splitlines()
    assert rows[0] == ",e0,e1,e2,e3,e4,e5,e6,e7"
    assert float(rows[1].split(",")[1]) == rep.pre[0, 0]
    assert matrix_csv(np.eye(1)) == ",e0\ne0,1.0\n"
