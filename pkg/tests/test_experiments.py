import math

import numpy as np
import pytest

from soma import experiments as ex
from soma import net
from soma.core import Frame


def _two_pass_std(xs):
    m = sum(xs) / len(xs)
    return math.sqrt(sum((x - m) ** 2 for x in xs) / len(xs))


def test_eval_report_against_hand_computed():
    null = 4
    gt = [np.array([0, 1, 2, 4]), np.array([3, 2]), np.array([0, 1, 2])]
    pred = [np.array([0, 1, 3, 4]), np.array([3, 2]), np.array([4, 4, 2])]
    rep = ex.eval_report(pred, gt, null)
    accs = [3 / 4, 1.0, 1 / 3]
    # frame 0: tp 2 (label 0,1), fp 1 (3), fn 1 (2) -> 2/3; frame 2: tp 1, fp 0, fn 2 -> 0.5
    f1s = [2 / 3, 1.0, 0.5]
    assert rep["frames"] == 3
    assert rep["acc_mean"] == pytest.approx(100 * sum(accs) / 3)
    assert rep["acc_std"] == pytest.approx(100 * _two_pass_std(accs))
    assert rep["f1_mean"] == pytest.approx(100 * sum(f1s) / 3)
    assert rep["f1_std"] == pytest.approx(100 * _two_pass_std(f1s))


def test_eval_report_perfect():
    gt = [np.array([0, 1, 2]), np.array([2, 3])]
    rep = ex.eval_report(gt, gt, 3)
    assert (rep["acc_mean"], rep["acc_std"], rep["f1_mean"], rep["f1_std"]) == (100, 0, 100, 0)
    assert ex.cell(rep["acc_mean"], rep["acc_std"]) == "100.00 ± 0.00"


def test_eval_report_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        ex.eval_report([np.array([0])], [], 2)
    with pytest.raises(ValueError):
        ex.eval_report([], [], 2)


def test_render_table():
    text = ex.render_table([["a", "long header"], ["xyz", "1"]])
    assert text.splitlines() == ["a    long header", "---  -----------", "xyz  1"]


def test_grid_table_shape():
    rows = [{"train": tr, "test": te, "acc_mean": 90.0, "acc_std": 1.0} for tr in ("B", "C") for te in ("B", "C", "D")]
    t = ex.grid_table(rows)
    assert t[0] == ["train \\ test", "B", "C", "D"]
    assert [r[0] for r in t[1:]] == ["B", "C"] and t[1][1] == "90.00 ± 1.00"


def test_span_uniform_and_identity():
    rng = np.random.default_rng(0)
    P = rng.normal(size=(6, 3))
    D = np.linalg.norm(P[:, None] - P[None], axis=-1)
    assert ex.span_from_weights(np.full((6, 6), 1 / 6), D) == pytest.approx(D.mean())
    assert ex.span_from_weights(np.eye(6), D) == 0.0
    # scaling a row does not change its weighted mean distance
    W = rng.random((6, 6))
    W2 = W * np.arange(1, 7)[:, None]
    assert ex.span_from_weights(W2, D) == pytest.approx(ex.span_from_weights(W, D))
    expect = np.mean([(W[i] * D[i]).sum() / W[i].sum() for i in range(6)])
    assert ex.span_from_weights(W, D) == pytest.approx(expect)


def test_canonical_distances(body, layout):
    D = ex.canonical_distances(body, layout)
    assert D.shape == (layout.M, layout.M)
    np.testing.assert_allclose(D, D.T)
    assert np.all(np.diag(D) == 0) and np.all(D[~np.eye(layout.M, dtype=bool)] > 0.01)
    # everything on a human body fits within a couple of metres
    assert D.max() < 2.5


def test_attention_span_per_layer(body, layout):
    cfg = net.NetConfig(n_labels=layout.M, d_model=8, heads=2, layers=3, feature_width=8)
    params = net.init_params(cfg, seed=1)
    from soma import noise as nm
    frames = [f for f, _ in nm.generate_training_corpus(body, layout, nm.noise_config("B+C+G"), 6, seed=3)]
    D = ex.canonical_distances(body, layout)
    spans = ex.attention_span(params, cfg, frames, D)
    assert len(spans) == cfg.layers and all(0 < s < D.max() for s in spans)


def test_attention_span_hand_oracle():
    # one layer, one head: weights known in closed form when all keys share one embedding
    cfg = net.NetConfig(n_labels=3, d_model=4, heads=1, layers=1, feature_width=4)
    params = net.init_params(cfg, seed=0)
    f = Frame(np.zeros((3, 3)), np.arange(3), np.array([2, 0, 1]))
    D = np.array([[0, 1, 2], [1, 0, 3], [2, 3, 0]], dtype=float)
    # identical points give identical rows, so attention is uniform over keys
    assert ex.attention_span(params, cfg, [f], D)[0] == pytest.approx(D.mean())


def test_attention_span_needs_labels():
    cfg = net.NetConfig(n_labels=2, d_model=4, heads=1, layers=1, feature_width=4)
    with pytest.raises(ValueError):
        ex.attention_span(net.init_params(cfg), cfg, [], np.zeros((2, 2)))
    with pytest.raises(ValueError, match="labelled"):
        ex.attention_span(net.init_params(cfg), cfg, [Frame(np.zeros((1, 3)))], np.zeros((2, 2)))


def test_tracklet_lengths():
    from soma.core import LabelSet, MoCapSequence
    frames = (Frame(np.zeros((3, 3)), [1, 2, 7], [0, 1, 2]), Frame(np.zeros((2, 3)), [1, -1], [0, 1]))
    seq = MoCapSequence(frames, 30.0, LabelSet(("a", "b")))
    assert ex.tracklet_lengths(seq, 2) == {1: 2, 2: 1}
    assert ex.min_tracklet_length(seq) == 1
