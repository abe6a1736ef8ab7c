import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from soma import body as bm
from soma import noise as nm
from soma.core import Frame, MoCapSequence


def _three_sigma_ok(counts, p):
    n = counts.sum()
    sd = np.sqrt(n * p * (1 - p))
    return np.all(np.abs(counts - n * p) <= 3 * sd)


def test_noise_config_validation():
    with pytest.raises(ValueError):
        nm.NoiseConfig(max_occlusions=-1)
    with pytest.raises(ValueError):
        nm.NoiseConfig(noise_sigma=-0.1)
    with pytest.raises(ValueError):
        nm.NoiseConfig(ghost_mode="odd")
    assert nm.noise_config("B+C+G").max_occlusions == 5
    assert nm.noise_config({"preset": "B+G", "max_ghosts": 7}).max_ghosts == 7


def test_sigma_table_per_label(layout):
    sig = {n: 0.001 * (i + 1) for i, n in enumerate(layout.label_set.names)}
    table = nm.NoiseConfig(noise_sigma=sig).sigma_table(layout)
    np.testing.assert_allclose(table, 0.001 * np.arange(1, 13))


def test_jitter_isolated_and_deterministic(layout, body):
    ring = [[] for _ in range(body.n_vertices)]
    out = nm.jitter_layout(layout, ring, np.random.default_rng(0))
    np.testing.assert_array_equal(out.vertex_ids, layout.vertex_ids)
    a = nm.jitter_layout(layout, body.one_ring(), np.random.default_rng(4))
    b = nm.jitter_layout(layout, body.one_ring(), np.random.default_rng(4))
    np.testing.assert_array_equal(a.vertex_ids, b.vertex_ids)


def test_jitter_multinomial(layout, body):
    from soma.core import LabelSet, MarkerLayout
    ring = body.one_ring()
    v = next(i for i, r in enumerate(ring) if len(r) == 5)
    lay = MarkerLayout(LabelSet(("X",)), [v], [0.0])
    rng = np.random.default_rng(11)
    draws = [nm.jitter_layout(lay, ring, rng).vertex_ids[0] for _ in range(10_000)]
    cands = [v] + list(ring[v])
    counts = np.array([draws.count(c) for c in cands])
    assert counts.sum() == 10_000
    assert _three_sigma_ok(counts, 1 / 6)


def test_rotate_globally(body, layout):
    pose = bm.sample_pose(body, np.random.default_rng(2))
    same = nm.rotate_globally(pose, angle=0.0)
    np.testing.assert_allclose(same.theta, pose.theta, atol=1e-12)
    twice = nm.rotate_globally(nm.rotate_globally(pose, angle=np.pi), angle=np.pi)
    R0 = Rotation.from_rotvec(pose.theta[0]).as_matrix()
    np.testing.assert_allclose(Rotation.from_rotvec(twice.theta[0]).as_matrix(), R0, atol=1e-12)
    np.testing.assert_array_equal(twice.theta[1:], pose.theta[1:])


def test_rotation_rotates_marker_cloud(body, layout):
    pose = bm.sample_pose(body, np.random.default_rng(8))
    pose = bm.Pose(pose.theta, np.zeros(3), pose.beta)
    r = 1.234
    X = bm.place_virtual_markers(bm.skin(body, pose), layout)
    Y = bm.place_virtual_markers(bm.skin(body, nm.rotate_globally(pose, angle=r)), layout)
    root = body.rest_joints[0]
    Rz = Rotation.from_euler("z", r).as_matrix()
    np.testing.assert_allclose(Y - root, (X - root) @ Rz.T, atol=1e-12)


def test_rotation_angle_is_uniform(body):
    pose = bm.Pose.identity()
    rng = np.random.default_rng(0)
    angles = []
    for _ in range(6000):
        th = nm.rotate_globally(pose, rng).theta[0]
        angles.append(np.mod(np.arctan2(*Rotation.from_rotvec(th).as_matrix()[[1, 0], 0]), 2 * np.pi))
    counts = np.histogram(angles, bins=6, range=(0, 2 * np.pi))[0]
    assert _three_sigma_ok(counts, 1 / 6)


def test_positional_noise():
    X = np.zeros((4, 3))
    np.testing.assert_array_equal(nm.positional_noise(X, 0.0, np.random.default_rng(0)), X)
    a = nm.positional_noise(X, 0.01, np.random.default_rng(1))
    b = nm.positional_noise(X, 0.01, np.random.default_rng(1))
    np.testing.assert_array_equal(a, b)
    big = nm.positional_noise(np.zeros((10_000, 3)), 0.005, np.random.default_rng(2))
    assert abs(big.std() / 0.005 - 1) < 0.05


def test_ghost_points():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(40, 3))
    f = Frame(pts, labels=np.arange(40))
    assert nm.add_ghost_points(f, 0, rng, 40) is f
    g = nm.add_ghost_points(f, 3, rng, 40)
    assert g.n == 43 and np.all(g.labels[-3:] == 40)
    with pytest.raises(ValueError):
        nm.add_ghost_points(Frame(np.zeros((0, 3))), 2, rng, 0)


def test_ghost_sample_mean():
    rng = np.random.default_rng(5)
    pts = rng.normal(loc=[1.0, -2.0, 0.5], scale=0.3, size=(30, 3))
    ghosts = nm.ghost_samples(pts, 10_000, np.random.default_rng(6))
    std = np.sqrt(np.mean(np.var(pts, axis=0)))
    assert np.all(np.abs(ghosts.mean(axis=0) - np.median(pts, axis=0)) < 3 * std / np.sqrt(10_000))


def test_extreme_ghosts_finite():
    pts = np.random.default_rng(0).normal(size=(12, 3))
    g = nm.ghost_samples(pts, 60, np.random.default_rng(1), mode="extreme")
    assert g.shape == (60, 3) and np.isfinite(g).all()


def test_occlusion():
    rng = np.random.default_rng(0)
    f = Frame(np.arange(15.0).reshape(5, 3), labels=np.arange(5))
    assert nm.occlude_markers(f, 0, rng) is f
    assert nm.occlude_markers(f, 5, rng).n == 0
    with pytest.raises(ValueError):
        nm.occlude_markers(f, 6, rng)
    g = nm.occlude_markers(f, 1, rng, which=[3])
    assert sorted(g.labels.tolist()) == [0, 1, 2, 4]
    assert g.occluded.tolist() == [3]
    np.testing.assert_array_equal(g.points, f.points[[0, 1, 2, 4]])


def test_permutation():
    rng = np.random.default_rng(0)
    one = Frame([[1.0, 2.0, 3.0]], [4], [0])
    p1, _ = nm.permute_points(one, rng)
    np.testing.assert_array_equal(p1.points, one.points)
    f = Frame(np.arange(12.0).reshape(4, 3), [10, 11, 12, 13], [0, 1, 2, 3])
    g, perm = nm.permute_points(f, rng)
    back = g.take(np.argsort(perm))
    np.testing.assert_array_equal(back.points, f.points)
    np.testing.assert_array_equal(back.tracklet_ids, f.tracklet_ids)
    np.testing.assert_array_equal(back.labels, f.labels)


def test_permutation_uniform():
    rng = np.random.default_rng(3)
    f = Frame(np.arange(9.0).reshape(3, 3), labels=[0, 1, 2])
    seen = {}
    for _ in range(720 * 10):
        g, _ = nm.permute_points(f, rng)
        key = tuple(g.labels.tolist())
        seen[key] = seen.get(key, 0) + 1
    assert len(seen) == 6
    assert _three_sigma_ok(np.array(list(seen.values())), 1 / 6)


def _seq(T=6, n=3):
    frames = [Frame(np.full((n, 3), float(t)) + np.arange(n)[:, None], np.arange(n), np.arange(n)) for t in range(T)]
    return MoCapSequence(tuple(frames))


def test_break_tracklets_identity():
    s = _seq()
    assert nm.break_tracklets(s, 0, np.random.default_rng(0)) is s


def test_break_tracklets_partition():
    s = _seq()
    out = nm.break_tracklets(s, 1, np.random.default_rng(2))
    changed = [(t, k) for t, (a, b) in enumerate(zip(s.frames, out.frames))
               for k in range(3) if a.tracklet_ids[k] != b.tracklet_ids[k]]
    assert changed
    t0 = min(t for t, _ in changed)
    k = changed[0][1]
    new_id = out.frames[t0].tracklet_ids[k]
    for t, f in enumerate(out.frames):
        if t < t0:
            assert f.tracklet_ids[k] == k
        else:
            assert f.tracklet_ids[k] == new_id and k not in f.tracklet_ids
        np.testing.assert_array_equal(f.points, s.frames[t].points)


def test_training_corpus_noise_off(body, layout):
    nc = nm.noise_config("off", permute=True)
    data = nm.generate_training_corpus(body, layout, nc, 3, seed=0)
    for f, gt in data:
        assert f.n == layout.M
        np.testing.assert_array_equal(gt[:-1, :-1].sum(axis=0), 1)
        np.testing.assert_array_equal(gt[:-1, :-1].sum(axis=1), 1)
        assert gt[-1].sum() == 0 and gt[:, -1].sum() == 0


def test_noise_off_markers_are_exact(body, layout):
    nc = nm.noise_config("off", permute=False)
    rng = nm.frame_rng(0, 0)
    f = nm.synth_frame(body, layout, nc, rng)
    rng = nm.frame_rng(0, 0)
    beta = bm.sample_shape(rng, 0.0)
    pose = bm.sample_pose(body, rng, 1.0, beta)
    X = bm.place_virtual_markers(bm.skin(body, pose), layout)
    np.testing.assert_allclose(f.points, X, atol=1e-12)


def test_training_corpus_determinism_and_workers(body, layout):
    nc = nm.noise_config("B+C+G")
    a = nm.generate_training_corpus(body, layout, nc, 20, seed=3)
    b = nm.generate_training_corpus(body, layout, nc, 20, seed=3, workers=4)
    for (fa, ga), (fb, gb) in zip(a, b):
        np.testing.assert_array_equal(fa.points, fb.points)
        np.testing.assert_array_equal(ga, gb)


def test_training_corpus_invariants(body, layout):
    nc = nm.noise_config("B+C+G")
    for f, gt in nm.generate_training_corpus(body, layout, nc, 60, seed=9):
        n_ghost = int(np.sum(f.labels == layout.M))
        assert f.n == layout.M - len(f.occluded) + n_ghost
        real = f.labels[f.labels != layout.M]
        assert len(np.unique(real)) == len(real)
        assert sorted(np.nonzero(gt[-1, :-1])[0].tolist()) == sorted(f.occluded.tolist())


def test_occlusion_count_histogram(body, layout):
    nc = nm.noise_config("B+C", jitter=False)
    counts = np.zeros(6)
    for i in range(1200):
        rng = nm.frame_rng(1, i)
        f = nm.synth_frame(body, layout, nc, rng)
        counts[len(f.occluded)] += 1
    assert _three_sigma_ok(counts, 1 / 6)


def test_sequence_tracklets(body, layout):
    nc = nm.noise_config("B+C+G", occlusion_hold=10)
    seq = nm.generate_sequence(body, layout, nc, 2.0, 30.0, seed=1)
    assert len(seq) == 60
    owner = {}
    for f in seq.frames:
        assert len(np.unique(f.tracklet_ids)) == f.n
        for tid, lab in zip(f.tracklet_ids.tolist(), f.labels.tolist()):
            assert owner.setdefault(tid, lab) == lab  # an id never changes label
