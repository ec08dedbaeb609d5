import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from poseface.errors import DegenerateScoreError, FoldError, FormatError, ShapeError
from poseface.metrics import (IdentificationProtocol, ScoreSet, auc, class_geometry, eer, kfold_accuracy,
                              orth_probe, orth_probe_features, pca_project, rank1, read_embeddings, roc,
                              tar_at_far, write_embeddings, yaw_bucket)
from poseface.model import ModelDims, build_model

from oracles import (auc_mann_whitney, class_geometry_bruteforce, eer_bisection, kfold_bruteforce, pca_eigh,
                     random_score_instance, rank1_bruteforce, roc_points, tar_at_far_vertices)


def mixed_folds(rng, labels, k):
    """Random fold assignment in which every fold holds both classes (needs k of each)."""
    folds = rng.integers(0, k, len(labels))
    for cls in (True, False):
        idx = rng.permutation(np.flatnonzero(labels == cls))[:k]
        folds[idx] = np.arange(k)
    return folds


# ---------------------------------------------------------------------------
# ROC family
# ---------------------------------------------------------------------------

def test_perfect_separation():
    ss = ScoreSet([0.9, 0.8, 0.7, 0.1, 0.0], [1, 1, 1, 0, 0])
    assert eer(ss) == 0.0 and auc(ss) == 1.0
    for far in (0.0, 1e-6, 0.3, 1.0):
        assert tar_at_far(ss, far).tar == 1.0


def test_identical_scores_are_chance():
    ss = ScoreSet(np.full(10, 0.3), [1, 0] * 5)
    assert auc(ss) == 0.5
    assert eer(ss) == pytest.approx(0.5)


def test_degenerate_label_sets():
    with pytest.raises(DegenerateScoreError):
        auc(ScoreSet([0.1, 0.2], [1, 1]))
    with pytest.raises(ShapeError):
        ScoreSet([0.1], [1, 0])
    with pytest.raises(ValueError):
        tar_at_far(ScoreSet([0.1, 0.2], [1, 0]), 1.5)


def test_roc_vertices_match_oracle():
    rng = np.random.default_rng(0)
    s, l = random_score_instance(rng, 60)
    c = roc(ScoreSet(s, l))
    pts = roc_points(s, l)
    np.testing.assert_allclose(c.far, [p[0] for p in pts], rtol=0, atol=1e-15)
    np.testing.assert_allclose(c.tar, [p[1] for p in pts], rtol=0, atol=1e-15)
    assert c.thresholds[0] == np.inf


def test_200_score_instances_match_oracles():
    rng = np.random.default_rng(1)
    for _ in range(10):
        s, l = random_score_instance(rng, 200)
        ss = ScoreSet(s, l)
        assert abs(auc(ss) - auc_mann_whitney(s, l)) < 1e-9
        assert abs(eer(ss) - eer_bisection(s, l)) < 1e-9
        for far in (0.0, 1e-3, 0.01, 0.1, 0.25, 0.5, 1.0):
            assert abs(tar_at_far(ss, far).tar - tar_at_far_vertices(s, l, far)) < 1e-9


def test_tar_at_far_saturation_flag():
    ss = ScoreSet([0.9, 0.5, 0.4, 0.3, 0.2], [1, 1, 0, 0, 0])
    res = tar_at_far(ss, 1e-6)
    assert res.saturated and res.far == 0.0 and res.tar == 1.0
    assert not tar_at_far(ss, 0.5).saturated
    assert not tar_at_far(ss, 0.0).saturated


@given(st.integers(0, 2 ** 32 - 1))
def test_roc_metric_properties(seed):
    rng = np.random.default_rng(seed)
    s, l = random_score_instance(rng, 80)
    ss = ScoreSet(s, l)
    e, a = eer(ss), auc(ss)
    assert 0.0 <= e <= 1.0 and 0.0 <= a <= 1.0
    tars = [tar_at_far(ss, f).tar for f in np.linspace(0, 1, 21)]
    assert all(x <= y + 1e-15 for x, y in zip(tars, tars[1:]))
    # strictly increasing transform keeps the ordering and hence every ROC quantity
    t = ScoreSet(np.arctan(3 * s) + 2.0, l)
    assert auc(t) == pytest.approx(a, abs=1e-12)
    assert eer(t) == pytest.approx(e, abs=1e-12)


# ---------------------------------------------------------------------------
# k-fold accuracy
# ---------------------------------------------------------------------------

def test_kfold_hand_computed_two_folds():
    # fold 0 trains on {0.6 impostor, 0.7 genuine}: threshold 0.7, held-out accuracy 1.
    # fold 1 trains on {0.9 genuine, 0.4 impostor}: threshold 0.9, rejects the 0.7 genuine, accuracy 1/2.
    ss = ScoreSet([0.9, 0.4, 0.6, 0.7], [True, False, False, True])
    mean, sd = kfold_accuracy(ss, folds=[0, 0, 1, 1])
    assert (mean, sd) == (0.75, 0.25)


def test_kfold_lowest_threshold_on_ties():
    # every threshold in (0.2, 0.8] separates the training fold; the lowest one (0.8) must be used,
    # so the held-out genuine at 0.8 is accepted
    ss = ScoreSet([0.2, 0.8, 0.8, 0.1], [False, True, True, False])
    mean, _ = kfold_accuracy(ss, folds=[0, 0, 1, 1])
    assert mean == 1.0


def test_kfold_perfect_and_errors():
    # every contiguous fold repeats the same separated block, so no held-out score
    # falls inside the gap left by the training folds
    block_s = np.r_[np.linspace(0.6, 1, 5), np.linspace(0, 0.4, 5)]
    block_l = np.r_[np.ones(5, bool), np.zeros(5, bool)]
    assert kfold_accuracy(ScoreSet(np.tile(block_s, 10), np.tile(block_l, 10)), k=10) == (1.0, 0.0)
    s, l = np.sort(block_s)[::-1].repeat(10), np.sort(block_l)[::-1].repeat(10)
    with pytest.raises(FoldError):
        kfold_accuracy(ScoreSet(s, l), k=2)  # contiguous halves are single-class
    with pytest.raises(FoldError):
        kfold_accuracy(ScoreSet(s[:5], l[:5]), k=10)
    with pytest.raises(FoldError):
        kfold_accuracy(ScoreSet(s, l), folds=np.zeros(100))


def test_kfold_chance_level_for_independent_labels():
    rng = np.random.default_rng(3)
    n = 4000
    s = rng.normal(size=n)
    l = np.zeros(n, bool)
    l[rng.permutation(n)[:n // 2]] = True
    mean, _ = kfold_accuracy(ScoreSet(s, l), k=10)
    assert abs(mean - 0.5) < 3 * math.sqrt(0.25 / n)


def test_kfold_matches_bruteforce_oracle():
    rng = np.random.default_rng(4)
    for _ in range(10):
        s, l = random_score_instance(rng, 120)
        k = int(rng.integers(2, min(5, l.sum(), (~l).sum()) + 1))
        folds = mixed_folds(rng, l, k)
        got = kfold_accuracy(ScoreSet(s, l), folds=folds)
        ref = kfold_bruteforce(s.tolist(), l.tolist(), folds.tolist())
        assert abs(got[0] - ref[0]) < 1e-9 and abs(got[1] - ref[1]) < 1e-9


# ---------------------------------------------------------------------------
# rank-1 identification
# ---------------------------------------------------------------------------

def test_yaw_buckets():
    np.testing.assert_array_equal(yaw_bucket([0, 15, 15.1, -45, 61, 90, 95]), [15, 15, 30, 45, 75, 90, 90])


def test_gallery_as_probes_and_one_hot_embeddings():
    rng = np.random.default_rng(5)
    g = rng.normal(size=(6, 4))
    yaw = np.linspace(-90, 90, 6)
    res = rank1(IdentificationProtocol(g, np.arange(6), g, np.arange(6), yaw))
    assert res.overall == 1.0 and all(v == 1.0 for v in res.per_bucket.values())
    eye = np.eye(5)
    res = rank1(IdentificationProtocol(eye, np.arange(5), 3 * eye[[4, 0, 2]], [4, 0, 2], [10, 70, -80]))
    assert (res.overall, res.profile, res.frontal) == (1.0, 1.0, 1.0)


def test_empty_buckets_are_absent():
    eye = np.eye(3)
    res = rank1(IdentificationProtocol(eye, [0, 1, 2], eye[:2], [0, 1], [5.0, 10.0]))
    assert list(res.per_bucket) == [15] and res.profile is None and res.frontal == 1.0


def test_rank1_ties_go_to_lowest_identity():
    gallery = np.array([[1.0, 0.0], [1.0, 0.0]])
    res = rank1(IdentificationProtocol(gallery, [7, 3], [[2.0, 0.0]], [3], [0.0]))
    assert res.overall == 1.0
    with pytest.raises(ValueError):
        IdentificationProtocol(gallery, [3, 3], [[1.0, 0.0]], [3], [0.0])


def test_rank1_matches_bruteforce_oracle():
    rng = np.random.default_rng(6)
    for _ in range(10):
        ids = rng.permutation(40)[:8]
        gallery = rng.normal(size=(8, 5))
        probe_ids = rng.choice(ids, 20)
        row = {int(g): i for i, g in enumerate(ids)}
        probes = gallery[[row[int(p)] for p in probe_ids]] + rng.normal(0, 1.0, size=(20, 5))
        res = rank1(IdentificationProtocol(gallery, ids, probes, probe_ids, rng.uniform(-90, 90, 20)))
        ref = rank1_bruteforce(gallery.tolist(), ids.tolist(), probes.tolist(), probe_ids.tolist())
        assert res.correct.tolist() == ref


@given(st.integers(0, 2 ** 32 - 1))
def test_rank1_invariant_to_positive_rescaling(seed):
    rng = np.random.default_rng(seed)
    g, p = rng.normal(size=(5, 3)), rng.normal(size=(12, 3))
    ids, pid, yaw = np.arange(5), rng.integers(0, 5, 12), rng.uniform(-90, 90, 12)
    a = rank1(IdentificationProtocol(g, ids, p, pid, yaw)).correct
    b = rank1(IdentificationProtocol(g * rng.uniform(0.1, 10, (5, 1)), ids, p * rng.uniform(0.1, 10, (12, 1)),
                                     pid, yaw)).correct
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# feature geometry
# ---------------------------------------------------------------------------

def test_orth_probe_on_orthogonal_heads_is_zero():
    model = build_model(ModelDims(d_in=6, d_b=8, d=3, d_o=3, d_p=3, hidden=(5,)), 4)
    e = np.eye(8)
    model.heads.w_i.data[...] = e[:, :3] * [2.0, 0.5, 1.0]
    model.heads.w_p.data[...] = e[:, 4:7]
    obs = np.random.default_rng(7).normal(size=(10, 6))
    assert orth_probe(model, obs).max < 1e-12


def test_orth_probe_with_shared_heads_hits_one():
    model = build_model(ModelDims(d_in=6, d_b=8, d=3, d_o=3, d_p=3, hidden=(5,)), 4)
    model.heads.w_p.data[...] = model.heads.w_i.data
    obs = np.random.default_rng(8).normal(size=(10, 6))
    assert orth_probe(model, obs).max == pytest.approx(1.0, abs=1e-12)


@given(st.integers(0, 2 ** 32 - 1))
def test_orth_probe_scale_invariance(seed):
    rng = np.random.default_rng(seed)
    F_i, F_p = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
    W_I, W_P = rng.normal(size=(8, 3)), rng.normal(size=(8, 2))
    a = orth_probe_features(F_i, F_p, W_I, W_P)
    b = orth_probe_features(F_i * rng.uniform(0.1, 10, (6, 1)), F_p * rng.uniform(0.1, 10, (6, 1)), W_I, W_P)
    np.testing.assert_allclose(a.matrix, b.matrix, rtol=0, atol=1e-12)
    assert 0.0 <= a.min <= a.max <= 1.0 + 1e-12
    with pytest.raises(ValueError):
        orth_probe_features(F_i[:1], F_p[:1], W_I, W_P)


def test_class_geometry_examples_and_oracle():
    assert class_geometry(np.ones((4, 3)), [0, 0, 1, 1]) == (0.0, 0.0)
    assert class_geometry([[0.0, 0.0], [0.0, 0.0], [2.0, 0.0]], [0, 0, 1]) == (0.0, 2.0)
    with pytest.raises(ValueError):
        class_geometry(np.ones((3, 2)), [1, 1, 1])
    rng = np.random.default_rng(9)
    for _ in range(5):
        x, y = rng.normal(size=(30, 4)), rng.integers(0, 5, 30)
        got, ref = class_geometry(x, y), class_geometry_bruteforce(x.tolist(), y.tolist())
        assert abs(got[0] - ref[0]) < 1e-12 and abs(got[1] - ref[1]) < 1e-12


def test_pca_matches_covariance_eigenvectors():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(50, 6)) * [5, 3, 1, 1, 0.5, 0.1]
    axes = pca_eigh(x, 2)
    axes *= np.sign(axes[np.arange(2), np.argmax(np.abs(axes), axis=1)])[:, None]
    np.testing.assert_allclose(pca_project(x, 2), (x - x.mean(0)) @ axes.T, rtol=0, atol=1e-10)


def test_embedding_file_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    ids, yaw, emb = rng.integers(0, 9, 7), rng.uniform(-90, 90, 7), rng.normal(size=(7, 5))
    path = tmp_path / "emb.bin"
    write_embeddings(path, ids, yaw, emb)
    back = read_embeddings(path)
    assert np.array_equal(back[0], ids) and np.array_equal(back[1], yaw) and np.array_equal(back[2], emb)
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(FormatError):
        read_embeddings(path)
