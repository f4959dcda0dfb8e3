import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manifold_id.errors import DataError
from manifold_id.evaluation import (
    EvalReport,
    VerificationProtocol,
    knn_classify,
    neighbor_agreement,
    pair_scores,
    retrieve,
    roc_curve,
    similarity_heatmap,
    stress,
    tar_at_far,
    verify,
)
from manifold_id.features import FeatureMatrix, distance_matrix


def blobs(classes=4, per=25, gap=50.0, seed=0, d=3):
    rng = np.random.default_rng(seed)
    centers = gap * np.eye(classes, d) if classes <= d else gap * rng.standard_normal((classes, d))
    x = np.repeat(centers, per, axis=0) + rng.standard_normal((classes * per, d))
    return x, np.repeat(np.arange(classes), per)


# -- verification ----------------------------------------------------------------------


def test_hand_roc_points():
    far, tar, thr = roc_curve([0.9, 0.4], [0.6, 0.1])
    np.testing.assert_array_equal(far, [0, 0, 0.5, 0.5, 1])
    np.testing.assert_array_equal(tar, [0, 0.5, 0.5, 1, 1])
    np.testing.assert_array_equal(thr, [np.inf, 0.9, 0.6, 0.4, 0.1])


def test_tar_interpolates_linearly():
    far, tar, _ = roc_curve([0.9, 0.4], [0.6, 0.1])
    # between (0.5, 1) and (1, 1), and the vertical step at far 0 takes the top
    np.testing.assert_allclose(tar_at_far(far, tar, [0.0, 0.25, 0.75]), [0.5, 0.75, 1.0])


def test_separable_clusters_tar_one():
    x, y = blobs()
    rep = verify(x, labels=y, far_targets=(1e-3, 1e-2, 0.1))
    assert all(v == 1.0 for v in rep.tar_at.values())


def test_random_scores_are_chance_level():
    rng = np.random.default_rng(1)
    s = rng.random(20_000)
    same = rng.random(20_000) < 0.5
    far, tar, _ = roc_curve(s[same], s[~same])
    for f in (0.05, 0.2, 0.5, 0.8):
        assert abs(tar_at_far(far, tar, [f])[0] - f) <= 0.02


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_roc_monotone_and_ends_at_one(seed):
    rng = np.random.default_rng(seed)
    g = rng.normal(1, 1, rng.integers(1, 50))
    im = rng.normal(0, 1, rng.integers(1, 50))
    far, tar, _ = roc_curve(np.round(g, 1), np.round(im, 1))
    assert np.all(np.diff(far) >= 0) and np.all(np.diff(tar) >= 0)
    assert (far[-1], tar[-1]) == (1.0, 1.0)


@pytest.mark.parametrize("c", [1e-3, 0.5, 7.0, 1e4])
def test_roc_scale_invariant(c):
    x, y = blobs(gap=2.0, seed=2)
    base = verify(x, labels=y)
    scaled = verify(x * c, labels=y)
    np.testing.assert_array_equal(base.far, scaled.far)
    np.testing.assert_array_equal(base.tar, scaled.tar)


def test_cosine_scores():
    x = np.array([[1.0, 0.0], [0.0, 2.0], [3.0, 0.0]])
    np.testing.assert_allclose(pair_scores(x, np.array([0, 0]), np.array([1, 2]), "cosine"), [0.0, 1.0])
    np.testing.assert_allclose(pair_scores(x, np.array([0]), np.array([1])), [-np.sqrt(5)])
    with pytest.raises(DataError):
        pair_scores(np.zeros((2, 2)), np.array([0]), np.array([1]), "cosine")


def test_protocol_needs_both_pair_kinds():
    with pytest.raises(DataError):
        VerificationProtocol.all_pairs([1, 1, 1])
    with pytest.raises(DataError):
        VerificationProtocol([0], [1], [True])
    with pytest.raises(DataError):
        verify(np.ones((3, 2)))


def test_verify_uses_feature_labels():
    x, y = blobs()
    rep = verify(FeatureMatrix(x, labels=y))
    assert rep.tar_at[0.01] == 1.0


# -- retrieval -------------------------------------------------------------------------


def test_singleton_classes_have_zero_precision():
    x = np.random.default_rng(3).standard_normal((10, 3))
    rep = retrieve(x, x, np.arange(10), np.arange(10), exclude_self=True)
    assert np.all(rep.precision == 0)
    assert rep.mean_average_precision == 0


def test_duplicated_gallery_is_perfect():
    x = np.random.default_rng(4).standard_normal((8, 3))
    rep = retrieve(x, np.repeat(x, 2, axis=0), np.arange(8), np.repeat(np.arange(8), 2))
    np.testing.assert_array_equal(rep.precision, 1.0)
    assert rep.mean_average_precision == 1.0


def test_hand_average_precision():
    # one query; ranked gallery relevance [1, 0, 1] -> AP = (1 + 2/3) / 2
    q = np.zeros((1, 1))
    g = np.array([[1.0], [2.0], [3.0]])
    rep = retrieve(q, g, [0], [0, 1, 0], recall_levels=[0.0, 0.5, 1.0])
    assert rep.mean_average_precision == pytest.approx((1 + 2 / 3) / 2)
    np.testing.assert_allclose(rep.precision, [1.0, 1.0, 2 / 3])


def test_retrieve_errors():
    with pytest.raises(DataError):
        retrieve(np.ones((1, 2)), np.ones((0, 2)), [0], [])
    with pytest.raises(DataError):
        retrieve(np.ones((2, 2)), np.ones((2, 2)), [0], [0, 1])


# -- k-NN -----------------------------------------------------------------------------


def test_knn_test_equals_train():
    x, y = blobs(gap=3.0, seed=5)
    rep = knn_classify(x, y, x, y, k=1)
    assert rep.top1 == 1.0 and rep.top5 == 1.0


def test_knn_interleaved_rings():
    rng = np.random.default_rng(6)
    n = 1000
    radius = np.where(np.arange(n) % 2 == 0, 1.0, 2.0)
    theta = rng.uniform(0, 2 * np.pi, n)
    x = np.column_stack([radius * np.cos(theta), radius * np.sin(theta)]) + 0.05 * rng.standard_normal((n, 2))
    y = (radius == 2.0).astype(int)
    tr = rng.permutation(n) < n // 2
    rep = knn_classify(x[tr], y[tr], x[~tr], y[~tr], k=5)
    assert rep.top1 > 0.95


def test_knn_tie_break_prefers_closer_class():
    train = np.array([[0.0], [3.0]])
    rep = knn_classify(train, [7, 4], np.array([[1.0]]), [7], k=2)
    assert rep.top1 == 1.0


def test_knn_errors():
    with pytest.raises(DataError):
        knn_classify(np.ones((2, 1)), [0, 1], np.ones((1, 1)), [0], k=3)
    with pytest.raises(DataError):
        knn_classify(np.ones((2, 1)), [0, 1], np.ones((1, 1)), [5], k=1)


# -- stress ---------------------------------------------------------------------------


def test_stress_identity_and_collapse():
    x = np.random.default_rng(7).standard_normal((20, 3))
    d = distance_matrix(x)
    assert stress(d, x) == pytest.approx(0.0, abs=1e-12)
    assert stress(d, np.zeros((20, 2))) == 1.0


def test_stress_doubling_three_points():
    y = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 4.0]])
    d = distance_matrix(y)
    # targets 3, 4, 5 against embedded 6, 8, 10: sqrt((9+16+25)/(9+16+25)) = 1
    assert stress(d, 2 * y) == pytest.approx(1.0, abs=1e-15)
    # and against 1.5x: sqrt(0.25) = 0.5
    assert stress(d, 1.5 * y) == pytest.approx(0.5, abs=1e-15)


def test_stress_pairs_form_and_nan_skip():
    y = np.array([[0.0], [1.0], [3.0]])
    assert stress([1.0, 2.0], y, pairs=([0, 1], [1, 2])) == 0.0
    t = distance_matrix(y)
    t[0, 2] = np.nan
    assert stress(t, y) == 0.0
    with pytest.raises(DataError):
        stress(np.zeros((3, 3)), y)
    with pytest.raises(DataError):
        stress([1.0], y, pairs=([0], [5]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_stress_non_negative_and_zero_on_isometry(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((12, 3))
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    d = distance_matrix(x)
    assert stress(d, x @ q + rng.standard_normal(3)) < 1e-12
    assert stress(d, rng.standard_normal((12, 2))) >= 0


# -- heatmap / agreement ----------------------------------------------------------------------


def test_one_hot_heatmap_is_block_diagonal():
    classes, per = 10, 10
    labels = np.repeat(np.arange(classes), per)
    x = np.eye(classes)[labels] * np.random.default_rng(8).uniform(0.5, 2, (classes * per, 1))
    h = similarity_heatmap(x, labels, classes, per)
    assert h.matrix.shape == (100, 100)
    block = np.kron(np.eye(classes), np.ones((per, per)))
    np.testing.assert_allclose(h.matrix, block, atol=1e-12)
    assert h.separability == pytest.approx(1.0)


def test_heatmap_groups_first_classes(tmp_path):
    x, y = blobs(classes=4, per=5, seed=9)
    h = similarity_heatmap(x[::-1], y[::-1], classes=3, per_class=4)
    np.testing.assert_array_equal(h.labels, np.repeat([0, 1, 2], 4))
    h.to_csv(tmp_path / "h.csv")
    assert np.loadtxt(tmp_path / "h.csv", delimiter=",").shape == (12, 12)
    with pytest.raises(DataError):
        similarity_heatmap(x, y, classes=5, per_class=5)


def test_neighbor_agreement():
    x = np.random.default_rng(10).standard_normal((60, 3))
    assert neighbor_agreement(x, 3 * x + 1, k=5) == 1.0
    # reversing a line keeps neighborhoods; shuffling destroys them
    line = np.arange(30.0)[:, None]
    assert neighbor_agreement(line, -line, k=2) == 1.0
    assert neighbor_agreement(line, np.random.default_rng(0).permutation(30)[:, None].astype(float), k=2) < 0.5
    with pytest.raises(DataError):
        neighbor_agreement(x, x[:10])


# -- report ------------------------------------------------------------------------------------


def test_report_merge_and_exports(tmp_path):
    x, y = blobs()
    rep = verify(x, labels=y).merge(retrieve(x, x, y, y, exclude_self=True))
    rep.stress = 0.1
    d = json.loads(rep.to_json(tmp_path / "r.json", include_runtime=False))
    assert set(d) == {"tar_at_far", "mean_average_precision", "top1", "top5", "stress", "roc_points"}
    rep.roc_csv(tmp_path / "roc.csv")
    rep.pr_csv(tmp_path / "pr.csv")
    assert (tmp_path / "roc.csv").read_text().startswith("far,tar\n0.0,0.0\n")
    assert (tmp_path / "pr.csv").read_text().splitlines()[0] == "recall,precision"
    assert "verify_s" in rep.runtime and "retrieve_s" in rep.runtime
    assert isinstance(EvalReport().to_dict(), dict)
