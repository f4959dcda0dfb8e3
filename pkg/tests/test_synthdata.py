import math

import numpy as np
import pytest
from scipy import integrate

from manifold_id.errors import DataError
from manifold_id.features import distance_matrix
from manifold_id.graph import build_knn_graph, geodesic_distances
from manifold_id.idest import build_distribution
from manifold_id.synthdata import (
    ManifoldSpec,
    analytic_geodesic_pdf,
    class_labels,
    generate,
    random_frame,
    sample_hypersphere_distances,
    total_variation,
)


def test_hypersphere_rows_are_unit():
    x = generate(ManifoldSpec("hypersphere", 10_000, 3, 2, seed=0)).features.values()
    np.testing.assert_allclose(np.linalg.norm(x, axis=1), 1.0, atol=1e-6)


def test_hypersphere_padding_and_rotation_preserve_norms():
    for emb in ("pad", "rotation"):
        man = generate(ManifoldSpec("hypersphere", 500, 64, 5, seed=1, embedding=emb))
        np.testing.assert_allclose(np.linalg.norm(man.features.values(), axis=1), 1.0, atol=1e-6)
        assert man.frame.shape == (64, 6)
    pad = generate(ManifoldSpec("hypersphere", 50, 10, 2, embedding="pad")).features.values()
    assert np.all(pad[:, 3:] == 0)


def test_swiss_roll_scale_and_coordinates():
    man = generate(ManifoldSpec("swiss-roll", 2000, 3, seed=7))
    assert man.features.n == 2000
    t, h = man.coords.T
    assert t.min() >= 1.5 * np.pi and t.max() <= 4.5 * np.pi
    assert h.min() >= 0 and h.max() <= 21
    np.testing.assert_allclose(man.base, np.column_stack([t * np.cos(t), h, t * np.sin(t)]))


def test_swiss_roll_fixes_dimension():
    assert ManifoldSpec("swiss_roll", 10, 3).m == 2
    with pytest.raises(DataError):
        ManifoldSpec("swiss_roll", 10, 3, m=3)


def test_gaussian_rank_two_before_rotation_noise():
    man = generate(ManifoldSpec("gaussian", 5000, 3, 2, seed=2))
    ev = np.linalg.eigvalsh(np.cov(man.base @ man.frame.T, rowvar=False))
    assert ev[0] < 1e-9
    assert ev[1] > 0.5


def test_clustered_labels_and_separation():
    man = generate(ManifoldSpec("clustered", 400, 32, 4, seed=3, classes=8, within_sigma=0.1))
    y = man.features.labels
    np.testing.assert_array_equal(np.bincount(y), [50] * 8)
    d = distance_matrix(man.features.values())
    same = y[:, None] == y[None, :]
    off = ~np.eye(len(y), dtype=bool)
    assert d[same & off].mean() < d[~same].mean()


def test_class_labels_blocks():
    np.testing.assert_array_equal(class_labels(6, 3), [0, 0, 1, 1, 2, 2])


def test_seeded_determinism():
    for kind, m in (("hypersphere", 3), ("gaussian", 3), ("swiss_roll", None), ("clustered", 3)):
        a = generate(ManifoldSpec(kind, 100, 8, m, seed=5)).features
        b = generate(ManifoldSpec(kind, 100, 8, m, seed=5)).features
        c = generate(ManifoldSpec(kind, 100, 8, m, seed=6)).features
        assert a == b
        assert a != c


def test_invalid_specs():
    with pytest.raises(DataError):
        ManifoldSpec("torus", 10, 3, 2)
    with pytest.raises(DataError):
        ManifoldSpec("hypersphere", 10, 3, 3)
    with pytest.raises(DataError):
        ManifoldSpec("hypersphere", 10, 3)
    with pytest.raises(DataError):
        ManifoldSpec("hypersphere", 0, 3, 2)


def test_random_frame_orthonormal():
    q = random_frame(20, 5, np.random.default_rng(0))
    np.testing.assert_allclose(q.T @ q, np.eye(5), atol=1e-12)


def test_mean_arc_length_near_half_pi():
    x = generate(ManifoldSpec("hypersphere", 10_000, 12, 4, seed=4)).features.values()
    d = distance_matrix(x[:1000], x, "arc-length")
    mask = np.arange(10_000)[None, :] != np.arange(1000)[:, None]
    assert abs(d[mask].mean() - math.pi / 2) / (math.pi / 2) < 0.02


# -- analytic laws --------------------------------------------------------------------


def test_sphere_m2_is_half_sin():
    r = np.linspace(0, np.pi, 9)
    np.testing.assert_allclose(analytic_geodesic_pdf("hypersphere", r, 2), 0.5 * np.sin(r), atol=1e-15)


def test_sphere_m1_is_uniform():
    np.testing.assert_allclose(analytic_geodesic_pdf("hypersphere", [0.0, 1.0, 3.0], 1), 1 / np.pi)


@pytest.mark.parametrize("m", [1, 2, 5, 16])
def test_sphere_law_normalized(m):
    val, _ = integrate.quad(lambda r: analytic_geodesic_pdf("hypersphere", r, m), 0, np.pi)
    assert val == pytest.approx(1.0, abs=1e-9)


def test_gaussian_law_normalized_with_mode():
    val, _ = integrate.quad(lambda r: analytic_geodesic_pdf("gaussian", r, 4, 0.7), 0, np.inf)
    assert val == pytest.approx(1.0, abs=1e-9)
    r = np.linspace(0.01, 5, 5000)
    mode = r[np.argmax(analytic_geodesic_pdf("gaussian", r, 4, 0.7))]
    assert mode == pytest.approx(np.sqrt(2) * 0.7 * np.sqrt(3), abs=2e-3)


def test_out_of_support():
    with pytest.raises(DataError):
        analytic_geodesic_pdf("hypersphere", [4.0], 2)
    with pytest.raises(DataError):
        analytic_geodesic_pdf("gaussian", [-1.0], 2)
    with pytest.raises(DataError):
        analytic_geodesic_pdf("swiss_roll", [1.0], 2)


def test_sampler_matches_law():
    r = sample_hypersphere_distances(3, 200_000, seed=0)
    d = build_distribution(r, bins=60)
    tv = total_variation(d.density, analytic_geodesic_pdf("hypersphere", d.centers, 3), d.widths)
    assert tv < 0.01


def test_s2_geodesic_histogram_matches_law():
    x = generate(ManifoldSpec("hypersphere", 4000, 3, 2, seed=9)).features
    s = geodesic_distances(build_knn_graph(x, 10), n_sources=500)
    d = build_distribution(s, bins=40)
    # graph paths overestimate arcs by a few percent, so compare shapes on
    # the unit sphere's support
    tv = total_variation(d.density, analytic_geodesic_pdf("hypersphere", np.minimum(d.centers, np.pi), 2), d.widths)
    assert tv < 0.05


def test_total_variation_bounds():
    w = np.full(4, 0.25)
    p = np.array([1.0, 1.0, 1.0, 1.0])
    assert total_variation(p, p, w) == 0
    assert total_variation([4.0, 0, 0, 0], [0, 0, 0, 4.0], w) == 1.0
