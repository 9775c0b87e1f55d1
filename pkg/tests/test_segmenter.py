"""GMM fitting, silhouette scoring, page segmentation and PCA rendering."""

import numpy as np
import pytest

from tonelab import segmenter
from tonelab.core import ContractError, LatentMap
from tonelab.segmenter import (
    fit_gmm,
    gmm_assign,
    pca_visualize,
    segment_page,
    silhouette_score,
)


def brute_force_silhouette(points, labels):
    """O(n^2) oracle straight from the definition."""
    n = len(points)
    scores = []
    for i in range(n):
        same = [j for j in range(n) if labels[j] == labels[i] and j != i]
        a = np.mean([np.linalg.norm(points[i] - points[j]) for j in same]) if same else 0.0
        b = np.inf
        for c in set(labels) - {labels[i]}:
            others = [j for j in range(n) if labels[j] == c]
            b = min(b, np.mean([np.linalg.norm(points[i] - points[j]) for j in others]))
        denom = max(a, b)
        scores.append(0.0 if denom == 0 else (b - a) / denom)
    return float(np.mean(scores))


class TestFitGmm:
    def test_k1_closed_form(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(200, 3))
        model = fit_gmm(pts, 1, rng)
        np.testing.assert_allclose(model.means[0], pts.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(
            model.covariances[0], np.cov(pts.T) + 1e-6 * np.eye(3), atol=1e-10
        )
        assert model.weights[0] == 1.0

    def test_two_gaussian_recovery(self):
        rng = np.random.default_rng(1)
        pts = np.concatenate([
            rng.normal((5.0, 0.0, 0.0), 0.1, (400, 3)),
            rng.normal((-5.0, 0.0, 0.0), 0.1, (400, 3)),
        ])
        model = fit_gmm(pts, 2, np.random.default_rng(2))
        centers = model.means[np.argsort(model.means[:, 0])]
        np.testing.assert_allclose(centers[0], (-5, 0, 0), atol=0.1)
        np.testing.assert_allclose(centers[1], (5, 0, 0), atol=0.1)

    def test_log_likelihood_monotone(self):
        rng = np.random.default_rng(3)
        pts = np.concatenate([
            rng.normal((1, 1, 0), 0.6, (150, 3)),
            rng.normal((-1, 0, 1), 0.4, (150, 3)),
            rng.normal((0, -1, -1), 0.5, (150, 3)),
        ])
        model = fit_gmm(pts, 3, np.random.default_rng(4))
        history = model.log_likelihood_history
        assert len(history) >= 2
        assert all(b >= a - 1e-9 for a, b in zip(history, history[1:]))

    def test_weights_form_a_simplex(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(120, 3))
        model = fit_gmm(pts, 4, rng)
        assert abs(model.weights.sum() - 1.0) <= 1e-9
        assert np.all(model.weights >= 0)

    def test_needs_enough_points(self):
        with pytest.raises(ContractError):
            fit_gmm(np.zeros((2, 3)), 5)

    def test_assign_recovers_separated_clusters(self):
        rng = np.random.default_rng(6)
        pts = np.concatenate([
            rng.normal((4, 0, 0), 0.2, (100, 3)),
            rng.normal((-4, 0, 0), 0.2, (100, 3)),
        ])
        model = fit_gmm(pts, 2, np.random.default_rng(7))
        labels = gmm_assign(model, pts)
        assert np.unique(labels[:100]).size == 1
        assert np.unique(labels[100:]).size == 1
        assert labels[0] != labels[-1]


class TestSilhouette:
    def test_two_far_pairs_score_one(self):
        pts = np.array([[0.0, 0, 0], [0, 0, 0], [100, 0, 0], [100, 0, 0]])
        labels = np.array([0, 0, 1, 1])
        assert silhouette_score(pts, labels) == pytest.approx(1.0)

    def test_coincident_points_zero_by_convention(self):
        pts = np.zeros((6, 3))
        labels = np.array([0, 0, 0, 1, 1, 1])
        assert silhouette_score(pts, labels) == 0.0

    def test_single_cluster_undefined(self):
        pts = np.random.default_rng(0).normal(size=(10, 3))
        assert np.isnan(silhouette_score(pts, np.zeros(10, dtype=int)))

    def test_matches_brute_force_200_points(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(200, 3))
        labels = rng.integers(0, 3, 200)
        got = silhouette_score(pts, labels)
        assert got == pytest.approx(brute_force_silhouette(pts, labels), abs=1e-9)

    def test_bounded_on_random_sweeps(self):
        for seed in range(6):
            rng = np.random.default_rng(seed)
            pts = rng.normal(size=(80, 3)) * rng.uniform(0.1, 5)
            labels = rng.integers(0, 4, 80)
            s = silhouette_score(pts, labels)
            assert -1.0 <= s <= 1.0

    def test_subsampling_is_seeded(self):
        rng = np.random.default_rng(2)
        pts = rng.normal(size=(9000, 3))
        labels = rng.integers(0, 3, 9000)
        a = silhouette_score(pts, labels, max_points=500, rng=np.random.default_rng(0))
        b = silhouette_score(pts, labels, max_points=500, rng=np.random.default_rng(0))
        assert a == b


def synthetic_latent(rng, centers, h=48, w=48, noise=0.02):
    """Hand-built latent: vertical bands, one type vector per band."""
    k = len(centers)
    labels = np.minimum((np.arange(w) * k) // w, k - 1)
    labels = np.broadcast_to(labels, (h, w)).copy()
    tf = np.zeros((3, h, w), np.float32)
    for i, center in enumerate(centers):
        sel = labels == i
        tf[:, sel] = np.asarray(center, np.float32)[:, None]
    tf += rng.normal(0, noise, tf.shape).astype(np.float32)
    intensity = np.full((h, w), 0.5, np.float32)
    return LatentMap(intensity, tf), labels


class TestSegmentPage:
    def test_uniform_page_selects_k1(self):
        rng = np.random.default_rng(0)
        latent, _ = synthetic_latent(rng, [(0.3, -0.2, 0.1)], noise=0.01)
        result = segment_page(latent, np.ones((48, 48), np.float32),
                              rng=np.random.default_rng(1))
        assert result.k == 1
        assert result.silhouette is None
        assert np.all(result.labels == 0)

    def test_three_separated_types_recovered(self):
        rng = np.random.default_rng(2)
        centers = [(2, 0, 0), (-2, 1, 0), (0, -2, 1)]
        latent, truth = synthetic_latent(rng, centers, noise=0.05)
        result = segment_page(latent, np.ones((48, 48), np.float32),
                              rng=np.random.default_rng(3))
        assert result.k == 3
        from tonelab.evalkit import adjusted_rand_index

        assert adjusted_rand_index(truth, result.labels) > 0.95

    def test_line_pixels_inherit_nearest_region(self):
        rng = np.random.default_rng(4)
        latent, _ = synthetic_latent(rng, [(2, 0, 0), (-2, 0, 0)], noise=0.05)
        mask = np.ones((48, 48), np.float32)
        mask[:, 23:25] = 0.0
        result = segment_page(latent, mask, rng=np.random.default_rng(5))
        assert result.k == 2
        assert result.labels[0, 23] == result.labels[0, 20]
        assert result.labels[0, 24] == result.labels[0, 30]

    def test_channel_permutation_preserves_partition(self):
        rng = np.random.default_rng(6)
        centers = [(2, 0, -1), (-2, 1, 1)]
        latent, _ = synthetic_latent(rng, centers, noise=0.05)
        mask = np.ones((48, 48), np.float32)
        a = segment_page(latent, mask, rng=np.random.default_rng(7))
        permuted = LatentMap(latent.intensity, latent.type_feature[[2, 0, 1]])
        b = segment_page(permuted, mask, rng=np.random.default_rng(7))
        from tonelab.evalkit import adjusted_rand_index

        assert adjusted_rand_index(a.labels, b.labels) == pytest.approx(1.0)

    def test_deterministic_under_fixed_seed(self):
        rng = np.random.default_rng(8)
        latent, _ = synthetic_latent(rng, [(2, 0, 0), (-2, 0, 0), (0, 2, 0)],
                                     noise=0.1)
        mask = np.ones((48, 48), np.float32)
        a = segment_page(latent, mask, rng=np.random.default_rng(9))
        b = segment_page(latent, mask, rng=np.random.default_rng(9))
        np.testing.assert_array_equal(a.labels, b.labels)
        assert a.k == b.k and a.silhouette == b.silhouette

    def test_small_speckles_merged(self):
        rng = np.random.default_rng(10)
        latent, _ = synthetic_latent(rng, [(2, 0, 0), (-2, 0, 0)], noise=0.05)
        # a 3x3 island of the other type inside band 0
        latent.type_feature[:, 10:13, 5:8] = np.array([-2, 0, 0], np.float32)[:, None, None]
        result = segment_page(latent, np.ones((48, 48), np.float32),
                              rng=np.random.default_rng(11), min_region_px=64)
        island = result.labels[10:13, 5:8]
        surrounding = result.labels[9, 5]
        assert np.all(island == surrounding)

    def test_invalid_k_range(self):
        rng = np.random.default_rng(12)
        latent, _ = synthetic_latent(rng, [(1, 0, 0)])
        with pytest.raises(ContractError):
            segment_page(latent, np.ones((48, 48), np.float32), k_range=(0, 5))


class TestPcaVisualize:
    def test_constant_features_render_mid_gray(self):
        features = np.full((3, 16, 16), 1.7, np.float32)
        out = pca_visualize(features)
        assert out.shape == (16, 16, 3)
        np.testing.assert_allclose(out, 0.5)

    def test_bounded_unit_interval(self):
        rng = np.random.default_rng(0)
        out = pca_visualize(rng.normal(size=(3, 24, 24)).astype(np.float32))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_projection_matches_covariance_eigenvectors(self):
        rng = np.random.default_rng(1)
        # anisotropic cloud with a dominant direction
        base = rng.normal(size=(3, 32, 32)).astype(np.float32)
        base[0] *= 5.0
        flat = base.reshape(3, -1).T
        cov = np.cov(flat.T)
        eigvals, eigvecs = np.linalg.eigh(cov)  # direct oracle
        principal = eigvecs[:, np.argmax(eigvals)]
        out = pca_visualize(base)
        channel0 = out[..., 0].reshape(-1)
        centered = flat - flat.mean(axis=0)
        proj = centered @ principal
        proj01 = (proj - proj.min()) / (proj.max() - proj.min())
        agreement = abs(np.corrcoef(channel0, proj01)[0, 1])
        assert agreement > 0.9999
