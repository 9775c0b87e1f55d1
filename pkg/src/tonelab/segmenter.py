"""Screentone-type segmentation: GMM over unit-scale type features with
silhouette-based cluster-count selection, plus PCA visualization."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from tonelab.core import ContractError, LatentMap, as_line_mask, as_type_feature


@dataclass
class GmmModel:
    k: int
    means: np.ndarray          # (k, d)
    covariances: np.ndarray    # (k, d, d)
    weights: np.ndarray        # (k,)
    log_likelihood_history: list[float] | None = None
    degenerate: bool = False

    def __post_init__(self):
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ContractError("mixture weights must sum to 1")
        for cov in self.covariances:
            if np.linalg.eigvalsh(cov).min() < 1e-8 - 1e-12:
                raise ContractError("covariances must stay positive definite")

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "weights": self.weights.tolist(),
        }


@dataclass
class SegmentationResult:
    labels: np.ndarray
    k: int
    silhouette: float | None
    model: GmmModel


def _component_logpdf(points: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    from scipy.linalg import solve_triangular

    d = points.shape[1]
    chol = np.linalg.cholesky(cov)
    diff = points - mean
    z = solve_triangular(chol, diff.T, lower=True).T
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * (d * np.log(2 * np.pi) + logdet + (z * z).sum(axis=1))


def _kmeanspp_seeds(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    seeds = [points[int(rng.integers(n))]]
    for _ in range(1, k):
        d2 = np.min(
            [((points - s) ** 2).sum(axis=1) for s in seeds], axis=0
        )
        total = d2.sum()
        if total <= 0:
            seeds.append(points[int(rng.integers(n))])
            continue
        probs = d2 / total
        seeds.append(points[int(rng.choice(n, p=probs))])
    return np.stack(seeds)


def fit_gmm(
    points: np.ndarray,
    k: int,
    rng: np.random.Generator | None = None,
    max_iter: int = 200,
    tol: float = 1e-6,
    ridge: float = 1e-6,
) -> GmmModel:
    """Full-covariance EM with k-means++ seeding.

    Runs until the mean log-likelihood improves by less than ``tol`` or the
    iteration cap. A component that degenerates (loses all responsibility)
    is reseeded once; if it degenerates again the model is flagged.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ContractError("points must be (n, d)")
    n, d = points.shape
    if k < 1 or n < k:
        raise ContractError(f"need at least k={k} points, got {n}")
    rng = rng or np.random.default_rng()

    global_cov = np.cov(points.T) if n > 1 else np.eye(d)
    global_cov = np.atleast_2d(global_cov) + ridge * np.eye(d)

    if k == 1:
        mean = points.mean(axis=0)
        return GmmModel(
            k=1,
            means=mean[None],
            covariances=global_cov[None].copy(),
            weights=np.array([1.0]),
            log_likelihood_history=[
                float(_component_logpdf(points, mean, global_cov).mean())
            ],
        )

    means = _kmeanspp_seeds(points, k, rng)
    covs = np.repeat(global_cov[None], k, axis=0)
    weights = np.full(k, 1.0 / k)
    history: list[float] = []
    reseeded = set()
    degenerate = False

    for _ in range(max_iter):
        log_p = np.stack(
            [_component_logpdf(points, means[j], covs[j]) for j in range(k)], axis=1
        )
        log_weighted = log_p + np.log(weights)[None, :]
        log_norm = np.logaddexp.reduce(log_weighted, axis=1)
        history.append(float(log_norm.mean()))
        resp = np.exp(log_weighted - log_norm[:, None])

        counts = resp.sum(axis=0)
        for j in range(k):
            if counts[j] < 1e-10:
                if j in reseeded:
                    degenerate = True
                    warnings.warn(
                        f"GMM component {j} degenerated twice", RuntimeWarning
                    )
                else:
                    reseeded.add(j)
                    means[j] = points[int(rng.integers(n))]
                    covs[j] = global_cov.copy()
                    weights[j] = 1.0 / k
                continue
            means[j] = (resp[:, j : j + 1] * points).sum(axis=0) / counts[j]
            diff = points - means[j]
            covs[j] = (resp[:, j : j + 1] * diff).T @ diff / counts[j]
            covs[j] += ridge * np.eye(d)
        weights = counts / counts.sum()
        if len(history) > 1 and abs(history[-1] - history[-2]) < tol:
            break

    return GmmModel(
        k=k,
        means=means,
        covariances=covs,
        weights=weights,
        log_likelihood_history=history,
        degenerate=degenerate,
    )


def gmm_assign(model: GmmModel, points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    log_p = np.stack(
        [_component_logpdf(points, model.means[j], model.covariances[j])
         for j in range(model.k)],
        axis=1,
    )
    return np.argmax(log_p + np.log(model.weights)[None, :], axis=1).astype(np.int32)


def silhouette_score(
    features: np.ndarray,
    labels: np.ndarray,
    max_points: int = 5000,
    rng: np.random.Generator | None = None,
) -> float:
    """Mean silhouette over points: (b - a) / max(a, b), with the 0/0 -> 0
    convention for coincident points.

    Instances above ``max_points`` are subsampled (seeded) for tractability.
    Single-cluster labelings return NaN: the score is undefined there.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels).ravel()
    if features.shape[0] != labels.shape[0]:
        raise ContractError("features and labels disagree on length")
    uniq = np.unique(labels)
    if uniq.size < 2:
        return float("nan")
    if features.shape[0] > max_points:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(features.shape[0], size=max_points, replace=False)
        features, labels = features[pick], labels[pick]
        uniq = np.unique(labels)
        if uniq.size < 2:
            return float("nan")

    n = features.shape[0]
    sq = (features * features).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * features @ features.T, 0.0)
    dist = np.sqrt(d2)

    scores = np.zeros(n)
    cluster_masks = {c: labels == c for c in uniq}
    for i in range(n):
        own = cluster_masks[labels[i]]
        n_own = own.sum()
        a = dist[i, own].sum() / (n_own - 1) if n_own > 1 else 0.0
        b = np.inf
        for c in uniq:
            if c == labels[i]:
                continue
            b = min(b, dist[i, cluster_masks[c]].mean())
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


def _merge_small_components(labels: np.ndarray, min_region_px: int) -> np.ndarray:
    """Merge connected components smaller than min_region_px into their
    dominant neighboring label."""
    out = labels.copy()
    changed = True
    sweep = 0
    while changed and sweep < 4:
        changed = False
        sweep += 1
        for value in np.unique(out):
            comp, n = ndimage.label(out == value)
            for idx in range(1, n + 1):
                mask = comp == idx
                size = int(mask.sum())
                if size >= min_region_px:
                    continue
                ring = ndimage.binary_dilation(mask) & ~mask
                neighbors = out[ring]
                if neighbors.size == 0:
                    continue
                vals, cnts = np.unique(neighbors, return_counts=True)
                out[mask] = vals[np.argmax(cnts)]
                changed = True
    return out


def segment_page(
    latent: LatentMap,
    line_mask: np.ndarray,
    k_range: tuple[int, int] = (1, 10),
    rng: np.random.Generator | None = None,
    variance_threshold: float = 0.05,
    fit_points: int = 20000,
    min_region_px: int = 64,
) -> SegmentationResult:
    """Cluster non-line pixels by unit-scale type feature.

    Fits one mixture per candidate k on a subsample and keeps the k with the
    best silhouette; k=1 is chosen directly when the features barely vary
    (mean per-channel variance below ``variance_threshold``). Line pixels
    inherit the label of the nearest tone pixel and tiny components merge
    into their dominant neighbor.
    """
    rng = rng or np.random.default_rng(0)
    line_mask = as_line_mask(line_mask)
    k_lo, k_hi = k_range
    if k_lo < 1 or k_hi < k_lo:
        raise ContractError(f"invalid k range {k_range}")
    feats = latent.type_feature
    tone = line_mask == 1.0
    if not tone.any():
        tone = np.ones_like(line_mask, dtype=bool)
    points = feats[:, tone].T.astype(np.float64)  # (n, 3)

    variance = float(points.var(axis=0).mean())
    if variance < variance_threshold or k_hi == 1:
        model = fit_gmm(points[: min(len(points), fit_points)], 1, rng)
        labels = np.zeros(line_mask.shape, dtype=np.int32)
        return SegmentationResult(labels=labels, k=1, silhouette=None, model=model)

    if len(points) > fit_points:
        pick = rng.choice(len(points), size=fit_points, replace=False)
        fit_pts = points[pick]
    else:
        fit_pts = points

    best = None
    for k in range(max(k_lo, 2), k_hi + 1):
        if len(fit_pts) < k:
            break
        model = fit_gmm(fit_pts, k, rng)
        assign = gmm_assign(model, fit_pts)
        if np.unique(assign).size < 2:
            continue
        score = silhouette_score(fit_pts, assign, rng=np.random.default_rng(0))
        if best is None or score > best[0]:
            best = (score, model)
    if best is None:
        model = fit_gmm(fit_pts, 1, rng)
        labels = np.zeros(line_mask.shape, dtype=np.int32)
        return SegmentationResult(labels=labels, k=1, silhouette=None, model=model)

    score, model = best
    dense = gmm_assign(model, points)
    labels = np.zeros(line_mask.shape, dtype=np.int32)
    labels[tone] = dense
    if (~tone).any():
        _, idx = ndimage.distance_transform_edt(~tone, return_indices=True)
        labels = labels[idx[0], idx[1]]
    labels = _merge_small_components(labels, min_region_px)
    # keep labels compact after merging
    remap = {v: i for i, v in enumerate(np.unique(labels))}
    labels = np.vectorize(remap.get)(labels).astype(np.int32)
    return SegmentationResult(
        labels=labels, k=int(np.unique(labels).size), silhouette=float(score),
        model=model,
    )


def pca_visualize(features: np.ndarray, line_mask: np.ndarray | None = None) -> np.ndarray:
    """Project 3-channel features onto their principal components and
    normalize each to [0, 1]; returns (H, W, 3) for saving as RGB."""
    features = as_type_feature(features)
    c, h, w = features.shape
    if line_mask is None:
        tone = np.ones((h, w), dtype=bool)
    else:
        tone = as_line_mask(line_mask) == 1.0
        if not tone.any():
            tone = np.ones((h, w), dtype=bool)
    pts = features[:, tone].T.astype(np.float64)
    mean = pts.mean(axis=0)
    cov = np.cov(pts.T) if pts.shape[0] > 1 else np.zeros((c, c))
    cov = np.atleast_2d(cov)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvecs = eigvecs[:, order]
    flat = features.reshape(c, -1).T.astype(np.float64)
    proj = (flat - mean) @ eigvecs
    tone_proj = (pts - mean) @ eigvecs
    out = np.empty_like(proj)
    for j in range(c):
        lo, hi = tone_proj[:, j].min(), tone_proj[:, j].max()
        if hi - lo < 1e-12:
            out[:, j] = 0.5
        else:
            out[:, j] = (proj[:, j] - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0).reshape(h, w, c).astype(np.float32)
