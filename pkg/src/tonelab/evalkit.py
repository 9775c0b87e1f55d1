"""Quantitative evaluation: region-feature spread metrics, intensity error,
a pluggable reconstruction distance, and a Gabor filter-bank baseline."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage, signal

from tonelab.core import ContractError, as_gray


def _tone_selector(shape, line_mask):
    if line_mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(line_mask)
    if mask.shape != shape:
        raise ContractError("line mask shape mismatch")
    return mask == 1


def summarization(
    features: np.ndarray,
    labels: np.ndarray,
    line_mask: np.ndarray | None = None,
) -> float:
    """Within-region feature spread: per-channel standard deviation inside
    each region, averaged over channels then over regions. Lower is better."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 3 or labels.shape != features.shape[1:]:
        raise ContractError("expected (C, H, W) features aligned with labels")
    tone = _tone_selector(labels.shape, line_mask)
    spreads = []
    for lab in np.unique(labels[tone]):
        sel = (labels == lab) & tone
        if sel.sum() < 2:
            continue
        region = features[:, sel]
        spreads.append(region.std(axis=1).mean())
    return float(np.mean(spreads)) if spreads else 0.0


def distinguishability(
    features: np.ndarray,
    labels: np.ndarray,
    line_mask: np.ndarray | None = None,
) -> float | None:
    """Across-region spread of region-mean features, per channel averaged.

    Returns None for single-region pages (the statistic needs at least two
    regions)."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 3 or labels.shape != features.shape[1:]:
        raise ContractError("expected (C, H, W) features aligned with labels")
    tone = _tone_selector(labels.shape, line_mask)
    means = []
    for lab in np.unique(labels[tone]):
        sel = (labels == lab) & tone
        if not sel.any():
            continue
        means.append(features[:, sel].mean(axis=1))
    if len(means) < 2:
        return None
    stacked = np.stack(means)  # (regions, C)
    return float(stacked.std(axis=0).mean())


def intensity_mae(
    predicted: np.ndarray,
    truth: np.ndarray,
    line_mask: np.ndarray | None = None,
) -> float:
    predicted = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if predicted.shape != truth.shape:
        raise ContractError("intensity maps disagree on shape")
    tone = _tone_selector(predicted.shape, line_mask)
    return float(np.abs(predicted - truth)[tone].mean())


# -- reconstruction distance -------------------------------------------------


def _ssim_mean(x: np.ndarray, y: np.ndarray, sigma: float = 1.5) -> float:
    c1, c2 = 0.01**2, 0.03**2
    mu_x = ndimage.gaussian_filter(x, sigma)
    mu_y = ndimage.gaussian_filter(y, sigma)
    xx = ndimage.gaussian_filter(x * x, sigma) - mu_x * mu_x
    yy = ndimage.gaussian_filter(y * y, sigma) - mu_y * mu_y
    xy = ndimage.gaussian_filter(x * y, sigma) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    return float((num / den).mean())


def _half(x: np.ndarray) -> np.ndarray:
    h, w = x.shape
    x = x[: h - h % 2, : w - w % 2]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def structural_distance(x_hat: np.ndarray, y: np.ndarray, scales: int = 3) -> float:
    """Default perceptual proxy: one minus multiscale structural similarity.

    Not comparable to learned perceptual metrics; identical inputs score
    exactly 0, and heavier structural corruption scores higher.
    """
    a = np.asarray(x_hat, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError("images disagree on shape")
    vals = []
    for _ in range(scales):
        vals.append(_ssim_mean(a, b))
        if min(a.shape) < 16:
            break
        a, b = _half(a), _half(b)
    return float(1.0 - np.mean(vals))


def reconstruction_distance(
    x_hat: np.ndarray,
    x: np.ndarray,
    metric: Callable[[np.ndarray, np.ndarray], float] | None = None,
) -> float:
    """Distance between a reconstruction and its source under a pluggable
    metric (default: :func:`structural_distance`)."""
    metric = metric or structural_distance
    return float(metric(as_gray(x_hat), as_gray(x)))


# -- Gabor wavelet baseline ---------------------------------------------------


@dataclass(frozen=True)
class GaborBank:
    orientations: tuple[float, ...] = (0.0, 30.0, 60.0, 90.0, 120.0, 150.0)
    wavelengths: tuple[float, ...] = (4.0, 8.0, 16.0, 32.0)
    sigma_factor: float = 0.56
    aspect: float = 1.0

    def __post_init__(self):
        if len(self.orientations) < 4 or len(self.wavelengths) < 3:
            raise ContractError("bank needs >= 4 orientations and >= 3 scales")

    @property
    def channels(self) -> int:
        return len(self.orientations) * len(self.wavelengths)


def _gabor_kernels(wavelength: float, theta_deg: float, sigma_factor: float,
                   aspect: float) -> tuple[np.ndarray, np.ndarray]:
    sigma = sigma_factor * wavelength
    half = int(np.ceil(3 * sigma))
    yy, xx = np.mgrid[-half : half + 1, -half : half + 1].astype(np.float64)
    theta = np.deg2rad(theta_deg)
    xr = xx * np.cos(theta) + yy * np.sin(theta)
    yr = -xx * np.sin(theta) + yy * np.cos(theta)
    envelope = np.exp(-(xr**2 + (aspect * yr) ** 2) / (2 * sigma**2))
    norm = envelope.sum()  # responses stay comparable across scales
    cos_k = envelope * np.cos(2 * np.pi * xr / wavelength) / norm
    sin_k = envelope * np.sin(2 * np.pi * xr / wavelength) / norm
    cos_k -= cos_k.mean()  # remove DC so flat images give zero response
    return cos_k, sin_k


def gabor_features(image: np.ndarray, bank: GaborBank = GaborBank()) -> np.ndarray:
    """Gaussian-smoothed magnitude responses, one channel per
    (wavelength, orientation) pair, wavelength-major order. The image is
    mirror-padded so borders do not ring."""
    image = as_gray(image).astype(np.float64)
    channels = []
    for wavelength in bank.wavelengths:
        for theta in bank.orientations:
            cos_k, sin_k = _gabor_kernels(
                wavelength, theta, bank.sigma_factor, bank.aspect
            )
            half = cos_k.shape[0] // 2
            padded = np.pad(image, half, mode="symmetric")
            re = signal.fftconvolve(padded, cos_k, mode="valid")
            im = signal.fftconvolve(padded, sin_k, mode="valid")
            mag = np.hypot(re, im)
            channels.append(ndimage.gaussian_filter(mag, 0.5 * wavelength))
    return np.stack(channels).astype(np.float32)


def adjusted_rand_index(a: np.ndarray, b: np.ndarray) -> float:
    """Chance-corrected agreement between two labelings."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise ContractError("labelings disagree on length")
    n = a.size
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    comb = lambda x: x * (x - 1) / 2.0
    sum_ij = comb(table).sum()
    sum_a = comb(table.sum(axis=1)).sum()
    sum_b = comb(table.sum(axis=0)).sum()
    expected = sum_a * sum_b / comb(n)
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


# -- benchmark over a dataset --------------------------------------------------


@dataclass
class MetricReport:
    summarization: float
    distinguishability: float
    intensity_mae: float
    reconstruction: float
    reconstruction_mse: float
    dataset_id: str
    model_id: str
    pages: int
    baselines: dict

    def __post_init__(self):
        values = [self.summarization, self.distinguishability,
                  self.intensity_mae, self.reconstruction, self.reconstruction_mse]
        if not all(np.isfinite(v) for v in values):
            raise ContractError("metric report must be finite")

    def to_json(self) -> dict:
        return {
            "summarization": self.summarization,
            "distinguishability": self.distinguishability,
            "intensity_mae": self.intensity_mae,
            "reconstruction": self.reconstruction,
            "reconstruction_mse": self.reconstruction_mse,
            "dataset_id": self.dataset_id,
            "model_id": self.model_id,
            "pages": self.pages,
            "baselines": self.baselines,
        }


REPORT_SCHEMA = {
    "summarization": float,
    "distinguishability": float,
    "intensity_mae": float,
    "reconstruction": float,
    "reconstruction_mse": float,
    "dataset_id": str,
    "model_id": str,
    "pages": int,
    "baselines": dict,
}


def validate_report(doc: dict) -> None:
    for key, kind in REPORT_SCHEMA.items():
        if key not in doc:
            raise ContractError(f"report missing key {key}")
        value = doc[key]
        if kind is float and isinstance(value, int):
            value = float(value)
        if not isinstance(value, kind):
            raise ContractError(f"report key {key} has type {type(value).__name__}")


def run_benchmark(
    model,
    manifest_path,
    max_pages: int | None = None,
    gabor_bank: GaborBank = GaborBank(),
    metric: Callable | None = None,
) -> tuple[MetricReport, str]:
    """All four metrics for the model plus the spread metrics for the Gabor
    baseline, averaged over the dataset's pages."""
    from tonelab import tonegen

    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    page_dirs = [manifest_path.parent / p["dir"] for p in manifest["pages"]]
    if max_pages:
        page_dirs = page_dirs[:max_pages]

    ours = {"summ": [], "dist": [], "mae": [], "rec": [], "mse": []}
    gabor = {"summ": [], "dist": []}
    for page_dir in page_dirs:
        page = tonegen.load_page(page_dir)
        latent, _ = model.encode_padded(page.image, stochastic=False)
        feats = latent.type_feature
        ours["summ"].append(summarization(feats, page.labels, page.line_mask))
        d = distinguishability(feats, page.labels, page.line_mask)
        if d is not None:
            ours["dist"].append(d)
        ours["mae"].append(
            intensity_mae(latent.intensity, page.intensity, page.line_mask)
        )
        decoded = model.decode(latent)
        ours["rec"].append(reconstruction_distance(decoded, page.image, metric))
        ours["mse"].append(float(np.mean((decoded - page.image) ** 2)))

        gf = gabor_features(page.image, gabor_bank)
        gabor["summ"].append(summarization(gf, page.labels, page.line_mask))
        gd = distinguishability(gf, page.labels, page.line_mask)
        if gd is not None:
            gabor["dist"].append(gd)

    report = MetricReport(
        summarization=float(np.mean(ours["summ"])),
        distinguishability=float(np.mean(ours["dist"])) if ours["dist"] else 0.0,
        intensity_mae=float(np.mean(ours["mae"])),
        reconstruction=float(np.mean(ours["rec"])),
        reconstruction_mse=float(np.mean(ours["mse"])),
        dataset_id=str(manifest_path),
        model_id=getattr(model, "model_id", "unnamed"),
        pages=len(page_dirs),
        baselines={
            "gabor": {
                "summarization": float(np.mean(gabor["summ"])),
                "distinguishability": float(np.mean(gabor["dist"])) if gabor["dist"] else 0.0,
            }
        },
    )
    table = _render_table(report)
    return report, table


def _render_table(report: MetricReport) -> str:
    g = report.baselines["gabor"]
    rows = [
        ("metric", "gabor", "ours"),
        ("summarization", f"{g['summarization']:.4f}", f"{report.summarization:.4f}"),
        ("distinguishability", f"{g['distinguishability']:.4f}",
         f"{report.distinguishability:.4f}"),
        ("intensity_mae", "-", f"{report.intensity_mae:.4f}"),
        ("reconstruction", "-", f"{report.reconstruction:.4f}"),
        ("reconstruction_mse", "-", f"{report.reconstruction_mse:.4f}"),
    ]
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[j]) for j, cell in enumerate(row)))
        if i == 0:
            lines.append("-" * (sum(widths) + 4))
    return "\n".join(lines)
