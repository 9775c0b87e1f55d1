"""Image and latent data model plus the core pixel-level transforms.

Conventions used throughout the package:

* Gray rasters are ``float32`` arrays of shape ``(H, W)`` with values in
  ``[0, 1]``; 0.0 is black ink, 1.0 is white paper.
* Intensity maps are ``(H, W)`` rasters where 0.0 means pure white tone and
  1.0 means solid black tone (ink coverage fraction).
* Type-feature maps are ``(3, H, W)`` float rasters.
* Label maps are ``(H, W)`` integer rasters; line masks are ``(H, W)``
  with 0 marking structural line pixels and 1 marking tone pixels.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class ContractError(ValueError):
    """An argument violated an operation's contract."""


class PaddingRequiredError(ContractError):
    """Raster dimensions are not divisible as the network requires."""


def as_gray(pixels: np.ndarray) -> np.ndarray:
    arr = np.asarray(pixels, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ContractError(f"gray image must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ContractError("gray image values must lie in [0, 1]")
    return arr


def as_bitonal(pixels: np.ndarray) -> np.ndarray:
    arr = as_gray(pixels)
    if not np.all((arr == 0.0) | (arr == 1.0)):
        raise ContractError("bitonal image may only contain 0.0 and 1.0")
    return arr


def as_intensity(values: np.ndarray) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 2:
        raise ContractError(f"intensity map must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ContractError("intensity values must lie in [0, 1]")
    return arr


def as_type_feature(values: np.ndarray) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ContractError(f"type feature must have shape (3, H, W), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError("type feature must be finite everywhere")
    return arr


def as_labels(labels: np.ndarray, num_labels: int | None = None) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim != 2 or not np.issubdtype(arr.dtype, np.integer):
        raise ContractError("label map must be a 2-D integer array")
    if arr.min() < 0:
        raise ContractError("labels must be non-negative")
    if num_labels is not None and arr.max() >= num_labels:
        raise ContractError(f"label {arr.max()} out of range for {num_labels} labels")
    return arr.astype(np.int32, copy=False)


def as_line_mask(mask: np.ndarray) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ContractError("line mask must be 2-D")
    arr = arr.astype(np.float32, copy=False)
    if not np.all((arr == 0.0) | (arr == 1.0)):
        raise ContractError("line mask values must be 0 or 1")
    return arr


@dataclass
class LatentMap:
    """Per-pixel tone representation: one intensity channel plus three
    unit-scale type channels sharing the same spatial extent."""

    intensity: np.ndarray
    type_feature: np.ndarray

    def __post_init__(self):
        self.intensity = as_intensity(self.intensity)
        self.type_feature = as_type_feature(self.type_feature)
        if self.intensity.shape != self.type_feature.shape[1:]:
            raise ContractError(
                f"intensity {self.intensity.shape} and type feature "
                f"{self.type_feature.shape} disagree on H, W"
            )

    @property
    def height(self) -> int:
        return self.intensity.shape[0]

    @property
    def width(self) -> int:
        return self.intensity.shape[1]

    def stacked(self) -> np.ndarray:
        """All four channels as one (4, H, W) array, intensity first."""
        return np.concatenate([self.intensity[None], self.type_feature], axis=0)

    @staticmethod
    def from_stacked(channels: np.ndarray) -> "LatentMap":
        channels = np.asarray(channels, dtype=np.float32)
        if channels.ndim != 3 or channels.shape[0] != 4:
            raise ContractError(f"expected (4, H, W) channels, got {channels.shape}")
        return LatentMap(intensity=channels[0], type_feature=channels[1:])

    def copy(self) -> "LatentMap":
        return LatentMap(self.intensity.copy(), self.type_feature.copy())


def sinpi01(x: np.ndarray) -> np.ndarray:
    """sin(pi*x) for x in [0, 1], exact at x = 0, 0.5 and 1.

    Reflecting the argument around 0.5 keeps sin(pi*1.0) at exactly zero
    instead of the ~1e-16 residue of the naive evaluation.
    """
    x = np.asarray(x)
    return np.sin(np.pi * np.minimum(x, 1.0 - x))


def scale_type_by_intensity(intensity: np.ndarray, type_feature: np.ndarray) -> np.ndarray:
    """Shrink type channels toward zero at tone extremes.

    Each channel is multiplied pointwise by r = sin(pi * intensity), so the
    type diversity vanishes exactly on pure white and pure black tones and
    peaks at 50% coverage.
    """
    intensity = as_intensity(intensity)
    type_feature = as_type_feature(type_feature)
    if intensity.shape != type_feature.shape[1:]:
        raise ContractError("intensity and type feature shapes disagree")
    r = sinpi01(intensity).astype(np.float32)
    return r[None] * type_feature


def unscale_type_by_intensity(
    intensity: np.ndarray,
    scaled_type: np.ndarray,
    epsilon: float = 1e-4,
) -> np.ndarray:
    """Inverse of :func:`scale_type_by_intensity`.

    Near pure black/white the scale factor is clamped to ``epsilon``; the
    type is mathematically undefined there, so the result is a documented
    clamp, never a division by zero.
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    intensity = as_intensity(intensity)
    scaled_type = as_type_feature(scaled_type)
    if intensity.shape != scaled_type.shape[1:]:
        raise ContractError("intensity and type feature shapes disagree")
    r = np.maximum(sinpi01(intensity), epsilon).astype(np.float32)
    return scaled_type / r[None]


def region_average(feature: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Replace every pixel of every channel by its region mean.

    Regions are the index sets sharing a label. Idempotent by construction.
    """
    feature = as_type_feature(feature) if feature.ndim == 3 and feature.shape[0] == 3 \
        else np.asarray(feature, dtype=np.float32)
    squeeze = False
    if feature.ndim == 2:
        feature = feature[None]
        squeeze = True
    labels = as_labels(labels)
    if labels.shape != feature.shape[1:]:
        raise ContractError("feature and label shapes disagree")
    n = int(labels.max()) + 1
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=n).astype(np.float64)
    out = np.empty_like(feature)
    for c in range(feature.shape[0]):
        sums = np.bincount(flat, weights=feature[c].ravel().astype(np.float64), minlength=n)
        means = sums / np.maximum(counts, 1)
        out[c] = means[flat].reshape(labels.shape).astype(np.float32)
    return out[0] if squeeze else out


def _box_down(u: np.ndarray) -> np.ndarray:
    h, w = u.shape
    u = u[: h - h % 2, : w - w % 2]
    return 0.25 * (u[0::2, 0::2] + u[1::2, 0::2] + u[0::2, 1::2] + u[1::2, 1::2])


def _repeat_up(u: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    up = np.repeat(np.repeat(u, 2, axis=0), 2, axis=1)
    h, w = shape
    if up.shape[0] < h:
        up = np.concatenate([up, up[-1:]], axis=0)
    if up.shape[1] < w:
        up = np.concatenate([up, up[:, -1:]], axis=1)
    return up[:h, :w]


def _tv_sweeps(u, f, smoothness, iterations, window_sigma, e_win=1e-3, e_pt=1e-2):
    """Relaxation sweeps on the data term + smoothness * windowed-relative-TV
    penalty.

    Edge weights combine a pointwise gradient term with a Gaussian-windowed
    signed gradient sum: oscillating texture cancels inside the window and
    gets near-infinite smoothing weight, while a genuine region boundary
    keeps a coherent windowed gradient and survives. Each sweep is a
    diagonally preconditioned (Jacobi) step on the resulting linear system,
    which is a convex combination of the data value and the weighted
    neighbor average, hence unconditionally stable.
    """
    last_delta = 0.0
    for _ in range(iterations):
        gx = np.zeros_like(u)
        gy = np.zeros_like(u)
        gx[:, :-1] = u[:, 1:] - u[:, :-1]
        gy[:-1, :] = u[1:, :] - u[:-1, :]
        wx = 1.0 / ((np.abs(ndimage.gaussian_filter(gx, window_sigma)) + e_win)
                    * (np.abs(gx) + e_pt))
        wy = 1.0 / ((np.abs(ndimage.gaussian_filter(gy, window_sigma)) + e_win)
                    * (np.abs(gy) + e_pt))
        wx[:, -1] = 0.0
        wy[-1, :] = 0.0
        num = f.copy()
        den = np.ones_like(u)
        num[:, :-1] += smoothness * wx[:, :-1] * u[:, 1:]
        den[:, :-1] += smoothness * wx[:, :-1]
        num[:, 1:] += smoothness * wx[:, :-1] * u[:, :-1]
        den[:, 1:] += smoothness * wx[:, :-1]
        num[:-1, :] += smoothness * wy[:-1, :] * u[1:, :]
        den[:-1, :] += smoothness * wy[:-1, :]
        num[1:, :] += smoothness * wy[:-1, :] * u[:-1, :]
        den[1:, :] += smoothness * wy[:-1, :]
        new = num / den
        last_delta = float(np.abs(new - u).max())
        u = new
    return u, last_delta


def tv_smooth(
    image: np.ndarray,
    smoothness: float = 0.015,
    iterations: int = 60,
    window_sigma: float = 5.0,
) -> np.ndarray:
    """Flatten repeating tone patterns while keeping region boundaries.

    Runs :func:`_tv_sweeps` coarse to fine on a two-times-downscaled
    pyramid (cheaper coarse levels get proportionally more sweeps), which
    flattens periods up to ~16 px within the default budget. The output
    mean is re-anchored to the input mean, so global darkening of the input
    moves the output mean by exactly the same amount.
    """
    if smoothness <= 0 or iterations < 1:
        raise ContractError("smoothness and iterations must be positive")
    f = np.asarray(image, dtype=np.float64)
    pyramid = [f]
    while min(pyramid[-1].shape) > 32:
        pyramid.append(_box_down(pyramid[-1]))
    u = pyramid[-1]
    last_delta = 0.0
    for level in range(len(pyramid) - 1, -1, -1):
        fl = pyramid[level]
        if u.shape != fl.shape:
            u = _repeat_up(u, fl.shape)
        level_iters = min(iterations * 4**level, 600)
        u, last_delta = _tv_sweeps(u, fl, smoothness, level_iters, window_sigma)
    if last_delta > 5e-3:
        warnings.warn(
            f"tv_smooth stopped after {iterations} sweeps with residual "
            f"update {last_delta:.2e}; returning best iterate",
            RuntimeWarning,
        )
    u = u + (f.mean() - u.mean())
    return np.clip(u, 0.0, 1.0).astype(np.float32)


def extract_intensity(
    image: np.ndarray,
    smoothness: float = 0.015,
    iterations: int = 60,
) -> np.ndarray:
    """Ink-coverage map of a screened image via TV flattening.

    Returns ``1 - smoothed(image)`` so that white paper maps to 0.0 and
    solid ink to 1.0.
    """
    image = as_gray(image)
    return (1.0 - tv_smooth(image, smoothness=smoothness, iterations=iterations)).astype(
        np.float32
    )


def fallback_line_mask(
    image: np.ndarray,
    max_line_width: int = 3,
    min_length: int | None = None,
) -> np.ndarray:
    """Crude morphological stand-in for a dedicated line extractor.

    Marks as structural lines (0) the thin connected ink strokes whose local
    width is at most ``max_line_width`` and whose spatial extent exceeds
    ``min_length`` (default ``4 * max_line_width``). Screentone dots are
    short, so they stay tone (1).
    """
    image = as_bitonal(image)
    if max_line_width < 1:
        raise ContractError("max_line_width must be positive")
    if min_length is None:
        min_length = 4 * max_line_width
    ink = image == 0.0
    selem = np.ones((max_line_width + 1, max_line_width + 1), dtype=bool)
    wide = ndimage.binary_opening(ink, structure=selem)
    thin = ink & ~wide
    labels, n = ndimage.label(thin, structure=np.ones((3, 3), dtype=int))
    mask = np.ones(image.shape, dtype=np.float32)
    if n == 0:
        return mask
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        extent = max(sl[0].stop - sl[0].start, sl[1].stop - sl[1].start)
        if extent >= min_length:
            mask[(labels == idx)] = 0.0
    return mask
