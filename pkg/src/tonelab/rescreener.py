"""Latent-space editing: swap a region's tone type while keeping its
intensity, or rewrite the intensity while keeping the type."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from tonelab.core import ContractError, LatentMap, as_bitonal
from tonelab.network import ScreenModel
from tonelab.tonegen import ScreentoneSpec, render_screentone

TYPE_ACTIONS = ("keep", "set_vector", "copy_from_region")
INTENSITY_ACTIONS = ("keep", "set_constant", "scale", "offset")


@dataclass
class RegionEdit:
    region: np.ndarray
    type_action: str = "keep"
    type_vector: np.ndarray | None = None
    donor_region: np.ndarray | None = None
    intensity_action: str = "keep"
    intensity_value: float = 0.0

    def __post_init__(self):
        self.region = np.asarray(self.region).astype(bool)
        if self.type_action not in TYPE_ACTIONS:
            raise ContractError(f"unknown type action {self.type_action!r}")
        if self.intensity_action not in INTENSITY_ACTIONS:
            raise ContractError(f"unknown intensity action {self.intensity_action!r}")
        if self.type_action == "keep" and self.intensity_action == "keep":
            raise ContractError("edit must change at least one of type, intensity")
        if self.type_action == "set_vector":
            self.type_vector = np.asarray(self.type_vector, dtype=np.float32).reshape(3)
        if self.type_action == "copy_from_region":
            if self.donor_region is None:
                raise ContractError("copy_from_region needs a donor region")
            self.donor_region = np.asarray(self.donor_region).astype(bool)

    def to_json(self) -> dict:
        d: dict = {
            "type_action": self.type_action,
            "intensity_action": self.intensity_action,
        }
        if self.type_action == "set_vector":
            d["type_vector"] = [float(v) for v in self.type_vector]
        if self.intensity_action != "keep":
            d["intensity_value"] = float(self.intensity_value)
        return d


def apply_edit(latent: LatentMap, edit: RegionEdit) -> LatentMap:
    """Apply one edit, touching only the masked pixels of the affected
    channels; everything else is preserved bit-exactly."""
    mask = edit.region
    if mask.shape != latent.intensity.shape:
        raise ContractError("edit mask does not match latent extent")
    out = latent.copy()
    if not mask.any():
        warnings.warn("edit mask is empty; latent unchanged", RuntimeWarning)
        return out

    if edit.type_action == "set_vector":
        out.type_feature[:, mask] = edit.type_vector[:, None]
    elif edit.type_action == "copy_from_region":
        donor = edit.donor_region
        if donor.shape != mask.shape or not donor.any():
            raise ContractError("donor region empty or mismatched")
        vector = latent.type_feature[:, donor].mean(axis=1).astype(np.float32)
        out.type_feature[:, mask] = vector[:, None]

    if edit.intensity_action != "keep":
        values = out.intensity[mask]
        if edit.intensity_action == "set_constant":
            values = np.full_like(values, edit.intensity_value)
        elif edit.intensity_action == "scale":
            values = values * edit.intensity_value
        else:
            values = values + edit.intensity_value
        out.intensity[mask] = np.clip(values, 0.0, 1.0)
    return out


def replay_edits(latent: LatentMap, edits: list[RegionEdit]) -> LatentMap:
    """Fold a list of edits over a latent, left to right."""
    for edit in edits:
        latent = apply_edit(latent, edit)
    return latent


def recompose(
    edited_latent: LatentMap,
    model: ScreenModel,
    line_image: np.ndarray | None = None,
) -> np.ndarray:
    """Decode an edited latent and overlay the structural lines.

    The overlay is a pointwise minimum, so line ink always wins over tone.
    """
    decoded = model.decode(edited_latent)
    if line_image is None:
        return decoded
    line_image = as_bitonal(line_image)
    if line_image.shape != decoded.shape:
        raise ContractError("line image does not match decoded extent")
    return np.minimum(decoded, line_image)


@dataclass
class PaletteEntry:
    vector: np.ndarray
    spec: ScreentoneSpec
    label: str


def sample_type_palette(
    model: ScreenModel,
    n: int,
    rng: np.random.Generator | None = None,
    exemplar_size: int = 64,
    families: tuple[str, ...] | None = None,
) -> list[PaletteEntry]:
    """Encode n rendered exemplar tones at coverage 0.5 and keep the mean
    unit-scale type vector of each as a reusable palette entry."""
    from tonelab.tonegen import FAMILIES, sample_spec_pool

    if n < 1:
        raise ContractError("palette size must be >= 1")
    rng = rng or np.random.default_rng(0)
    pool = sample_spec_pool(
        (n + 1) // 2, rng, families=families or FAMILIES
    )[:n]
    entries = []
    for i, spec in enumerate(pool):
        tone = render_screentone(spec, exemplar_size, exemplar_size)
        latent, _ = model.encode_padded(tone, stochastic=False)
        vector = latent.type_feature.reshape(3, -1).mean(axis=1).astype(np.float32)
        name = f"{spec.family}{' inv' if spec.inverted else ''} p{spec.period_px:g}"
        entries.append(PaletteEntry(vector=vector, spec=spec, label=name))
    return entries
