"""Parametric screentone rendering and synthetic page composition.

Tones are rendered by ordered thresholding: each family defines a periodic
priority field (lower priority = inked earlier), the field is rank-normalized
over the raster so the empirical threshold distribution is uniform, and ink
is placed wherever the normalized threshold falls below the requested
coverage. That makes the pixel-counted ink coverage track the target to
within one pixel regardless of family, period or angle.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from tonelab import rasters
from tonelab.core import ContractError, as_bitonal, as_intensity, as_labels

FAMILIES = ("dot", "line", "grid", "cross_hatch", "noise")


@dataclass(frozen=True)
class ScreentoneSpec:
    family: str
    period_px: float = 8.0
    angle_deg: float = 0.0
    target_intensity: float = 0.5
    phase: tuple[float, float] = (0.0, 0.0)
    inverted: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractError(f"unknown screentone family {self.family!r}")
        if self.period_px < 2:
            raise ContractError("period_px must be at least 2")
        if not 0.0 <= self.target_intensity <= 1.0:
            raise ContractError("target_intensity must lie in [0, 1]")

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["phase"] = list(self.phase)
        return d

    @staticmethod
    def from_json(d: dict) -> "ScreentoneSpec":
        d = dict(d)
        d["phase"] = tuple(d.get("phase", (0.0, 0.0)))
        return ScreentoneSpec(**d)


@dataclass(frozen=True)
class IntensityDirective:
    """Spatial ink-coverage request for one region."""

    kind: str = "constant"
    value: float = 0.5
    start: float = 0.1
    end: float = 0.9
    axis: str = "x"
    center_value: float = 0.8
    edge_value: float = 0.2

    def __post_init__(self):
        if self.kind not in ("constant", "linear_ramp", "radial_ramp"):
            raise ContractError(f"unknown directive kind {self.kind!r}")
        for v in (self.value, self.start, self.end, self.center_value, self.edge_value):
            if not 0.0 <= v <= 1.0:
                raise ContractError("directive values must lie in [0, 1]")

    def field(self, height: int, width: int) -> np.ndarray:
        if self.kind == "constant":
            return np.full((height, width), self.value, dtype=np.float32)
        if self.kind == "linear_ramp":
            if self.axis == "x":
                t = np.linspace(0.0, 1.0, width, dtype=np.float32)[None, :]
                t = np.broadcast_to(t, (height, width))
            else:
                t = np.linspace(0.0, 1.0, height, dtype=np.float32)[:, None]
                t = np.broadcast_to(t, (height, width))
            return (self.start + (self.end - self.start) * t).astype(np.float32)
        yy, xx = np.mgrid[0:height, 0:width].astype(np.float32)
        cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
        r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        r = r / max(float(r.max()), 1e-9)
        return (self.center_value + (self.edge_value - self.center_value) * r).astype(
            np.float32
        )

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_json(d: dict) -> "IntensityDirective":
        return IntensityDirective(**d)


@dataclass
class SyntheticPage:
    """A rendered page with aligned ground-truth rasters.

    ``labels`` carries screentone identity per pixel (indices into ``specs``;
    a ``None`` spec entry marks a blank region). ``directives`` aligns with
    ``specs``.
    """

    image: np.ndarray
    intensity: np.ndarray
    labels: np.ndarray
    line_mask: np.ndarray
    specs: list[ScreentoneSpec | None]
    directives: list[IntensityDirective | None] = field(default_factory=list)

    def __post_init__(self):
        self.image = as_bitonal(self.image)
        self.intensity = as_intensity(self.intensity)
        self.labels = as_labels(self.labels, num_labels=len(self.specs))
        shapes = {self.image.shape, self.intensity.shape, self.labels.shape,
                  self.line_mask.shape}
        if len(shapes) != 1:
            raise ContractError("page rasters disagree on H, W")


def _rotated_coords(spec: ScreentoneSpec, height: int, width: int):
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    theta = np.deg2rad(spec.angle_deg)
    u = (xx * np.cos(theta) + yy * np.sin(theta)) / spec.period_px + spec.phase[0]
    v = (-xx * np.sin(theta) + yy * np.cos(theta)) / spec.period_px + spec.phase[1]
    return u, v


def _priority_field(spec: ScreentoneSpec, height: int, width: int) -> np.ndarray:
    """Lower value = inked earlier. Periodic in the rotated lattice."""
    if spec.family == "noise":
        rng = np.random.default_rng(spec.seed)
        noise = rng.random((height, width))
        # high-pass keeps the grain blue-ish; grain scale follows the period
        low = ndimage.gaussian_filter(noise, sigma=max(spec.period_px / 4.0, 0.5))
        return noise - low
    u, v = _rotated_coords(spec, height, width)
    cu, cv = np.cos(2 * np.pi * u), np.cos(2 * np.pi * v)
    if spec.family == "dot":
        pr = -(cu + cv)
    elif spec.family == "line":
        # secondary key along the stripe makes partial rows fill as dashes
        pr = -cv - 1e-3 * cu
    elif spec.family == "grid":
        pr = -np.maximum(cu, cv) - 1e-3 * (cu + cv)
    else:
        # cross_hatch: stripes at the base angle plus a second set at +45
        # degrees whose period is divided by sqrt(2), so both sets repeat on
        # the same period_px lattice
        spec2 = dataclasses.replace(
            spec, angle_deg=spec.angle_deg + 45.0,
            period_px=spec.period_px / np.sqrt(2.0),
        )
        _, v2 = _rotated_coords(spec2, height, width)
        pr = -np.maximum(cv, np.cos(2 * np.pi * v2)) - 1e-3 * cu
    return pr


def _uniform_threshold(spec: ScreentoneSpec, height: int, width: int) -> np.ndarray:
    """Rank-normalized priorities in (0, 1); ties broken by a seeded hash
    so coverage stays exact without directional bias."""
    pr = _priority_field(spec, height, width).ravel()
    tie_rng = np.random.default_rng(
        int.from_bytes(hashlib.sha256(repr(spec).encode()).digest()[:8], "little")
    )
    pr = pr + 1e-9 * tie_rng.random(pr.size)
    ranks = np.empty(pr.size, dtype=np.float64)
    ranks[np.argsort(pr, kind="stable")] = np.arange(pr.size)
    t = (ranks + 0.5) / pr.size
    return t.reshape(height, width)


def invert_tone(image: np.ndarray) -> np.ndarray:
    """Swap black and white pixels."""
    return (1.0 - as_bitonal(image)).astype(np.float32)


def render_with_directive(
    spec: ScreentoneSpec,
    directive: IntensityDirective,
    height: int,
    width: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Render a tone whose local coverage follows the directive field.

    Returns the bitonal raster and the exact directive field as the
    ground-truth intensity.
    """
    if height < 1 or width < 1:
        raise ContractError("raster dimensions must be positive")
    target = directive.field(height, width)
    if spec.inverted:
        base = dataclasses.replace(spec, inverted=False)
        t = _uniform_threshold(base, height, width)
        image = np.where(t < (1.0 - target), 0.0, 1.0).astype(np.float32)
        return invert_tone(image), target
    t = _uniform_threshold(spec, height, width)
    image = np.where(t < target, 0.0, 1.0).astype(np.float32)
    return image, target


def render_screentone(spec: ScreentoneSpec, height: int, width: int) -> np.ndarray:
    """Render one spec at its target coverage."""
    image, _ = render_with_directive(
        spec, IntensityDirective(kind="constant", value=spec.target_intensity),
        height, width,
    )
    coverage = float(np.mean(image == 0.0))
    if abs(coverage - spec.target_intensity) > 0.02:
        warnings.warn(
            f"nearest achievable coverage {coverage:.4f} for target "
            f"{spec.target_intensity:.4f} ({spec.family}, period {spec.period_px})",
            RuntimeWarning,
        )
    return image


def measure_coverage(image: np.ndarray) -> float:
    """Fraction of ink pixels."""
    return float(np.mean(as_bitonal(image) == 0.0))


def random_line_art(
    height: int,
    width: int,
    rng: np.random.Generator,
    n_shapes: tuple[int, int] = (3, 6),
    frame: bool = True,
) -> np.ndarray:
    """Procedural closed-shape line art with 1-3 px strokes, lines black."""
    im = Image.new("L", (width, height), color=255)
    draw = ImageDraw.Draw(im)
    if frame:
        draw.rectangle([1, 1, width - 2, height - 2], outline=0, width=2)
    count = int(rng.integers(n_shapes[0], n_shapes[1] + 1))
    for _ in range(count):
        stroke = int(rng.integers(1, 4))
        kind = rng.choice(["ellipse", "polygon", "blob"])
        cx = float(rng.uniform(0.15, 0.85)) * width
        cy = float(rng.uniform(0.15, 0.85)) * height
        rx = float(rng.uniform(0.08, 0.3)) * width
        ry = float(rng.uniform(0.08, 0.3)) * height
        if kind == "ellipse":
            draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], outline=0, width=stroke)
        elif kind == "polygon":
            sides = int(rng.integers(3, 7))
            rot = float(rng.uniform(0, 2 * np.pi))
            pts = [
                (cx + rx * np.cos(rot + 2 * np.pi * k / sides),
                 cy + ry * np.sin(rot + 2 * np.pi * k / sides))
                for k in range(sides)
            ]
            draw.polygon(pts, outline=0)
            if stroke > 1:
                draw.line(pts + [pts[0]], fill=0, width=stroke, joint="curve")
        else:
            angles = np.linspace(0, 2 * np.pi, 24, endpoint=False)
            wobble = 1.0 + 0.35 * rng.standard_normal(4)
            radii = 1.0 + 0.25 * np.sin(angles * int(rng.integers(2, 5)) + wobble[0])
            pts = [
                (cx + rx * r * np.cos(a), cy + ry * r * np.sin(a))
                for a, r in zip(angles, radii)
            ]
            draw.line(pts + [pts[0]], fill=0, width=max(stroke, 1), joint="curve")
    arr = np.asarray(im, dtype=np.float32) / 255.0
    return np.where(arr < 0.5, 0.0, 1.0).astype(np.float32)


def extract_regions(line_art: np.ndarray, gap_px: int = 2) -> tuple[np.ndarray, int]:
    """Label closed regions of a line drawing.

    Small line gaps (up to ``gap_px``) are closed by dilating the ink before
    connected-component labeling; line pixels inherit the label of the
    nearest open region.
    """
    line_art = as_bitonal(line_art)
    ink = line_art == 0.0
    if gap_px > 0:
        closed = ndimage.binary_dilation(
            ink, structure=ndimage.generate_binary_structure(2, 2), iterations=gap_px
        )
    else:
        closed = ink
    open_area = ~closed
    labels, n = ndimage.label(open_area)
    if n == 0:
        warnings.warn("page is fully black; returning a single region", RuntimeWarning)
        return np.zeros(line_art.shape, dtype=np.int32), 1
    _, idx = ndimage.distance_transform_edt(closed, return_indices=True)
    full = labels[idx[0], idx[1]] - 1
    return full.astype(np.int32), n


def compose_page(
    line_art: np.ndarray,
    assignment: dict[int, tuple[ScreentoneSpec | None, IntensityDirective | None]],
    rng_seed: int = 0,
) -> SyntheticPage:
    """Fill each closed region of the line art with its assigned tone.

    Regions missing from the assignment are left white and recorded as
    blank. The returned rasters are consistent by construction: for every
    non-line pixel the image equals the rendering of that pixel's spec.
    """
    line_art = as_bitonal(line_art)
    h, w = line_art.shape
    regions, n_regions = extract_regions(line_art)

    specs: list[ScreentoneSpec | None] = []
    directives: list[IntensityDirective | None] = []
    keyed: dict = {}
    region_to_type = np.zeros(n_regions, dtype=np.int32)
    for region in range(n_regions):
        spec, directive = assignment.get(region, (None, None))
        if spec is not None and spec.family == "noise" and spec.seed is None:
            spec = dataclasses.replace(spec, seed=rng_seed + region)
        key = (spec, directive)
        if key not in keyed:
            keyed[key] = len(specs)
            specs.append(spec)
            directives.append(directive)
        region_to_type[region] = keyed[key]

    canvas = np.ones((h, w), dtype=np.float32)
    intensity = np.zeros((h, w), dtype=np.float32)
    for type_id, (spec, directive) in enumerate(zip(specs, directives)):
        mask = region_to_type[regions] == type_id
        if spec is None:
            continue
        directive = directive or IntensityDirective(
            kind="constant", value=spec.target_intensity
        )
        tone, field_ = render_with_directive(spec, directive, h, w)
        canvas[mask] = tone[mask]
        intensity[mask] = field_[mask]

    image = np.minimum(canvas, line_art)
    labels = region_to_type[regions]
    return SyntheticPage(
        image=image,
        intensity=intensity,
        labels=labels,
        line_mask=line_art.copy(),
        specs=specs,
        directives=directives,
    )


def sample_spec_pool(
    n_base: int,
    rng: np.random.Generator,
    families: tuple[str, ...] = FAMILIES,
    family_weights: dict[str, float] | None = None,
    period_range: tuple[float, float] = (4.0, 16.0),
) -> list[ScreentoneSpec]:
    """n_base random specs plus their tone inverses (2*n_base total)."""
    if family_weights:
        names = list(family_weights)
        probs = np.array([family_weights[f] for f in names], dtype=np.float64)
        probs = probs / probs.sum()
    else:
        names = list(families)
        probs = np.full(len(names), 1.0 / len(names))
    base = []
    for _ in range(n_base):
        family = str(rng.choice(names, p=probs))
        lo, hi = np.log2(period_range[0]), np.log2(period_range[1])
        period = float(2.0 ** rng.uniform(lo, hi))
        base.append(
            ScreentoneSpec(
                family=family,
                period_px=round(period, 3),
                angle_deg=round(float(rng.uniform(0.0, 90.0)), 2),
                target_intensity=0.5,
                phase=(round(float(rng.uniform(0, 1)), 4), round(float(rng.uniform(0, 1)), 4)),
                inverted=False,
                seed=int(rng.integers(0, 2**31 - 1)),
            )
        )
    return base + [dataclasses.replace(s, inverted=True) for s in base]


@dataclass
class DatasetConfig:
    out_dir: str
    n_pages: int = 50
    height: int = 256
    width: int = 256
    n_base_specs: int = 16
    families: tuple[str, ...] = FAMILIES
    family_weights: dict[str, float] | None = None
    ramp_fraction: float = 0.3
    blank_fraction: float = 0.05
    specs_per_page: int = 4
    seed: int = 0
    pool_seed: int | None = None  # share a spec pool across train/holdout splits


def _random_directive(rng: np.random.Generator, ramp_fraction: float) -> IntensityDirective:
    if rng.random() < ramp_fraction:
        a, b = sorted(rng.uniform(0.05, 0.95, size=2).tolist())
        if rng.random() < 0.5:
            return IntensityDirective(
                kind="linear_ramp", start=round(a, 4), end=round(b, 4),
                axis="x" if rng.random() < 0.5 else "y",
            )
        return IntensityDirective(
            kind="radial_ramp", center_value=round(b, 4), edge_value=round(a, 4)
        )
    return IntensityDirective(kind="constant", value=round(float(rng.uniform(0.05, 0.95)), 4))


def generate_page(
    pool: list[ScreentoneSpec],
    height: int,
    width: int,
    page_seed: int,
    ramp_fraction: float = 0.3,
    blank_fraction: float = 0.05,
    specs_per_page: int = 4,
) -> tuple[SyntheticPage, dict]:
    """One synthetic page; fully determined by the pool and the seed."""
    rng = np.random.default_rng(page_seed)
    line_art = random_line_art(height, width, rng)
    regions, n_regions = extract_regions(line_art)
    page_pool_idx = rng.choice(
        len(pool), size=min(specs_per_page, len(pool)), replace=False
    )
    assignment: dict[int, tuple] = {}
    meta: dict[str, dict] = {}
    for region in range(n_regions):
        if rng.random() < blank_fraction:
            continue
        pool_idx = int(page_pool_idx[int(rng.integers(len(page_pool_idx)))])
        directive = _random_directive(rng, ramp_fraction)
        assignment[region] = (pool[pool_idx], directive)
        meta[str(region)] = {
            "pool_index": pool_idx,
            "directive": directive.to_json(),
        }
    page = compose_page(line_art, assignment, rng_seed=page_seed)
    return page, meta


def save_page(page_dir: Path, page: SyntheticPage) -> None:
    page_dir.mkdir(parents=True, exist_ok=True)
    rasters.save_gray_png(page_dir / "image.png", page.image)
    rasters.write_f32(page_dir / "intensity.f32", page.intensity, channels=["itn"])
    rasters.write_u16(page_dir / "labels.u16", page.labels)
    rasters.save_gray_png(page_dir / "linemask.png", page.line_mask)
    spec_doc = {
        "specs": [s.to_json() if s is not None else None for s in page.specs],
        "directives": [d.to_json() if d is not None else None for d in page.directives],
    }
    (page_dir / "spec.json").write_text(json.dumps(spec_doc, sort_keys=True))


def load_page(page_dir) -> SyntheticPage:
    page_dir = Path(page_dir)
    spec_doc = json.loads((page_dir / "spec.json").read_text())
    intensity, _ = rasters.read_f32(page_dir / "intensity.f32")
    return SyntheticPage(
        image=rasters.load_gray_png(page_dir / "image.png"),
        intensity=intensity[0],
        labels=rasters.read_u16(page_dir / "labels.u16"),
        line_mask=rasters.load_gray_png(page_dir / "linemask.png"),
        specs=[ScreentoneSpec.from_json(s) if s is not None else None
               for s in spec_doc["specs"]],
        directives=[IntensityDirective.from_json(d) if d is not None else None
                    for d in spec_doc["directives"]],
    )


def build_dataset(config: DatasetConfig) -> dict:
    """Write ``n_pages`` synthetic pages plus a manifest; pure function of
    the config seed."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pool_seed = config.seed if config.pool_seed is None else config.pool_seed
    rng = np.random.default_rng(pool_seed)
    pool = sample_spec_pool(
        config.n_base_specs, rng,
        families=config.families, family_weights=config.family_weights,
    )
    pages = []
    for i in range(config.n_pages):
        page_seed = int(np.random.SeedSequence((config.seed, i)).generate_state(1)[0])
        page, meta = generate_page(
            pool, config.height, config.width, page_seed,
            ramp_fraction=config.ramp_fraction,
            blank_fraction=config.blank_fraction,
            specs_per_page=config.specs_per_page,
        )
        rel = f"pages/{i:04d}"
        try:
            save_page(out / rel, page)
        except OSError as exc:
            raise OSError(f"failed writing page to {out / rel}: {exc}") from exc
        pages.append({"id": i, "dir": rel, "page_seed": page_seed, "regions": meta})
    manifest = {
        "seed": config.seed,
        "height": config.height,
        "width": config.width,
        "spec_pool": [s.to_json() for s in pool],
        "pages": pages,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


def manifest_hash(manifest_path) -> str:
    return hashlib.sha256(Path(manifest_path).read_bytes()).hexdigest()
