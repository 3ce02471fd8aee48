"""Procedural multi-domain white-blood-cell crops with frozen pseudo-RoI features.

Class identity lives in a fixed morphology template per class; domain identity
lives in a photometric transform (hue, brightness, blur, tint) and in the
density of red-blood-cell distractors around the cell. A seeded random
projection shared by every domain stands in for a detector backbone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .datamodel import CANONICAL_CLASS_NAMES, Dataset, DatasetMeta

GENERATOR_VERSION = "synthgen-1"
GRID = 4  # patch grid for the mean/variance block
PROJ_SIDE = 16  # downsampled side fed to the random projection
MAX_RBC = 14


@dataclass(frozen=True)
class DomainShift:
    hue_shift: float = 0.0  # degrees
    brightness_scale: float = 1.0
    blur_sigma: float = 0.0
    background_tint: tuple = (0.0, 0.0, 0.0)
    rbc_density: float = 0.0

    def __post_init__(self):
        vals = [self.hue_shift, self.brightness_scale, self.blur_sigma, self.rbc_density,
                *self.background_tint]
        if not np.all(np.isfinite(vals)):
            raise ValueError("domain shift parameters must be finite")
        if len(self.background_tint) != 3:
            raise ValueError("background_tint must be an RGB triple")
        if self.brightness_scale <= 0 or self.blur_sigma < 0:
            raise ValueError("brightness_scale must be > 0 and blur_sigma >= 0")
        if not 0.0 <= self.rbc_density <= 1.0:
            raise ValueError("rbc_density must lie in [0, 1]")


IDENTITY_SHIFT = DomainShift()

DEFAULT_SHIFTS = (
    DomainShift(0.0, 1.0, 0.0, (0.0, 0.0, 0.0), 0.3),
    DomainShift(35.0, 0.8, 1.2, (25.0, 0.0, 10.0), 0.6),
    DomainShift(-40.0, 1.1, 0.6, (0.0, 20.0, 30.0), 0.15),
)


def _extra_shift(seed: int, domain: int) -> DomainShift:
    rng = np.random.default_rng([seed, domain, 7])
    return DomainShift(
        hue_shift=float(rng.uniform(-60, 60)),
        brightness_scale=float(rng.uniform(0.75, 1.25)),
        blur_sigma=float(rng.uniform(0.0, 1.5)),
        background_tint=tuple(float(t) for t in rng.uniform(0, 30, size=3)),
        rbc_density=float(rng.uniform(0.1, 0.7)),
    )


@dataclass(frozen=True)
class GenSpec:
    num_domains: int = 3
    num_classes: int = 5
    per_class_per_domain: int = 40
    image_side: int = 64
    feature_dim: int = 256
    seed: int = 42
    domain_shift_params: Optional[tuple] = None

    def __post_init__(self):
        if self.num_domains < 2:
            raise ValueError("num_domains must be >= 2")
        if not 2 <= self.num_classes <= len(CANONICAL_CLASS_NAMES):
            raise ValueError("num_classes must lie in [2, 13]")
        if self.per_class_per_domain < 1 or self.feature_dim < 1:
            raise ValueError("counts must be positive")
        if self.image_side < PROJ_SIDE:
            raise ValueError(f"image_side must be >= {PROJ_SIDE}")
        if self.domain_shift_params is not None and len(self.domain_shift_params) != self.num_domains:
            raise ValueError("need one DomainShift per domain")

    def shift(self, domain: int) -> DomainShift:
        if self.domain_shift_params is not None:
            return self.domain_shift_params[domain]
        if domain < len(DEFAULT_SHIFTS):
            return DEFAULT_SHIFTS[domain]
        return _extra_shift(self.seed, domain)

    @property
    def meta(self) -> DatasetMeta:
        return DatasetMeta(self.feature_dim, self.image_side, self.num_classes,
                           self.num_domains, self.seed, GENERATOR_VERSION)


@dataclass(frozen=True)
class CellMorphology:
    nucleus_lobe_count: int
    nucleus_area_fraction: float
    cytoplasm_granularity: float
    cell_radius_fraction: float
    granule_rgb: tuple = field(default=(0.55, 0.40, 0.70))


# One template per canonical class, same order as CANONICAL_CLASS_NAMES.
MORPHOLOGIES = (
    CellMorphology(2, 0.45, 0.90, 0.30, (0.25, 0.10, 0.40)),  # basophil
    CellMorphology(2, 0.35, 0.75, 0.34, (0.90, 0.45, 0.25)),  # eosinophil
    CellMorphology(1, 0.55, 0.00, 0.20),  # erythroblast
    CellMorphology(1, 0.85, 0.05, 0.32),  # myeloblast
    CellMorphology(1, 0.50, 0.70, 0.44, (0.75, 0.25, 0.35)),  # promyelocyte
    CellMorphology(1, 0.50, 0.40, 0.36),  # myelocyte
    CellMorphology(1, 0.42, 0.30, 0.34),  # metamyelocyte
    CellMorphology(2, 0.30, 0.20, 0.33),  # neutrophil_banded
    CellMorphology(4, 0.30, 0.20, 0.33),  # neutrophil_segmented
    CellMorphology(1, 0.45, 0.10, 0.44),  # monocyte
    CellMorphology(1, 0.85, 0.00, 0.24),  # lymphocyte_typical
    CellMorphology(1, 0.70, 0.05, 0.35),  # lymphocyte_atypical
    CellMorphology(1, 1.00, 0.00, 0.30),  # smudge_cell
)

_BACKGROUND = np.array([0.93, 0.86, 0.88])
_RBC_RIM = np.array([0.86, 0.45, 0.50])
_RBC_CORE = np.array([0.92, 0.65, 0.68])
_CYTOPLASM = np.array([0.78, 0.74, 0.90])
_NUCLEUS = np.array([0.35, 0.20, 0.55])


@dataclass(frozen=True)
class RenderedCell:
    image: np.ndarray  # (S, S, 3) uint8, after the domain transform
    nucleus_mask: np.ndarray  # (S, S) bool
    cell_mask: np.ndarray  # (S, S) bool
    rbc_mask: np.ndarray  # (S, S) bool


def render_cell(label: int, domain: int, spec: GenSpec, draw_seed: int) -> RenderedCell:
    """Render one crop and return it with the generator's ground-truth masks."""
    if not 0 <= label < spec.num_classes:
        raise ValueError("class out of range")
    if not 0 <= domain < spec.num_domains:
        raise ValueError("domain out of range")
    morph = MORPHOLOGIES[label]
    shift = spec.shift(domain)
    side = spec.image_side
    rng = np.random.default_rng([int(draw_seed) & 0xFFFFFFFFFFFFFFFF, label, domain])

    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    cy, cx = (side - 1) / 2 + rng.uniform(-1.5, 1.5, size=2)
    dist = np.hypot(yy - cy, xx - cx)

    img = np.broadcast_to(_BACKGROUND, (side, side, 3)).copy()
    img += rng.normal(0.0, 0.01, size=img.shape)

    radius = morph.cell_radius_fraction * side * (1.0 + rng.normal(0.0, 0.04))
    cell_mask = dist < radius

    # distractors stay strictly outside the central cell
    rbc_mask = np.zeros((side, side), dtype=bool)
    n_rbc = int(round(shift.rbc_density * MAX_RBC))
    placed, attempts = 0, 0
    while placed < n_rbc and attempts < 50 * MAX_RBC:
        attempts += 1
        r_rbc = 0.11 * side * (1.0 + rng.uniform(-0.15, 0.15))
        py, px = rng.uniform(0, side - 1, size=2)
        if np.hypot(py - cy, px - cx) < radius + r_rbc + 1.0:
            continue
        d = np.hypot(yy - py, xx - px)
        disk = d < r_rbc
        img[disk] = _RBC_RIM
        img[d < 0.5 * r_rbc] = _RBC_CORE
        rbc_mask |= disk
        placed += 1

    img[cell_mask] = _CYTOPLASM + rng.normal(0.0, 0.015, size=(cell_mask.sum(), 3))

    n_granules = int(round(morph.cytoplasm_granularity * 60))
    if n_granules:
        granule_color = np.asarray(morph.granule_rgb)
        for _ in range(n_granules):
            rho = radius * np.sqrt(rng.uniform(0.0, 0.9))
            phi = rng.uniform(0, 2 * np.pi)
            gy, gx = cy + rho * np.sin(phi), cx + rho * np.cos(phi)
            dot = (np.hypot(yy - gy, xx - gx) < rng.uniform(0.8, 1.6)) & cell_mask
            img[dot] = granule_color

    nucleus_radius = np.sqrt(morph.nucleus_area_fraction) * radius
    theta0 = rng.uniform(0, 2 * np.pi)
    if morph.nucleus_lobe_count == 1:
        ecc = 1.0 + abs(rng.normal(0.15, 0.05))
        ct, st = np.cos(theta0), np.sin(theta0)
        u = ((xx - cx) * ct + (yy - cy) * st) / (nucleus_radius * ecc)
        v = (-(xx - cx) * st + (yy - cy) * ct) * ecc / nucleus_radius
        nucleus_mask = u * u + v * v < 1.0
    else:
        nucleus_mask = np.zeros((side, side), dtype=bool)
        lobe_r = 0.45 * nucleus_radius
        for j in range(morph.nucleus_lobe_count):
            ang = theta0 + 2 * np.pi * j / morph.nucleus_lobe_count
            ly = cy + 0.6 * nucleus_radius * np.sin(ang)
            lx = cx + 0.6 * nucleus_radius * np.cos(ang)
            nucleus_mask |= np.hypot(yy - ly, xx - lx) < lobe_r
    nucleus_mask &= cell_mask
    stain = 1.0 + rng.normal(0.0, 0.03)
    img[nucleus_mask] = _NUCLEUS * stain + rng.normal(0.0, 0.04, size=(nucleus_mask.sum(), 3))

    raw = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return RenderedCell(domain_transform(raw, shift), nucleus_mask, cell_mask, rbc_mask)


def gen_cell_image(label: int, domain: int, spec: GenSpec, draw_seed: int) -> np.ndarray:
    return render_cell(label, domain, spec, draw_seed).image


def _hue_matrix(degrees: float) -> np.ndarray:
    # rotation about the gray axis of RGB space
    th = np.deg2rad(degrees)
    c, s = np.cos(th), np.sin(th)
    a = (1.0 - c) / 3.0
    b = np.sqrt(1.0 / 3.0) * s
    return np.array([
        [c + a, a - b, a + b],
        [a + b, c + a, a - b],
        [a - b, a + b, c + a],
    ])


def domain_transform(img: np.ndarray, shift: DomainShift) -> np.ndarray:
    """Hue rotation, brightness scaling, Gaussian blur, background tint; in that order."""
    out = np.asarray(img, dtype=np.float64)
    if shift.hue_shift != 0.0:
        out = np.clip(out @ _hue_matrix(shift.hue_shift).T, 0.0, 255.0)
    if shift.brightness_scale != 1.0:
        out = np.clip(out * shift.brightness_scale, 0.0, 255.0)
    if shift.blur_sigma > 0.0:
        out = gaussian_filter(out, sigma=(shift.blur_sigma, shift.blur_sigma, 0.0), mode="reflect")
    tint = np.asarray(shift.background_tint, dtype=np.float64)
    if np.any(tint != 0.0):
        # bright (background) pixels take most of the tint
        lum = out.mean(axis=2, keepdims=True) / 255.0
        out = np.clip(out + tint * lum, 0.0, 255.0)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _block_means(x: np.ndarray, n: int) -> np.ndarray:
    side = x.shape[0]
    edges = np.linspace(0, side, n + 1).astype(int)
    sums = np.add.reduceat(np.add.reduceat(x, edges[:-1], axis=0), edges[:-1], axis=1)
    sizes = np.diff(edges)
    return sums / (sizes[:, None] * sizes[None, :])[..., None]


@lru_cache(maxsize=8)
def projection_matrix(seed: int, n_out: int) -> np.ndarray:
    """Frozen random backbone, seeded only by the generator seed."""
    n_in = PROJ_SIDE * PROJ_SIDE * 3
    rng = np.random.default_rng([int(seed), 0xBAC4])
    # 0.7 keeps nearly every projected value inside the tanh range of the decoder
    w = 0.7 * rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)
    w.setflags(write=False)
    return w


def pseudo_roi_features(img: np.ndarray, spec: GenSpec) -> np.ndarray:
    """Patch mean/variance statistics plus a fixed random projection, length D."""
    side = spec.image_side
    if img.shape != (side, side, 3):
        raise ValueError(f"image must be {side}x{side}x3")
    x = np.asarray(img, dtype=np.float64) / 255.0
    means = _block_means(x, GRID)
    variances = np.maximum(_block_means(x * x, GRID) - means * means, 0.0)
    stats = np.concatenate([means.ravel(), variances.ravel()])
    n_proj = max(spec.feature_dim - stats.size, 0)
    parts = [stats]
    if n_proj:
        small = _block_means(x, PROJ_SIDE).ravel() - 0.5
        parts.append(small @ projection_matrix(spec.seed, n_proj))
    feats = np.concatenate(parts)[: spec.feature_dim]
    return feats.astype(np.float32)


def record_seed(seed: int, record_id: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(record_id)]).generate_state(1, np.uint64)[0])


def gen_dataset(spec: GenSpec = GenSpec()) -> Dataset:
    """K x C x per_class_per_domain labeled records, domain-major order."""
    n = spec.num_domains * spec.num_classes * spec.per_class_per_domain
    side = spec.image_side
    features = np.empty((n, spec.feature_dim), dtype=np.float32)
    images = np.empty((n, side, side, 3), dtype=np.uint8)
    domains = np.empty(n, dtype=np.int64)
    labels = np.empty(n, dtype=np.int64)
    rid = 0
    for domain in range(spec.num_domains):
        for label in range(spec.num_classes):
            for _ in range(spec.per_class_per_domain):
                img = gen_cell_image(label, domain, spec, record_seed(spec.seed, rid))
                images[rid] = img
                features[rid] = pseudo_roi_features(img, spec)
                domains[rid] = domain
                labels[rid] = label
                rid += 1
    return Dataset(features, images, domains, labels, np.arange(n), spec.meta)
