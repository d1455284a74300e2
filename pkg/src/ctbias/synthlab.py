"""Synthetic dataset construction: skull stripping, sphere lesions, difficulty
tiers and scanner-signature phantoms.

All randomness flows from explicit seeds. Per-study streams are keyed by
``(seed, purpose, study_id)`` so results do not depend on processing order.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import ndimage

from .cohort import Catalog, keyed_rng, largest_remainder
from .errors import BoundsError, EmptyMaskError, PlacementError, ValidationError
from .imgio import GE, SIEMENS, SeriesMeta, save_nifti
from .volgrid import Volume, resample_linear, resample_nearest

BONE_HU = 300.0
SOFT_TISSUE_HU = (-20.0, 100.0)


@dataclass(frozen=True)
class BrainMask:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValidationError(f"mask must be 3D, got shape {data.shape}")
        object.__setattr__(self, "data", data.astype(bool, copy=False))

    @property
    def shape(self):
        return self.data.shape

    def to_volume(self) -> Volume:
        return Volume(self.data.astype(np.float32), self.spacing, self.origin)

    @classmethod
    def from_volume(cls, vol: Volume) -> "BrainMask":
        return cls(vol.data > 0.5, vol.spacing, vol.origin)


# ---------------------------------------------------------------------------
# skull stripping

def strip_skull(vol: Volume, bone_hu: float = BONE_HU, soft_band=SOFT_TISSUE_HU) -> BrainMask:
    """Brain mask by thresholding and connectivity.

    Bone is ``HU > bone_hu``. Per axial slice, the region enclosed by bone
    (not reachable from the slice border) is kept; within it, voxels in the
    soft-tissue band form candidates. The largest 6-connected 3D component
    is retained, holes are filled slice by slice, and bone is removed again.
    """
    hu = vol.data
    bone = hu > bone_hu
    interior = np.zeros_like(bone)
    for z in range(hu.shape[2]):
        interior[:, :, z] = ndimage.binary_fill_holes(bone[:, :, z]) & ~bone[:, :, z]
    soft = interior & (hu >= soft_band[0]) & (hu <= soft_band[1])
    labels, n = ndimage.label(soft, structure=ndimage.generate_binary_structure(3, 1))
    if n == 0:
        raise EmptyMaskError("no soft tissue enclosed by bone; cannot extract a brain mask")
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    brain = labels == int(np.argmax(sizes))
    for z in range(hu.shape[2]):
        brain[:, :, z] = ndimage.binary_fill_holes(brain[:, :, z])
    brain &= ~bone
    return BrainMask(brain, vol.spacing, vol.origin)


# ---------------------------------------------------------------------------
# spheres

@dataclass(frozen=True)
class SphereSpec:
    center: tuple[int, int, int]
    radius: float
    mean_hu: float
    sd_hu: float = 0.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValidationError(f"sphere radius must be > 0, got {self.radius}")
        if self.sd_hu < 0:
            raise ValidationError(f"sphere intensity sd must be >= 0, got {self.sd_hu}")
        object.__setattr__(self, "center", tuple(int(c) for c in self.center))


def ball_offsets(radius_mm: float, spacing) -> np.ndarray:
    """Integer voxel offsets whose physical distance from the origin is <= radius."""
    reach = [int(math.floor(radius_mm / s)) for s in spacing]
    grids = np.meshgrid(*(np.arange(-r, r + 1) for r in reach), indexing="ij")
    d2 = sum((g * s) ** 2 for g, s in zip(grids, spacing))
    inside = d2 <= radius_mm * radius_mm + 1e-9
    return np.stack([g[inside] for g in grids], axis=1)


def _ball_fits(mask: np.ndarray, center, offsets) -> bool:
    pts = offsets + np.asarray(center)
    if pts.min() < 0 or np.any(pts.max(axis=0) >= mask.shape):
        return False
    return bool(mask[pts[:, 0], pts[:, 1], pts[:, 2]].all())


def feasible_centers(mask: BrainMask, radius_mm: float, spacing=None) -> np.ndarray:
    """Every mask voxel at which a ball of ``radius_mm`` lies wholly inside the mask.

    Equivalent to eroding the mask by the ball; used as an enumeration oracle.
    """
    spacing = spacing or mask.spacing
    offsets = ball_offsets(radius_mm, spacing)
    reach = np.abs(offsets).max(axis=0)
    footprint = np.zeros(tuple(2 * r + 1 for r in reach), dtype=bool)
    footprint[tuple((offsets + reach).T)] = True
    eroded = ndimage.binary_erosion(mask.data, structure=footprint, border_value=0)
    return np.argwhere(eroded)


def sample_center(mask: BrainMask, radius_mm: float, spacing, rng, max_draws: int = 10_000):
    """Rejection-sample a mask voxel whose ``radius_mm`` ball stays inside the mask."""
    candidates = np.argwhere(mask.data)
    if len(candidates) == 0:
        raise PlacementError("mask is empty", 0)
    offsets = ball_offsets(radius_mm, spacing)
    for attempt in range(1, max_draws + 1):
        c = candidates[rng.integers(len(candidates))]
        if _ball_fits(mask.data, c, offsets):
            return tuple(int(v) for v in c)
    raise PlacementError(
        f"no center found for a {radius_mm:.1f} mm sphere after {max_draws} draws", max_draws
    )


def inject_sphere(vol: Volume, spec: SphereSpec, rng) -> Volume:
    """Replace every voxel within ``spec.radius`` mm of the center with
    independent ``N(mean_hu, sd_hu^2)`` draws; the input is not modified."""
    offsets = ball_offsets(spec.radius, vol.spacing)
    pts = offsets + np.asarray(spec.center)
    if pts.min() < 0 or np.any(pts.max(axis=0) >= vol.shape):
        raise BoundsError(f"sphere at {spec.center} with radius {spec.radius} mm leaves the volume")
    data = vol.data.copy()
    values = spec.mean_hu + spec.sd_hu * rng.standard_normal(len(pts)) if spec.sd_hu else np.full(len(pts), spec.mean_hu)
    data[pts[:, 0], pts[:, 1], pts[:, 2]] = values
    return vol.with_data(data)


# ---------------------------------------------------------------------------
# difficulty tiers

@dataclass(frozen=True)
class TierSpec:
    tier: str
    small_fraction: float
    large_radius_range: tuple[float, float] = (21.0, 26.0)
    small_radius_range: tuple[float, float] = (13.0, 17.0)
    large_intensity: tuple[float, float] = (50.0, 2.0)
    small_intensity: tuple[float, float] = (40.0, 2.0)

    def __post_init__(self):
        if not 0.0 <= self.small_fraction <= 1.0:
            raise ValidationError(f"small_fraction must lie in [0, 1], got {self.small_fraction}")
        for lo, hi in (self.large_radius_range, self.small_radius_range):
            if not 0 < lo <= hi:
                raise ValidationError(f"radius range must be positive and nonempty, got ({lo}, {hi})")


TIERS = {
    "easy": TierSpec("easy", 0.0),
    "medium": TierSpec("medium", 0.20),
    "hard": TierSpec("hard", 0.35),
}


def tier_spec(name: str) -> TierSpec:
    try:
        return TIERS[name]
    except KeyError:
        raise ValidationError(f"unknown tier {name!r}; expected one of {sorted(TIERS)}") from None


@dataclass(frozen=True)
class Placement:
    center: tuple[int, int, int]
    radius_mm: float


@dataclass
class DatasetItem:
    study_id: str
    manufacturer: str
    label: str
    tier: str
    volume: Volume
    sphere: Optional[SphereSpec] = None


@dataclass
class TierDataset:
    tier: str
    items: list[DatasetItem]
    placements: dict[str, Placement]
    small_ids: frozenset = frozenset()

    def by_id(self) -> dict[str, DatasetItem]:
        return {it.study_id: it for it in self.items}


def designate_labels(catalog: Catalog, seed: int) -> Catalog:
    """Label ``floor(n / 2)`` studies per manufacturer positive, the rest negative."""
    by_manu = defaultdict(list)
    for e in catalog:
        by_manu[e.meta.manufacturer].append(e.study_id)
    positive = set()
    for manu, ids in by_manu.items():
        ids = sorted(ids)
        order = keyed_rng(seed, "designate", manu).permutation(len(ids))
        positive.update(ids[i] for i in order[: len(ids) // 2])
    entries = []
    for e in catalog:
        label = "positive" if e.study_id in positive else "negative"
        entries.append(replace(e, meta=replace(e.meta, label=label)))
    return Catalog(tuple(entries))


def _positives_by_manufacturer(catalog: Catalog) -> dict[str, list[str]]:
    groups = defaultdict(list)
    totals = defaultdict(int)
    for e in catalog:
        totals[e.meta.manufacturer] += 1
        if e.meta.label == "positive":
            groups[e.meta.manufacturer].append(e.study_id)
        elif e.meta.label != "negative":
            raise ValidationError(f"study {e.study_id!r} has no positive/negative label")
    for manu, n in totals.items():
        if abs(len(groups[manu]) - n / 2) > 0.5:
            raise ValidationError(
                f"{manu}: {len(groups[manu])} of {n} studies positive; expected half per manufacturer"
            )
    return {m: sorted(ids) for m, ids in sorted(groups.items())}


def place_centers(catalog: Catalog, masks: Mapping[str, BrainMask], seed: int,
                  tier: TierSpec = TIERS["easy"], max_draws: int = 10_000) -> dict[str, Placement]:
    """Draw a large-sphere radius and a fully contained center for every positive."""
    placements = {}
    for ids in _positives_by_manufacturer(catalog).values():
        for sid in ids:
            rng = keyed_rng(seed, "placement", sid)
            radius = float(rng.uniform(*tier.large_radius_range))
            mask = masks[sid]
            placements[sid] = Placement(sample_center(mask, radius, mask.spacing, rng, max_draws), radius)
    return placements


def small_sphere_ids(catalog: Catalog, fraction: float, seed: int) -> set[str]:
    """Positives that receive a small sphere.

    The count ``round(fraction * positives)`` is apportioned across
    manufacturers by largest remainder; within a manufacturer the subset is a
    prefix of one seed-fixed order, so a larger fraction yields a superset.
    """
    groups = _positives_by_manufacturer(catalog)
    n_pos = sum(len(v) for v in groups.values())
    total = int(math.floor(fraction * n_pos + 0.5))
    if total == 0 or not groups:
        return set()
    alloc = largest_remainder(total, {m: len(ids) for m, ids in groups.items()})
    chosen = set()
    for manu, ids in groups.items():
        order = keyed_rng(seed, "small-order", manu).permutation(len(ids))
        chosen.update(ids[i] for i in order[: alloc[manu]])
    return chosen


def build_tier_dataset(catalog: Catalog, volumes: Mapping[str, Volume], masks: Mapping[str, BrainMask],
                       tier: TierSpec, seed: int, placements: Optional[Mapping[str, Placement]] = None) -> TierDataset:
    """Inject one sphere per positive study according to ``tier``.

    Large spheres use the saved placement (center and radius); small ones
    keep the saved center with a freshly drawn smaller radius and dimmer
    intensity. Negatives pass through untouched.
    """
    if placements is None:
        placements = place_centers(catalog, masks, seed, tier)
    small = small_sphere_ids(catalog, tier.small_fraction, seed)
    for fraction in (f for f in (0.20, 0.35) if f < tier.small_fraction):
        if not small_sphere_ids(catalog, fraction, seed) <= small:
            raise ValidationError("small-sphere subsets are not nested; cohort too small to balance")
    items = []
    for e in catalog:
        sid = e.study_id
        vol = volumes[sid]
        sphere = None
        if e.meta.label == "positive":
            p = placements[sid]
            if sid in small:
                radius = float(keyed_rng(seed, "small-radius", sid).uniform(*tier.small_radius_range))
                sphere = SphereSpec(p.center, radius, *tier.small_intensity)
                rng = keyed_rng(seed, "inject-small", sid)
            else:
                sphere = SphereSpec(p.center, p.radius_mm, *tier.large_intensity)
                rng = keyed_rng(seed, "inject-large", sid)
            vol = inject_sphere(vol, sphere, rng)
        items.append(DatasetItem(sid, e.meta.manufacturer, e.meta.label or "negative", tier.tier, vol, sphere))
    return TierDataset(tier.tier, items, dict(placements), frozenset(small))


MANIFEST_COLUMNS = (
    "study_id", "path", "manufacturer", "label", "tier",
    "center_x", "center_y", "center_z", "radius_mm", "mean_hu",
)


def write_tier_dataset(dataset: TierDataset, directory) -> Path:
    """NIfTI volume per study plus ``manifest.csv``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for it in sorted(dataset.items, key=lambda i: i.study_id):
            name = f"{it.study_id}.nii"
            save_nifti(directory / name, it.volume)
            s = it.sphere
            geo = [*s.center, repr(s.radius), repr(s.mean_hu)] if s else ["", "", "", "", ""]
            w.writerow([it.study_id, name, it.manufacturer, it.label, it.tier, *geo])
    return manifest


def read_manifest(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def resample_for_segmentation(vol: Volume, mask: BrainMask, n_slices: int = 32) -> tuple[Volume, BrainMask]:
    """Bring a volume/mask pair to ``n_slices`` along z (linear / nearest)."""
    if vol.shape != mask.shape:
        raise ValidationError(f"volume shape {vol.shape} != mask shape {mask.shape}")
    target = (vol.shape[0], vol.shape[1], int(n_slices))
    if vol.shape == target:
        return vol, mask
    out_vol = resample_linear(vol, target)
    out_mask = resample_nearest(mask.to_volume(), target)
    return out_vol, BrainMask(out_mask.data > 0.5, out_mask.spacing, out_mask.origin)


# ---------------------------------------------------------------------------
# phantoms

@dataclass(frozen=True)
class SignatureParams:
    variance: float = 25.0
    kernel_width: int = 1
    streak_amplitude: float = 0.0
    streak_period: float = 8.0

    def __post_init__(self):
        if self.variance < 0:
            raise ValidationError(f"noise variance must be >= 0, got {self.variance}")
        if self.kernel_width < 1:
            raise ValidationError(f"kernel width must be >= 1, got {self.kernel_width}")
        if not self.streak_period > 0:
            raise ValidationError("streak period must be > 0")


DEFAULT_SIGNATURES = {
    "A": SignatureParams(variance=25.0, kernel_width=1, streak_amplitude=0.0),
    "B": SignatureParams(variance=25.0, kernel_width=3, streak_amplitude=3.0),
}

# Phantom signatures stand in for the two scanner vendors.
SIGNATURE_MANUFACTURER = {"A": GE, "B": SIEMENS}
MANUFACTURER_SIGNATURE = {v: k for k, v in SIGNATURE_MANUFACTURER.items()}


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (64, 64, 16)
    signature: str = "A"
    signatures: Mapping[str, SignatureParams] = field(default_factory=lambda: dict(DEFAULT_SIGNATURES))
    # the slab spans the mid-cranial region, so every slice cuts well into the brain
    fov_mm: tuple[float, float, float] = (200.0, 200.0, 120.0)
    brain_semi_axes_mm: tuple[float, float, float] = (65.0, 80.0, 140.0)
    skull_thickness_mm: float = 8.0
    brain_hu: float = 30.0
    bone_hu: float = 1200.0
    background_hu: float = -1000.0
    variation_hu: float = 1.0
    shape_jitter: float = 0.06
    center_jitter_voxels: tuple[int, int, int] = (1, 1, 0)
    seed: int = 0
    study_id: Optional[str] = None

    def __post_init__(self):
        if len(self.shape) != 3 or any(int(n) < 1 for n in self.shape):
            raise ValidationError(f"phantom shape must be three positive ints, got {self.shape}")
        if self.signature not in self.signatures:
            raise ValidationError(f"unknown signature {self.signature!r}")
        if any(not a > 0 for a in self.brain_semi_axes_mm) or not self.skull_thickness_mm > 0:
            raise ValidationError("semi-axes and skull thickness must be positive")
        if any(not f > 0 for f in self.fov_mm):
            raise ValidationError("field of view must be positive")
        if "A" in self.signatures and "B" in self.signatures and self.signatures["A"] == self.signatures["B"]:
            raise ValidationError("signatures A and B must differ in at least one parameter")
        if not 0 <= self.shape_jitter < 0.5:
            raise ValidationError("shape jitter must lie in [0, 0.5)")

    @property
    def spacing(self) -> tuple[float, float, float]:
        return tuple(f / n for f, n in zip(self.fov_mm, self.shape))

    @property
    def params(self) -> SignatureParams:
        return self.signatures[self.signature]

    @property
    def manufacturer(self) -> str:
        return SIGNATURE_MANUFACTURER.get(self.signature, self.signature)


@dataclass(frozen=True)
class PhantomGeometry:
    center: tuple[int, int, int]
    brain: np.ndarray
    skull: np.ndarray
    offsets_mm: tuple[np.ndarray, np.ndarray, np.ndarray]


def phantom_geometry(spec: PhantomSpec) -> PhantomGeometry:
    """Analytic brain ellipsoid and skull shell of the phantom for ``spec``."""
    rng = keyed_rng(spec.seed, "phantom-geometry")
    shape = tuple(int(n) for n in spec.shape)
    jit = [int(rng.integers(-j, j + 1)) if j else 0 for j in spec.center_jitter_voxels]
    center = tuple(n // 2 + d for n, d in zip(shape, jit))
    scale = 1.0 + rng.uniform(-spec.shape_jitter, spec.shape_jitter, 3)
    semi = np.asarray(spec.brain_semi_axes_mm) * scale
    offsets = np.meshgrid(
        *((np.arange(n) - c) * s for n, c, s in zip(shape, center, spec.spacing)), indexing="ij", sparse=True
    )
    inner = sum((o / a) ** 2 for o, a in zip(offsets, semi))
    outer = sum((o / (a + spec.skull_thickness_mm)) ** 2 for o, a in zip(offsets, semi))
    brain = inner <= 1.0
    skull = (outer <= 1.0) & ~brain
    return PhantomGeometry(center, brain, skull, tuple(offsets))


def signature_noise(shape, params: SignatureParams, rng) -> np.ndarray:
    """Additive scanner noise.

    White Gaussian noise with the configured variance; for kernel width > 1
    it is box-filtered in-plane and rescaled back to the same per-voxel
    variance, which leaves neighbouring voxels correlated.
    """
    if params.variance == 0:
        return np.zeros(shape)
    sd = math.sqrt(params.variance)
    noise = rng.standard_normal(shape)
    w = params.kernel_width
    if w > 1:
        noise = ndimage.uniform_filter(noise, size=(w, w, 1), mode="wrap") * w
    return sd * noise


def gen_phantom(spec: PhantomSpec) -> tuple[Volume, SeriesMeta]:
    """Deterministic head phantom stamped with a scanner signature."""
    geo = phantom_geometry(spec)
    rng = keyed_rng(spec.seed, "phantom-content")
    shape = tuple(int(n) for n in spec.shape)
    data = np.full(shape, spec.background_hu, dtype=np.float64)

    # smooth brain texture that is exactly zero at the brain center voxel
    texture = np.zeros(shape)
    if spec.variation_hu:
        for _ in range(3):
            wavelength = rng.uniform(30.0, 80.0)
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            phase = rng.uniform(0, 2 * math.pi)
            arg = sum(d * o for d, o in zip(direction, geo.offsets_mm)) * (2 * math.pi / wavelength)
            texture = texture + spec.variation_hu * (np.cos(arg + phase) - math.cos(phase))
    data[geo.brain] = (spec.brain_hu + np.broadcast_to(texture, shape))[geo.brain]
    data[geo.skull] = spec.bone_hu

    params = spec.params
    data += signature_noise(shape, params, keyed_rng(spec.seed, "phantom-noise"))
    if params.streak_amplitude:
        x = np.arange(shape[0]) - geo.center[0]
        streak = params.streak_amplitude * np.sin(2 * math.pi * x / params.streak_period)
        data += streak[:, None, None]

    meta_rng = keyed_rng(spec.seed, "phantom-meta")
    meta = SeriesMeta(
        study_id=spec.study_id or f"phantom-{spec.seed}",
        manufacturer=spec.manufacturer,
        series_description=f"AXIAL {spec.spacing[2]:.2f}mm PHANTOM {spec.signature}",
        slice_thickness=spec.spacing[2],
        patient_age=float(meta_rng.integers(20, 90)),
        patient_sex=str(meta_rng.choice(["M", "F"])),
    )
    return Volume(data.astype(np.float32), spec.spacing), meta


def phantom_cohort(n_per_signature: int, seed: int, template: Optional[PhantomSpec] = None,
                   signatures: Sequence[str] = ("A", "B")):
    """``n_per_signature`` phantoms for each signature.

    Yields ``(volume, meta)``; study ids are ``{signature}{index:04d}`` and
    every phantom gets a seed derived from ``(seed, study_id)``.
    """
    template = template or PhantomSpec()
    if n_per_signature < 1:
        raise ValidationError(f"phantom count must be >= 1, got {n_per_signature}")
    for sig in signatures:
        for i in range(n_per_signature):
            sid = f"{sig}{i:04d}"
            sub_seed = int(keyed_rng(seed, "phantom", sid).integers(2**63))
            yield gen_phantom(replace(template, signature=sig, seed=sub_seed, study_id=sid))
