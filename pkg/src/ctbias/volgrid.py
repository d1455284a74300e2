"""Volumetric grid model: the Volume carrier, intensity windowing, resampling
and slab extraction.

Axes follow the NIfTI convention ``(x, y, z)`` with ``z`` the slice
(craniocaudal) axis. Resampling uses voxel-center alignment: output voxel
``i`` of ``n_out`` sits at input index ``(i + 0.5) * n_in / n_out - 0.5``,
clamped to the valid index range, so the physical extent is preserved.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import BoundsError, ValidationError


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValidationError(f"volume data must be 3D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValidationError(f"volume shape must be positive, got {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        if not np.all(np.isfinite(data)):
            raise ValidationError("volume contains non-finite values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(not s > 0 for s in spacing):
            raise ValidationError(f"spacing must be three positive values, got {self.spacing}")
        origin = tuple(float(o) for o in self.origin)
        if len(origin) != 3:
            raise ValidationError(f"origin must have three components, got {self.origin}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def extent(self) -> tuple[float, float, float]:
        """Physical size in mm covered by the grid (voxel edge to voxel edge)."""
        return tuple(n * s for n, s in zip(self.shape, self.spacing))

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing, self.origin)


@dataclass(frozen=True)
class WindowSpec:
    level: float
    window: float
    out_lo: float = 0.0
    out_hi: float = 1.0

    def __post_init__(self):
        if not self.window > 0:
            raise ValidationError(f"window width must be > 0, got {self.window}")
        if not self.out_lo < self.out_hi:
            raise ValidationError(
                f"output range must satisfy out_lo < out_hi, got [{self.out_lo}, {self.out_hi}]"
            )


# Broad head window used for the manufacturer task, and the brain window used
# for the sphere and segmentation tasks.
BROAD_WINDOW = WindowSpec(level=40.0, window=400.0, out_lo=-1.0, out_hi=1.0)
BRAIN_WINDOW = WindowSpec(level=50.0, window=100.0, out_lo=0.0, out_hi=1.0)


def window_array(values: np.ndarray, spec: WindowSpec) -> np.ndarray:
    """Apply ``spec`` to a raw HU array, returning float64."""
    lo = spec.level - spec.window / 2.0
    t = np.clip((np.asarray(values, dtype=np.float64) - lo) / spec.window, 0.0, 1.0)
    return spec.out_lo + t * (spec.out_hi - spec.out_lo)


def window_map(vol: Volume, spec: WindowSpec) -> Volume:
    """Affinely map ``[level - window/2, level + window/2]`` onto
    ``[out_lo, out_hi]``, clipping everything outside."""
    return vol.with_data(window_array(vol.data, spec).astype(np.float32))


def _center_coords(n_in: int, n_out: int) -> np.ndarray:
    coords = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    return np.clip(coords, 0.0, n_in - 1)


def _interp_axis(data: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = data.shape[axis]
    if n_in == n_out:
        return data
    coords = _center_coords(n_in, n_out)
    i0 = np.floor(coords).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = coords - i0
    shape = [1] * data.ndim
    shape[axis] = n_out
    w1 = w1.reshape(shape)
    a = np.take(data, i0, axis=axis)
    b = np.take(data, i1, axis=axis)
    return a * (1.0 - w1) + b * w1


def _check_target(target_shape: Sequence[int]) -> tuple[int, int, int]:
    target = tuple(int(n) for n in target_shape)
    if len(target) != 3 or any(n < 1 for n in target):
        raise ValidationError(f"target shape must be three integers >= 1, got {target_shape}")
    return target


def _resampled_geometry(vol: Volume, target: tuple[int, int, int]):
    spacing = tuple(e / n for e, n in zip(vol.extent, target))
    # keep the first voxel edge fixed in physical space
    origin = tuple(
        o - s_in / 2.0 + s_out / 2.0 for o, s_in, s_out in zip(vol.origin, vol.spacing, spacing)
    )
    return spacing, origin


def resample_linear(vol: Volume, target_shape: Sequence[int]) -> Volume:
    """Trilinear resampling onto ``target_shape`` over the same physical extent.

    Interpolation is separable and clamps at the borders, so results stay
    within the input's value range and constants are preserved exactly.
    """
    target = _check_target(target_shape)
    data = vol.data.astype(np.float64)
    for axis, n_out in enumerate(target):
        data = _interp_axis(data, n_out, axis)
    spacing, origin = _resampled_geometry(vol, target)
    return Volume(data.astype(np.float32), spacing, origin)


def resample_nearest(vol: Volume, target_shape: Sequence[int]) -> Volume:
    """Nearest-neighbour counterpart of :func:`resample_linear` (for label maps)."""
    target = _check_target(target_shape)
    data = vol.data
    for axis, n_out in enumerate(target):
        n_in = data.shape[axis]
        if n_in == n_out:
            continue
        idx = np.floor(_center_coords(n_in, n_out) + 0.5).astype(np.intp)
        data = np.take(data, np.minimum(idx, n_in - 1), axis=axis)
    spacing, origin = _resampled_geometry(vol, target)
    return Volume(np.ascontiguousarray(data), spacing, origin)


def resample_to_thickness(vol: Volume, thickness_mm: float = 5.0) -> Volume:
    """Linearly resample along z so slices are ``thickness_mm`` apart (within rounding)."""
    if not thickness_mm > 0:
        raise ValidationError(f"slice thickness must be positive, got {thickness_mm}")
    nz = max(1, int(round(vol.extent[2] / thickness_mm)))
    return resample_linear(vol, (vol.shape[0], vol.shape[1], nz))


def select_slices(vol: Volume, start: int, count: int) -> Volume:
    """Contiguous slice range ``[start, start + count)``: the explicit region of interest."""
    if count < 1 or start < 0 or start + count > vol.shape[2]:
        raise BoundsError(
            f"slice range [{start}, {start + count}) outside volume with {vol.shape[2]} slices"
        )
    return extract_slab(vol, range(start, start + count))


def extract_slab(vol: Volume, slice_indices: Sequence[int]) -> Volume:
    """Stack the listed z-slices in the given order. Repeats are allowed."""
    idx = [int(i) for i in slice_indices]
    if not idx:
        raise BoundsError("slice index list is empty")
    nz = vol.shape[2]
    bad = [i for i in idx if i < 0 or i >= nz]
    if bad:
        raise BoundsError(f"slice indices {bad} outside [0, {nz})")
    return Volume(np.ascontiguousarray(vol.data[:, :, idx]), vol.spacing, vol.origin)
