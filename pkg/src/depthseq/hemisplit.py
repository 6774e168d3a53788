"""Deterministic left/right hemisphere separation.

Skull isolation (threshold, largest component, per-slice hole filling) gives
a head centroid; the midsagittal plane passes through it with normal equal to
the image row direction. Voxels strictly on the positive side of the plane
are "right", everything else (including the plane itself) is "left".
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .volume_io import BinaryMask, Volume, UNIT_TOL

DEFAULT_HU_MIN = 300.0


class NoComponentsError(ValueError):
    pass


@dataclass(frozen=True)
class SplitPlane:
    point: tuple[float, float, float]
    normal: tuple[float, float, float]

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if abs(np.linalg.norm(n) - 1.0) > UNIT_TOL:
            raise ValueError("plane normal must be unit length")


@dataclass(frozen=True)
class HemisphereResult:
    left: BinaryMask
    right: BinaryMask


def threshold_mask(v: Volume, hu_min: float = DEFAULT_HU_MIN) -> BinaryMask:
    return BinaryMask(v.voxels >= hu_min)


def _xfast(a: np.ndarray) -> np.ndarray:
    # (H, W, D) -> (D, W, H): C order over the result is x-fastest linear order
    return np.ascontiguousarray(a.transpose(2, 1, 0))


def largest_component(m: BinaryMask, connectivity: int = 26) -> BinaryMask:
    """Keep the biggest connected component.

    Ties go to the component containing the smallest x-fastest linear index,
    i.e. the one numbered first by the labelling kernel.
    """
    if connectivity not in (6, 26):
        raise ValueError("connectivity must be 6 or 26")
    labels, n = kernels.label_components(_xfast(m.bits), connectivity)
    if n == 0:
        raise NoComponentsError("no components")
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    keep = int(np.argmax(sizes)) + 1
    return BinaryMask((labels == keep).transpose(2, 1, 0))


def fill_holes(m: BinaryMask) -> BinaryMask:
    """Fill background pockets not 4-connected to the border of their axial slice."""
    filled = kernels.fill_holes_slices(np.ascontiguousarray(m.bits.transpose(2, 0, 1)))
    return BinaryMask(filled.transpose(1, 2, 0) | m.bits)


def centroid(m: BinaryMask, v: Volume) -> np.ndarray:
    if m.dims != v.dims:
        raise ValueError(f"mask dims {m.dims} do not match volume dims {v.dims}")
    idx = np.argwhere(m.bits)
    if idx.size == 0:
        raise ValueError("centroid of an empty mask")
    return v.world_coords(idx.mean(axis=0))


def plane_from_orientation(c, v: Volume) -> SplitPlane:
    return SplitPlane(point=tuple(float(x) for x in c), normal=v.row_dir)


def signed_distance(v: Volume, p: SplitPlane) -> np.ndarray:
    """(world(voxel) - p.point) . p.normal for every voxel, shape (H, W, D)."""
    a = v.affine()
    n = np.asarray(p.normal, dtype=np.float64)
    # world = origin + A @ idx, so the dot product is separable per axis
    step = a[:3, :3].T @ n
    base = float((a[:3, 3] - np.asarray(p.point)) @ n)
    H, W, D = v.dims
    return (
        base
        + step[0] * np.arange(H)[:, None, None]
        + step[1] * np.arange(W)[None, :, None]
        + step[2] * np.arange(D)[None, None, :]
    )


def split_by_plane(v: Volume, p: SplitPlane) -> HemisphereResult:
    right = signed_distance(v, p) > 0
    return HemisphereResult(left=BinaryMask(~right), right=BinaryMask(right))


def skull_mask(v: Volume, hu_min: float = DEFAULT_HU_MIN, connectivity: int = 26) -> BinaryMask:
    return fill_holes(largest_component(threshold_mask(v, hu_min), connectivity))


def separate_hemispheres(v: Volume, hu_min: float = DEFAULT_HU_MIN, connectivity: int = 26) -> HemisphereResult:
    skull = skull_mask(v, hu_min, connectivity)
    c = centroid(skull, v)
    return split_by_plane(v, plane_from_orientation(c, v))
