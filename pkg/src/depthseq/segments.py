"""Map calcified voxels to vessel segments using per-side landmark slices."""
from __future__ import annotations

import numpy as np

from .hemisplit import HemisphereResult
from .volume_io import BinaryMask, LabelMask


class SegmentError(ValueError):
    pass


def segment_of_slice(z, bounds, proximal_inclusive: bool = True) -> np.ndarray:
    """Segment number 0..3 (cervical .. supraclinoid) for slice indices ``z``.

    ``bounds`` are the side's (canal, petrolingual, clinoid) slices in the
    proximal-to-distal direction. With ``proximal_inclusive`` a boundary slice
    belongs to the segment below it.
    """
    return np.searchsorted(np.asarray(bounds), np.asarray(z), side="left" if proximal_inclusive else "right")


def assign_segments(calc_mask: BinaryMask, landmarks, hemis: HemisphereResult,
                    z_increases_superior: bool = True, proximal_inclusive: bool = True) -> LabelMask:
    """Label every calcified voxel 1..8 (left 1..4, right 5..8); other voxels stay 0.

    ``landmarks`` follows the six-slot order (left canal, petrolingual,
    clinoid, then right). With ``z_increases_superior=False`` slice indices
    are flipped before comparison, so "proximal" keeps its anatomical sense.
    """
    lm = np.asarray(landmarks, dtype=np.int64)
    if lm.shape != (6,):
        raise SegmentError(f"expected 6 landmarks, got shape {lm.shape}")
    dims = calc_mask.dims
    if hemis.left.dims != dims or hemis.right.dims != dims:
        raise SegmentError(f"dim mismatch: calc mask {dims}, hemispheres {hemis.left.dims}")
    D = dims[2]
    z = np.arange(D)
    if not z_increases_superior:
        z = D - 1 - z
        lm = D - 1 - lm
    for side, bounds in (("left", lm[:3]), ("right", lm[3:])):
        if np.any(np.diff(bounds) < 0):
            raise SegmentError(f"non-monotone {side} landmarks: {bounds.tolist()}")
    labels = np.zeros(dims, dtype=np.uint8)
    for offset, bounds, side_mask in ((1, lm[:3], hemis.left.bits), (5, lm[3:], hemis.right.bits)):
        seg = segment_of_slice(z, bounds, proximal_inclusive) + offset
        sel = calc_mask.bits & side_mask
        labels[sel] = np.broadcast_to(seg[None, None, :], dims)[sel]
    return LabelMask(labels)
