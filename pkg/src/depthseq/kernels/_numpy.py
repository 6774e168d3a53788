"""Pure-numpy reference kernels.

Every function here has a numba twin in ``_numba.py`` with the identical
signature. Integer and boolean kernels agree exactly; floating-point kernels
agree up to summation order. Callers arrange axes so that C order is the
linear order they care about.
"""
from __future__ import annotations

import itertools

import numpy as np

NAME = "numpy"


def _offsets(connectivity: int) -> list[tuple[int, int, int]]:
    offs = []
    for d in itertools.product((-1, 0, 1), repeat=3):
        n = sum(abs(c) for c in d)
        if n == 0:
            continue
        if connectivity == 6 and n != 1:
            continue
        offs.append(d)
    return offs


def label_components(mask: np.ndarray, connectivity: int = 26) -> tuple[np.ndarray, int]:
    """Label connected foreground components.

    Components are numbered 1..n in order of their smallest C-order index.
    Works by min-label propagation with pointer jumping; every foreground
    voxel converges to the smallest linear index in its component.
    """
    mask = np.ascontiguousarray(mask, dtype=bool)
    n_vox = mask.size
    big = np.int64(n_vox)
    lab = np.where(mask, np.arange(n_vox, dtype=np.int64).reshape(mask.shape), big)
    if not mask.any():
        return np.zeros(mask.shape, np.int64), 0
    offs = _offsets(connectivity)
    fg = mask.ravel()
    while True:
        padded = np.pad(lab, 1, constant_values=big)
        new = lab.copy()
        X, Y, Z = mask.shape
        for dx, dy, dz in offs:
            nb = padded[1 + dx:1 + dx + X, 1 + dy:1 + dy + Y, 1 + dz:1 + dz + Z]
            np.minimum(new, nb, out=new)
        new[~mask] = big
        flat = new.ravel()
        # pointer jumping: a label is the index of a voxel in the same component
        while True:
            jumped = flat.copy()
            jumped[fg] = flat[flat[fg]]
            if np.array_equal(jumped, flat):
                break
            flat = jumped
        new = flat.reshape(mask.shape)
        if np.array_equal(new, lab):
            break
        lab = new
    roots = np.unique(lab[mask])
    out = np.zeros(mask.shape, np.int64)
    out[mask] = np.searchsorted(roots, lab[mask]) + 1
    return out, int(roots.size)


def fill_holes_slices(mask: np.ndarray) -> np.ndarray:
    """Fill 2-D holes in every slice ``mask[k]`` (4-connected background)."""
    mask = np.ascontiguousarray(mask, dtype=bool)
    bg = ~mask
    reach = np.zeros_like(mask)
    reach[:, 0, :] = bg[:, 0, :]
    reach[:, -1, :] = bg[:, -1, :]
    reach[:, :, 0] |= bg[:, :, 0]
    reach[:, :, -1] |= bg[:, :, -1]
    while True:
        grown = reach.copy()
        grown[:, 1:, :] |= reach[:, :-1, :]
        grown[:, :-1, :] |= reach[:, 1:, :]
        grown[:, :, 1:] |= reach[:, :, :-1]
        grown[:, :, :-1] |= reach[:, :, 1:]
        grown &= bg
        if np.array_equal(grown, reach):
            break
        reach = grown
    return ~reach


def col2im3d(cols: np.ndarray, padded_shape, stride) -> np.ndarray:
    """Scatter-add column gradients back onto the padded input grid.

    ``cols`` has shape (B, C, Ho, Wo, Do, kh, kw, kd); returns
    (B, C, Hp, Wp, Dp).
    """
    B, C, Ho, Wo, Do, kh, kw, kd = cols.shape
    sh, sw, sd = stride
    out = np.zeros((B, C) + tuple(padded_shape), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            for k in range(kd):
                out[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw, k:k + sd * Do:sd] += cols[..., i, j, k]
    return out


def depthwise_conv1d(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Per-channel same-length cross-correlation; x (B, C, L), w (C, k)."""
    B, C, L = x.shape
    k = w.shape[1]
    p = k // 2
    xp = np.zeros((B, C, L + 2 * p), dtype=x.dtype)
    xp[:, :, p:p + L] = x
    out = np.zeros_like(x)
    for t in range(k):
        out += w[None, :, t, None] * xp[:, :, t:t + L]
    return out


def depthwise_conv1d_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    B, C, L = x.shape
    k = w.shape[1]
    p = k // 2
    xp = np.zeros((B, C, L + 2 * p), dtype=x.dtype)
    xp[:, :, p:p + L] = x
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for t in range(k):
        dxp[:, :, t:t + L] += w[None, :, t, None] * g
        dw[:, t] = np.sum(g * xp[:, :, t:t + L], axis=(0, 2))
    return dxp[:, :, p:p + L].copy(), dw


GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """tanh-approximated GELU; also returns the tanh term for the backward pass."""
    t = np.tanh(GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * x * (1.0 + t), t


def gelu_backward(x: np.ndarray, t: np.ndarray, g: np.ndarray) -> np.ndarray:
    du = GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
