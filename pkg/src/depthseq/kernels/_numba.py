"""numba-compiled kernels; same contracts as ``_numpy.py``."""
from __future__ import annotations

import numpy as np
from numba import njit

NAME = "numba"


@njit(cache=True)
def _label_bfs(mask, connectivity):
    X, Y, Z = mask.shape
    labels = np.zeros((X, Y, Z), np.int64)
    queue = np.empty(X * Y * Z, np.int64)
    n = 0
    for x0 in range(X):
        for y0 in range(Y):
            for z0 in range(Z):
                if not mask[x0, y0, z0] or labels[x0, y0, z0] != 0:
                    continue
                n += 1
                labels[x0, y0, z0] = n
                head = 0
                tail = 0
                queue[tail] = (x0 * Y + y0) * Z + z0
                tail += 1
                while head < tail:
                    v = queue[head]
                    head += 1
                    z = v % Z
                    y = (v // Z) % Y
                    x = v // (Y * Z)
                    for dx in range(-1, 2):
                        for dy in range(-1, 2):
                            for dz in range(-1, 2):
                                s = abs(dx) + abs(dy) + abs(dz)
                                if s == 0 or (connectivity == 6 and s != 1):
                                    continue
                                xx = x + dx
                                yy = y + dy
                                zz = z + dz
                                if xx < 0 or yy < 0 or zz < 0 or xx >= X or yy >= Y or zz >= Z:
                                    continue
                                if mask[xx, yy, zz] and labels[xx, yy, zz] == 0:
                                    labels[xx, yy, zz] = n
                                    queue[tail] = (xx * Y + yy) * Z + zz
                                    tail += 1
    return labels, n


def label_components(mask: np.ndarray, connectivity: int = 26) -> tuple[np.ndarray, int]:
    labels, n = _label_bfs(np.ascontiguousarray(mask, dtype=np.bool_), connectivity)
    return labels, int(n)


@njit(cache=True)
def _fill_holes(mask):
    K, A, B = mask.shape
    out = np.ones((K, A, B), np.bool_)
    queue = np.empty(A * B, np.int64)
    for k in range(K):
        seen = np.zeros((A, B), np.bool_)
        tail = 0
        for a in range(A):
            for b in range(B):
                if (a == 0 or b == 0 or a == A - 1 or b == B - 1) and not mask[k, a, b]:
                    seen[a, b] = True
                    queue[tail] = a * B + b
                    tail += 1
        head = 0
        while head < tail:
            v = queue[head]
            head += 1
            a = v // B
            b = v % B
            for da, db in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                aa = a + da
                bb = b + db
                if aa < 0 or bb < 0 or aa >= A or bb >= B:
                    continue
                if not mask[k, aa, bb] and not seen[aa, bb]:
                    seen[aa, bb] = True
                    queue[tail] = aa * B + bb
                    tail += 1
        for a in range(A):
            for b in range(B):
                if seen[a, b]:
                    out[k, a, b] = False
    return out


def fill_holes_slices(mask: np.ndarray) -> np.ndarray:
    return _fill_holes(np.ascontiguousarray(mask, dtype=np.bool_))


@njit(cache=True)
def _col2im(cols, out, sh, sw, sd):
    B, C, Ho, Wo, Do, kh, kw, kd = cols.shape
    for i in range(kh):
        for j in range(kw):
            for k in range(kd):
                for b in range(B):
                    for c in range(C):
                        for h in range(Ho):
                            for w in range(Wo):
                                for d in range(Do):
                                    out[b, c, i + sh * h, j + sw * w, k + sd * d] += cols[b, c, h, w, d, i, j, k]
    return out


def col2im3d(cols: np.ndarray, padded_shape, stride) -> np.ndarray:
    B, C = cols.shape[:2]
    out = np.zeros((B, C) + tuple(padded_shape), dtype=cols.dtype)
    return _col2im(np.ascontiguousarray(cols), out, *[int(s) for s in stride])


@njit(cache=True)
def _dw_conv(x, w):
    B, C, L = x.shape
    k = w.shape[1]
    p = k // 2
    out = np.zeros_like(x)
    for b in range(B):
        for c in range(C):
            for l in range(L):
                acc = 0.0
                for t in range(k):
                    m = l + t - p
                    if 0 <= m < L:
                        acc += w[c, t] * x[b, c, m]
                out[b, c, l] = acc
    return out


def depthwise_conv1d(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return _dw_conv(np.ascontiguousarray(x), np.ascontiguousarray(w))


@njit(cache=True)
def _dw_conv_bwd(x, w, g):
    B, C, L = x.shape
    k = w.shape[1]
    p = k // 2
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    for b in range(B):
        for c in range(C):
            for l in range(L):
                gv = g[b, c, l]
                for t in range(k):
                    m = l + t - p
                    if 0 <= m < L:
                        dx[b, c, m] += w[c, t] * gv
                        dw[c, t] += gv * x[b, c, m]
    return dx, dw


def depthwise_conv1d_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return _dw_conv_bwd(np.ascontiguousarray(x), np.ascontiguousarray(w), np.ascontiguousarray(g))


GELU_C = float(np.sqrt(2.0 / np.pi))


@njit(cache=True)
def _gelu_fwd(x, out, t):
    for i in range(x.size):
        v = x[i]
        th = np.tanh(GELU_C * (v + 0.044715 * v * v * v))
        t[i] = th
        out[i] = 0.5 * v * (1.0 + th)


@njit(cache=True)
def _gelu_bwd(x, t, g, out):
    for i in range(x.size):
        v = x[i]
        th = t[i]
        du = GELU_C * (1.0 + 3 * 0.044715 * v * v)
        out[i] = g[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)


def gelu_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xf = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(xf)
    t = np.empty_like(xf)
    _gelu_fwd(xf.ravel(), out.ravel(), t.ravel())
    return out, t


def gelu_backward(x: np.ndarray, t: np.ndarray, g: np.ndarray) -> np.ndarray:
    xf = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(xf)
    _gelu_bwd(xf.ravel(), np.ascontiguousarray(t).ravel(), np.ascontiguousarray(g, dtype=np.float64).ravel(),
              out.ravel())
    return out
