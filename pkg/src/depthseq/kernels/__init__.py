"""Hot loops with a numba path and a pure-numpy fallback.

The backend is picked once at import from ``DEPTHSEQ_KERNELS``
(``numba`` or ``numpy``; default ``numba`` when it imports cleanly) and can be
switched at runtime with :func:`use_backend`.
"""
from __future__ import annotations

import os
from types import ModuleType

from . import _numpy

ENV_VAR = "DEPTHSEQ_KERNELS"


def _load(name: str) -> ModuleType:
    if name == "numpy":
        return _numpy
    if name == "numba":
        from . import _numba
        return _numba
    raise ValueError(f"unknown kernel backend {name!r}; expected 'numba' or 'numpy'")


def _initial() -> ModuleType:
    requested = os.environ.get(ENV_VAR, "").strip().lower()
    if requested:
        return _load(requested)
    try:
        return _load("numba")
    except ImportError:
        return _numpy


_active = _initial()


def backend() -> str:
    return _active.NAME


def use_backend(name: str) -> str:
    """Switch backend; returns the previous backend name."""
    global _active
    prev = _active.NAME
    _active = _load(name)
    return prev


def get(name: str) -> ModuleType:
    return _load(name)


def label_components(mask, connectivity=26):
    return _active.label_components(mask, connectivity)


def fill_holes_slices(mask):
    return _active.fill_holes_slices(mask)


def col2im3d(cols, padded_shape, stride):
    return _active.col2im3d(cols, padded_shape, stride)


def depthwise_conv1d(x, w):
    return _active.depthwise_conv1d(x, w)


def depthwise_conv1d_backward(x, w, g):
    return _active.depthwise_conv1d_backward(x, w, g)


def gelu_forward(x):
    return _active.gelu_forward(x)


def gelu_backward(x, t, g):
    return _active.gelu_backward(x, t, g)
