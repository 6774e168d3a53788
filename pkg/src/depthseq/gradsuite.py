"""Finite-difference checks for every differentiable op and the composite loss.

Each case builder draws random shapes and inputs from an rng and returns a
scalar-valued closure plus the tensors to probe. Outputs are contracted with a
fixed random weight so every output element contributes to the scalar.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import objectives as obj
from .model import ModelConfig, forward, init_params
from .tensorcore import Tensor, grad_check
from .tensorcore import ops as F

Builder = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _leaf(rng, shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _contract(out: Tensor, rng) -> Callable[[], Tensor]:
    r = rng.normal(size=out.shape)
    return lambda t: F.reduce_sum(F.mul(t, r))


def _dims(rng, n, lo=1, hi=4) -> tuple[int, ...]:
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=n))


def _unary(op, shape_n=3, scale=1.0) -> Builder:
    def build(rng):
        x = _leaf(rng, _dims(rng, shape_n), scale)
        c = _contract(op(x), rng)
        return (lambda: c(op(x))), [x]
    return build


def _case_add(rng):
    s = _dims(rng, 3)
    a, b = _leaf(rng, s), _leaf(rng, (1,) + s[1:])
    c = _contract(F.add(a, b), rng)
    return (lambda: c(F.add(a, b))), [a, b]


def _case_sub(rng):
    s = _dims(rng, 3)
    a, b = _leaf(rng, s), _leaf(rng, s[-1:])
    c = _contract(F.sub(a, b), rng)
    return (lambda: c(F.sub(a, b))), [a, b]


def _case_mul(rng):
    s = _dims(rng, 3)
    a, b = _leaf(rng, s), _leaf(rng, s[:1] + (1,) * (len(s) - 1))
    c = _contract(F.mul(a, b), rng)
    return (lambda: c(F.mul(a, b))), [a, b]


def _case_masked_fill(rng):
    x = _leaf(rng, _dims(rng, 3))
    keep = rng.random(x.shape) > 0.4
    c = _contract(F.masked_fill(x, keep, -2.0), rng)
    return (lambda: c(F.masked_fill(x, keep, -2.0))), [x]


def _case_relu(rng):
    x = _leaf(rng, _dims(rng, 3))
    # keep every entry away from the kink so central differences are exact
    x.data = np.where(np.abs(x.data) < 0.05, 0.1, x.data)
    c = _contract(F.relu(x), rng)
    return (lambda: c(F.relu(x))), [x]


def _case_reshape(rng):
    s = _dims(rng, 3)
    x = _leaf(rng, s)
    shape = (s[0] * s[1], s[2])
    c = _contract(F.reshape(x, shape), rng)
    return (lambda: c(F.reshape(x, shape))), [x]


def _case_transpose(rng):
    x = _leaf(rng, _dims(rng, 4))
    axes = tuple(int(a) for a in rng.permutation(4))
    c = _contract(F.transpose(x, axes), rng)
    return (lambda: c(F.transpose(x, axes))), [x]


def _case_getitem(rng):
    x = _leaf(rng, _dims(rng, 3, 2, 5))
    idx = rng.integers(0, x.shape[0], size=4)       # repeated rows exercise accumulation
    key = (idx, slice(None), slice(0, None, 2))
    c = _contract(F.getitem(x, key), rng)
    return (lambda: c(F.getitem(x, key))), [x]


def _case_concat(rng):
    s = _dims(rng, 3)
    a, b = _leaf(rng, s), _leaf(rng, (int(rng.integers(1, 4)),) + s[1:])
    c = _contract(F.concat([a, b], 0), rng)
    return (lambda: c(F.concat([a, b], 0))), [a, b]


def _case_stack(rng):
    s = _dims(rng, 2)
    a, b = _leaf(rng, s), _leaf(rng, s)
    c = _contract(F.stack([a, b], 1), rng)
    return (lambda: c(F.stack([a, b], 1))), [a, b]


def _case_select_rows(rng):
    B, L, C = _dims(rng, 3, 1, 5)
    x = _leaf(rng, (B, L, C))
    idx = rng.integers(0, L, size=B)
    c = _contract(F.select_rows(x, idx), rng)
    return (lambda: c(F.select_rows(x, idx))), [x]


def _case_reduce_sum(rng):
    x = _leaf(rng, _dims(rng, 3))
    axis = int(rng.integers(0, 3))
    c = _contract(F.reduce_sum(x, axis), rng)
    return (lambda: c(F.reduce_sum(x, axis))), [x]


def _case_mean_pool(rng):
    x = _leaf(rng, _dims(rng, 4))
    axes = (2, 3)
    c = _contract(F.mean_pool(x, axes), rng)
    return (lambda: c(F.mean_pool(x, axes))), [x]


def _case_matmul(rng):
    b, m, k, n = _dims(rng, 4)
    a, w = _leaf(rng, (b, m, k)), _leaf(rng, (k, n))
    c = _contract(F.matmul(a, w), rng)
    return (lambda: c(F.matmul(a, w))), [a, w]


def _case_linear(rng):
    b, i, o = _dims(rng, 3, 1, 5)
    x, w, bias = _leaf(rng, (b, 2, i)), _leaf(rng, (i, o)), _leaf(rng, (o,))
    c = _contract(F.linear(x, w, bias), rng)
    return (lambda: c(F.linear(x, w, bias))), [x, w, bias]


def _case_layer_norm(rng):
    b, n = _dims(rng, 2)
    C = int(rng.integers(4, 9))
    x, g, be = _leaf(rng, (b, n, C)), _leaf(rng, (C,)), _leaf(rng, (C,))
    c = _contract(F.layer_norm(x, g, be), rng)
    return (lambda: c(F.layer_norm(x, g, be))), [x, g, be]


def _case_channel_norm(rng):
    C = int(rng.integers(4, 9))
    x = _leaf(rng, (1, C) + _dims(rng, 3, 1, 3))
    g, be = _leaf(rng, (C,)), _leaf(rng, (C,))
    c = _contract(F.channel_norm(x, g, be), rng)
    return (lambda: c(F.channel_norm(x, g, be))), [x, g, be]


def _case_gelu(rng):
    return _unary(F.gelu)(rng)


def _case_conv3d(rng):
    B, ci, co = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
    H, W, D = _dims(rng, 3, 2, 5)
    stride = (int(rng.integers(1, 3)), int(rng.integers(1, 3)), 1)
    x = _leaf(rng, (B, ci, H, W, D))
    fan = ci * 27
    w, b = _leaf(rng, (co, ci, 3, 3, 3), fan ** -0.5), _leaf(rng, (co,), 0.1)
    fn = lambda: F.conv3d(x, w, b, stride=stride, padding=(1, 1, 1))  # noqa: E731
    c = _contract(fn(), rng)
    return (lambda: c(fn())), [x, w, b]


def _case_conv1d_depthwise(rng):
    B, C, L = _dims(rng, 3, 1, 6)
    k = int(rng.choice([1, 3, 5]))
    x, w, b = _leaf(rng, (B, C, L)), _leaf(rng, (C, k)), _leaf(rng, (C,))
    c = _contract(F.conv1d_depthwise(x, w, b), rng)
    return (lambda: c(F.conv1d_depthwise(x, w, b))), [x, w, b]


def _mask(rng, shape) -> np.ndarray:
    m = rng.random(shape) > 0.3
    m[..., int(rng.integers(0, shape[-1]))] = True
    return m


def _case_masked_softmax(rng):
    s = _dims(rng, 2) + (int(rng.integers(2, 7)),)
    x = _leaf(rng, s)
    m = _mask(rng, s)
    c = _contract(F.masked_softmax(x, m), rng)
    return (lambda: c(F.masked_softmax(x, m))), [x]


def _case_cross_entropy(rng):
    B, K = int(rng.integers(1, 5)), int(rng.integers(2, 8))
    x = _leaf(rng, (B, K))
    m = _mask(rng, (B, K))
    target = np.array([rng.choice(np.flatnonzero(row)) for row in m])
    return (lambda: F.cross_entropy(x, target, m, reduction="mean")), [x]


def _case_attention(rng):
    heads = int(rng.integers(1, 3))
    C = heads * int(rng.integers(1, 4))
    B, L = int(rng.integers(1, 3)), int(rng.integers(2, 6))
    x = _leaf(rng, (B, L, C))
    mask = _mask(rng, (B, L))
    p = {}
    for m in "qkvo":
        p["w" + m] = _leaf(rng, (C, C), C ** -0.5)
        p["b" + m] = _leaf(rng, (C,), 0.1)
    fn = lambda: F.multihead_attention(x, mask, heads, p)  # noqa: E731
    c = _contract(fn(), rng)
    return (lambda: c(fn())), [x] + list(p.values())


def composite_config(rng) -> ModelConfig:
    heads = int(rng.choice([1, 2]))
    return ModelConfig(
        encoder_channels=(8, 8),
        d_model=8 * heads,
        n_heads=heads,
        n_layers=int(rng.integers(1, 3)),
        d_max=int(rng.integers(4, 7)),
        n_landmarks=2,
        padding_side=str(rng.choice(["left", "right"])),
    )


def _case_composite(rng):
    """L_loc + L_cls through the whole model on a two-volume batch of unequal depth."""
    cfg = composite_config(rng)
    params = init_params(cfg, int(rng.integers(0, 1 << 16)))
    depths = [int(rng.integers(2, cfg.d_max + 1)) for _ in range(2)]
    vols = [rng.normal(0.0, 1.0, size=(4, 4, d)) for d in depths]
    truth = np.stack([np.sort(rng.integers(0, d, size=cfg.n_landmarks)) for d in depths])
    labels = rng.integers(0, cfg.n_classes, size=2)

    def fn():
        out = forward(vols, cfg, params)
        return F.add(obj.loss_loc(out.loc_logits, truth, out.slice_mask, out.first_valid),
                     obj.loss_cls(out.cls_logits, labels))

    return fn, list(params.values())


CASES: dict[str, Builder] = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "masked_fill": _case_masked_fill,
    "gelu": _case_gelu,
    "relu": _case_relu,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "getitem": _case_getitem,
    "concat": _case_concat,
    "stack": _case_stack,
    "select_rows": _case_select_rows,
    "reduce_sum": _case_reduce_sum,
    "mean_pool": _case_mean_pool,
    "matmul": _case_matmul,
    "linear": _case_linear,
    "layer_norm": _case_layer_norm,
    "channel_norm": _case_channel_norm,
    "conv3d": _case_conv3d,
    "conv1d_depthwise": _case_conv1d_depthwise,
    "masked_softmax": _case_masked_softmax,
    "cross_entropy": _case_cross_entropy,
    "multihead_attention": _case_attention,
    "composite_loss": _case_composite,
}


@dataclass
class GradResult:
    name: str
    errors: list[float]

    @property
    def worst(self) -> float:
        return max(self.errors)


def run_case(name: str, n_shapes: int = 10, seed: int = 0, eps: float = 1e-3, n_samples: int = 12,
             points: int = 5) -> GradResult:
    rng = np.random.default_rng([seed, sorted(CASES).index(name)])
    errors = []
    for i in range(n_shapes):
        fn, params = CASES[name](rng)
        errors.append(grad_check(fn, params, eps=eps, n_samples=n_samples, seed=i, points=points))
    return GradResult(name, errors)


def run_suite(n_shapes: int = 10, seed: int = 0, names=None) -> list[GradResult]:
    return [run_case(n, n_shapes, seed) for n in (names or CASES)]
