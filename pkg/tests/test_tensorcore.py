from __future__ import annotations

import math

import numpy as np
import pytest

from depthseq import gradsuite
from depthseq.tensorcore import SGD, Tensor, grad_check, no_grad
from depthseq.tensorcore import ops as F
from depthseq.tensorcore.optim import MissingGradientError


def leaf(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def attn_params(rng, C, identity=False):
    p = {}
    for m in "qkvo":
        p["w" + m] = Tensor(np.eye(C) if identity else rng.normal(0, C ** -0.5, size=(C, C)))
        p["b" + m] = Tensor(np.zeros(C) if identity else rng.normal(0, 0.1, size=C))
    return p


# -------------------------------------------------------------------- conv3d

def conv3d_loops(x, w, b, stride, padding):
    B, Ci, H, W, D = x.shape
    Co, _, kh, kw, kd = w.shape
    xp = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in padding))
    Ho = (H + 2 * padding[0] - kh) // stride[0] + 1
    Wo = (W + 2 * padding[1] - kw) // stride[1] + 1
    Do = (D + 2 * padding[2] - kd) // stride[2] + 1
    out = np.zeros((B, Co, Ho, Wo, Do))
    for n, o, i, j, k in np.ndindex(B, Co, Ho, Wo, Do):
        acc = b[o]
        for c, a, bb, cc in np.ndindex(Ci, kh, kw, kd):
            acc += w[o, c, a, bb, cc] * xp[n, c, i * stride[0] + a, j * stride[1] + bb, k * stride[2] + cc]
        out[n, o, i, j, k] = acc
    return out


def test_conv3d_unit_kernel_is_identity():
    x = np.random.default_rng(0).normal(size=(1, 1, 3, 4, 2))
    out = F.conv3d(Tensor(x), Tensor(np.ones((1, 1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv3d_anisotropic_stride_shape():
    out = F.conv3d(Tensor(np.zeros((1, 1, 8, 8, 5))), Tensor(np.zeros((2, 1, 3, 3, 3))),
                   stride=(2, 2, 1), padding=(1, 1, 1))
    assert out.shape == (1, 2, 4, 4, 5)


@pytest.mark.parametrize("stride,padding", [((1, 1, 1), (0, 0, 0)), ((2, 2, 1), (1, 1, 1)), ((1, 2, 1), (1, 0, 1))])
def test_conv3d_matches_loops(stride, padding):
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(2, 2, 4, 5, 3)), rng.normal(size=(3, 2, 2, 3, 2)), rng.normal(size=3)
    out = F.conv3d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
    np.testing.assert_allclose(out.data, conv3d_loops(x, w, b, stride, padding), atol=1e-10)


def test_conv3d_channel_mismatch():
    with pytest.raises(ValueError):
        F.conv3d(Tensor(np.zeros((1, 2, 3, 3, 3))), Tensor(np.zeros((1, 1, 1, 1, 1))))


# --------------------------------------------------------- depthwise conv1d

def test_conv1d_identity_and_box():
    x = Tensor(np.array([[[1.0, 2.0, 3.0]]]))
    np.testing.assert_array_equal(F.conv1d_depthwise(x, Tensor([[0.0, 1.0, 0.0]])).data, x.data)
    np.testing.assert_array_equal(F.conv1d_depthwise(x, Tensor([[1.0, 1.0, 1.0]])).data, [[[3.0, 6.0, 5.0]]])


def test_conv1d_matches_loops():
    rng = np.random.default_rng(2)
    x, w, b = rng.normal(size=(2, 3, 7)), rng.normal(size=(3, 5)), rng.normal(size=3)
    out = F.conv1d_depthwise(Tensor(x), Tensor(w), Tensor(b)).data
    for n, c, t in np.ndindex(2, 3, 7):
        want = b[c] + sum(w[c, j] * x[n, c, t + j - 2] for j in range(5) if 0 <= t + j - 2 < 7)
        assert out[n, c, t] == pytest.approx(want, abs=1e-10)


def test_conv1d_even_kernel_rejected():
    with pytest.raises(ValueError, match="odd"):
        F.conv1d_depthwise(Tensor(np.zeros((1, 1, 4))), Tensor(np.zeros((1, 2))))


# ------------------------------------------------------------ masked softmax

def test_softmax_uniform_over_valid():
    mask = np.array([True, False, True, True, False, False, True, False])
    p = F.masked_softmax(Tensor(np.zeros(8)), mask).data
    np.testing.assert_array_equal(p, np.where(mask, 0.25, 0.0))


def test_softmax_large_logit_is_stable():
    z = np.zeros(5)
    z[2] = 1000.0
    p = F.masked_softmax(Tensor(z)).data
    assert np.all(np.isfinite(p)) and p[2] == 1.0


def test_softmax_matches_subsequence_oracle():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(1, 12))
        z = rng.normal(0, 5, size=n)
        mask = rng.random(n) < 0.6
        mask[rng.integers(n)] = True
        p = F.masked_softmax(Tensor(z), mask).data
        e = [math.exp(v) for v in z[mask]]
        np.testing.assert_allclose(p[mask], np.array(e) / sum(e), atol=1e-9)
        assert np.all(p[~mask] == 0.0)
        assert abs(p.sum() - 1.0) < 1e-6


def test_softmax_empty_row_rejected():
    with pytest.raises(ValueError, match="no valid position"):
        F.masked_softmax(Tensor(np.zeros((2, 3))), np.array([[True, False, False], [False] * 3]))


# ----------------------------------------------------------------- attention

def test_attention_single_token_is_value_projection():
    rng = np.random.default_rng(4)
    p = attn_params(rng, 4)
    x = rng.normal(size=(1, 1, 4))
    out = F.multihead_attention(Tensor(x), np.ones((1, 1), bool), 2, p).data
    v = x @ p["wv"].data + p["bv"].data
    np.testing.assert_allclose(out, v @ p["wo"].data + p["bo"].data, atol=1e-12)


def test_attention_masked_equals_subsequence():
    rng = np.random.default_rng(5)
    p = attn_params(rng, 6)
    x = rng.normal(size=(1, 8, 6))
    mask = np.array([[True] * 5 + [False] * 3])
    full = F.multihead_attention(Tensor(x), mask, 3, p).data
    sub = F.multihead_attention(Tensor(x[:, :5]), np.ones((1, 5), bool), 3, p).data
    np.testing.assert_allclose(full[:, :5], sub, atol=1e-6)
    assert np.all(full[:, 5:] == 0.0)
    x2 = x.copy()
    x2[:, 5:] = rng.normal(0, 100, size=(1, 3, 6))
    np.testing.assert_allclose(F.multihead_attention(Tensor(x2), mask, 3, p).data, full, atol=1e-6)


def test_attention_uniform_keys_average_values():
    C = 4
    p = attn_params(None, C, identity=True)
    p["wk"] = Tensor(np.zeros((C, C)))           # every key identical
    x = np.random.default_rng(6).normal(size=(1, 6, C))
    mask = np.array([[True, True, False, True, True, False]])
    out = F.multihead_attention(Tensor(x), mask, 2, p).data
    mean = x[0, mask[0]].mean(axis=0)
    np.testing.assert_allclose(out[0, mask[0]], np.tile(mean, (4, 1)), atol=1e-12)


def test_attention_heads_must_divide_width():
    with pytest.raises(ValueError, match="not divisible"):
        F.multihead_attention(Tensor(np.zeros((1, 2, 5))), np.ones((1, 2), bool), 2, attn_params(np.random.default_rng(0), 5))


# ------------------------------------------------------ norm, linear, gelu

def test_layer_norm_constant_vector_is_zero():
    out = F.layer_norm(Tensor(np.full((2, 5), 3.7)))
    np.testing.assert_array_equal(out.data, np.zeros((2, 5)))


def test_linear_identity():
    x = np.random.default_rng(7).normal(size=(3, 4))
    np.testing.assert_array_equal(F.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)


def test_linear_shape_mismatch():
    with pytest.raises(ValueError):
        F.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_gelu_zero():
    assert F.gelu(Tensor(np.zeros(1))).data[0] == 0.0


# -------------------------------------------------------------- cross entropy

def test_cross_entropy_concentrated_logit():
    z = np.zeros(4)
    z[2] = 20.0
    loss = F.cross_entropy(Tensor(z[None]), [2]).item()
    assert loss < 1e-8
    assert loss == pytest.approx(math.log1p(3 * math.exp(-20.0)), rel=1e-9)


def test_cross_entropy_uniform_is_log_d():
    mask = np.array([[True] * 10 + [False] * 4])
    assert F.cross_entropy(Tensor(np.zeros((1, 14))), [3], mask).item() == pytest.approx(math.log(10), abs=1e-12)


def test_cross_entropy_matches_log_softmax_oracle():
    rng = np.random.default_rng(8)
    for _ in range(50):
        n = int(rng.integers(2, 10))
        z = rng.normal(0, 3, size=n)
        mask = rng.random(n) < 0.7
        t = int(rng.integers(n))
        mask[t] = True
        p = F.masked_softmax(Tensor(z), mask).data
        assert F.cross_entropy(Tensor(z[None]), [t], mask[None]).item() == pytest.approx(-math.log(p[t]), abs=1e-9)


def test_cross_entropy_target_on_mask_rejected():
    with pytest.raises(ValueError, match="masked position"):
        F.cross_entropy(Tensor(np.zeros((1, 3))), [0], np.array([[False, True, True]]))


# ----------------------------------------------------------------- backward

def test_backward_sum_and_square():
    x = leaf([1.0, -2.0, 3.5])
    F.reduce_sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones(3))
    y = leaf([1.0, -2.0, 3.5])
    F.reduce_sum(F.mul(y, y)).backward()
    np.testing.assert_array_equal(y.grad, 2 * y.data)


def test_backward_needs_scalar():
    with pytest.raises(ValueError, match="scalar"):
        leaf([1.0, 2.0]).backward()


def test_shared_node_accumulates():
    x = leaf([2.0])
    y = F.mul(x, x)
    F.add(y, y).backward()          # d/dx 2x^2 = 4x
    np.testing.assert_array_equal(x.grad, [8.0])


def test_no_grad_builds_no_graph():
    x = leaf([1.0])
    with no_grad():
        y = F.mul(x, 3.0)
    assert not y.requires_grad


def test_determinism_forward_backward():
    def run():
        rng = np.random.default_rng(9)
        x = leaf(rng.normal(size=(1, 5, 4)))
        p = attn_params(rng, 4)
        for t in p.values():
            t.requires_grad = True
        out = F.reduce_sum(F.gelu(F.multihead_attention(x, np.ones((1, 5), bool), 2, p)))
        out.backward()
        return out.data.tobytes() + x.grad.tobytes() + b"".join(t.grad.tobytes() for t in p.values())
    assert run() == run()


# ---------------------------------------------------------------- grad check

def test_grad_check_quadratic():
    x = leaf([0.3, -1.2, 2.0])
    a = np.array([1.0, 2.0, 3.0])
    assert grad_check(lambda: F.reduce_sum(F.mul(F.mul(x, x), a)), [x], points=3) < 1e-6


def test_grad_check_conv_stack():
    rng = np.random.default_rng(10)
    x = leaf(rng.normal(size=(1, 1, 5, 5, 3)))
    w1, w2 = leaf(rng.normal(0, 0.3, size=(2, 1, 3, 3, 3))), leaf(rng.normal(0, 0.3, size=(2, 2, 3, 3, 3)))

    def f():
        h = F.gelu(F.conv3d(x, w1, stride=(2, 2, 1), padding=(1, 1, 1)))
        return F.reduce_sum(F.conv3d(h, w2, padding=(1, 1, 1)))
    assert grad_check(f, [x, w1, w2], points=3) < 1e-3


def test_grad_check_attention_block():
    rng = np.random.default_rng(11)
    x = leaf(rng.normal(size=(2, 4, 4)))
    p = attn_params(rng, 4)
    for t in p.values():
        t.requires_grad = True
    mask = np.array([[True, True, True, False], [False, True, True, True]])
    r = rng.normal(size=(2, 4, 4))
    assert grad_check(lambda: F.reduce_sum(F.mul(F.multihead_attention(x, mask, 2, p), r)),
                      [x] + list(p.values()), points=3) < 1e-3


def test_grad_check_rejects_bad_stencil():
    with pytest.raises(ValueError):
        grad_check(lambda: F.reduce_sum(leaf([1.0])), [], points=4)


@pytest.mark.parametrize("name", [n for n in gradsuite.CASES if n != "composite_loss"])
def test_gradient_suite_per_op(name):
    res = gradsuite.run_case(name, n_shapes=10)
    assert len(res.errors) == 10
    assert res.worst < 1e-3, res.errors


# ---------------------------------------------------------------------- SGD

def test_sgd_single_step():
    p = leaf([1.0])
    p.grad = np.array([2.0])
    SGD([p], lr=0.5).step()
    assert p.data[0] == 0.0


def test_sgd_momentum_recurrence():
    p = leaf([1.0, -1.0])
    opt = SGD([p], lr=0.1, momentum=0.9)
    g1, g2 = np.array([0.5, 1.0]), np.array([-0.2, 0.3])
    p.grad = g1.copy()
    opt.step()
    p.grad = g2.copy()
    opt.step()
    v1 = g1
    v2 = 0.9 * v1 + g2
    np.testing.assert_allclose(p.data, np.array([1.0, -1.0]) - 0.1 * v1 - 0.1 * v2, atol=1e-15)


def test_sgd_zero_gradient_leaves_params():
    p = leaf([1.5, 2.5])
    p.grad = np.zeros(2)
    SGD([p], lr=1.0, momentum=0.9).step()
    np.testing.assert_array_equal(p.data, [1.5, 2.5])


def test_sgd_missing_gradient():
    with pytest.raises(MissingGradientError, match="missing gradient"):
        SGD([leaf([1.0])], lr=0.1).step()
