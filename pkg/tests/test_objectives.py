from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthseq import objectives as obj
from depthseq.objectives import ConfusionMatrix, MetricError
from depthseq.tensorcore import Tensor
from depthseq.volume_io import BinaryMask, LabelMask

import oracles

# frozen before the library existed: exact rational value 33/41 from Fractions
KAPPA_K3_EXAMPLE = 33 / 41


def random_confusion(rng, K):
    return rng.integers(0, 20, size=(K, K)) * (rng.random((K, K)) < 0.8)


# --------------------------------------------------------------- targets

def test_one_hot_examples():
    np.testing.assert_array_equal(obj.one_hot_target(0, 3), [1, 0, 0])
    np.testing.assert_array_equal(obj.one_hot_target(2, 3), [0, 0, 1])
    with pytest.raises(MetricError):
        obj.one_hot_target(3, 3)


@given(st.integers(1, 50).flatmap(lambda D: st.tuples(st.integers(0, D - 1), st.just(D))))
def test_one_hot_is_kronecker(zD):
    z, D = zD
    y = obj.one_hot_target(z, D)
    assert y.sum() == 1.0 and y[z] == 1.0 and np.count_nonzero(y) == 1


# ----------------------------------------------------------------- losses

def test_loss_loc_concentrated():
    logits = np.full((6, 10), -50.0)
    truth = np.array([0, 2, 4, 5, 7, 9])
    logits[np.arange(6), truth] = 50.0
    assert obj.loss_loc(Tensor(logits), truth, np.ones(10, bool)).item() < 1e-6


def test_loss_loc_uniform_is_n_log_d():
    mask = np.array([False] * 4 + [True] * 10)
    truth = np.arange(6)
    loss = obj.loss_loc(Tensor(np.zeros((6, 14))), truth, mask, offset=4).item()
    assert loss == pytest.approx(6 * math.log(10), abs=1e-9)
    assert loss == pytest.approx(13.8155, abs=1e-4)


def test_loss_loc_matches_per_channel_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        B, N, L = int(rng.integers(1, 4)), int(rng.integers(1, 7)), int(rng.integers(2, 12))
        logits = rng.normal(0, 2, size=(B, N, L))
        mask = rng.random((B, L)) < 0.7
        offset = np.zeros(B, dtype=np.int64)
        truth = np.zeros((B, N), dtype=np.int64)
        for b in range(B):
            valid = np.flatnonzero(mask[b])
            if valid.size == 0:
                mask[b, 0] = True
                valid = np.array([0])
            offset[b] = valid[0]
            truth[b] = rng.choice(valid, size=N) - offset[b]
        got = obj.loss_loc(Tensor(logits), truth, mask, offset).item()
        want = 0.0
        for b in range(B):
            for j in range(N):
                z = logits[b, j][mask[b]]
                lse = math.log(sum(math.exp(v) for v in z))
                want += lse - logits[b, j, truth[b, j] + offset[b]]
        assert got == pytest.approx(want / B, abs=1e-9)


def test_loss_loc_rejects_bad_target():
    with pytest.raises(ValueError):
        obj.loss_loc(Tensor(np.zeros((2, 5))), [1, 7], np.ones(5, bool))
    with pytest.raises(ValueError, match="masked position"):
        obj.loss_loc(Tensor(np.zeros((1, 5))), [0], np.array([False, True, True, True, True]))


def test_loss_cls_examples():
    assert obj.loss_cls(Tensor(np.zeros((1, 3))), [1]).item() == pytest.approx(math.log(3), abs=1e-12)
    assert obj.loss_cls(Tensor(np.array([[0.0, 40.0, 0.0]])), [1]).item() < 1e-12
    with pytest.raises(MetricError):
        obj.loss_cls(Tensor(np.zeros((1, 3))), [3])


def test_loss_cls_matches_softmax_oracle():
    rng = np.random.default_rng(1)
    z = rng.normal(0, 3, size=(7, 4))
    y = rng.integers(0, 4, size=7)
    want = np.mean([math.log(sum(math.exp(v) for v in row)) - row[t] for row, t in zip(z, y)])
    assert obj.loss_cls(Tensor(z), y).item() == pytest.approx(want, abs=1e-9)


# ------------------------------------------------------------ predictions

def test_argmax_examples():
    assert obj.argmax_prediction([[0.1, 0.7, 0.2]]).tolist() == [1]
    assert obj.argmax_prediction([[0.5, 0.5]]).tolist() == [0]


def linear_scan_argmax(row):
    best = 0
    for i in range(1, len(row)):
        if row[i] > row[best]:
            best = i
    return best


def test_argmax_matches_linear_scan():
    rng = np.random.default_rng(2)
    for _ in range(100):
        p = rng.integers(0, 5, size=(int(rng.integers(1, 7)), int(rng.integers(1, 12)))).astype(float)
        assert obj.argmax_prediction(p).tolist() == [linear_scan_argmax(r) for r in p]


def test_mae_examples():
    t = [3, 5, 7, 3, 5, 7]
    assert obj.mae(t, t) == 0.0
    assert obj.mae([4, 5, 7, 3, 5, 7], t) == pytest.approx(1 / 6)
    with pytest.raises(MetricError, match="length mismatch"):
        obj.mae([1, 2], [1, 2, 3])


def sort_topk_oracle(row, t, k):
    order = sorted(range(len(row)), key=lambda i: (-row[i], i))
    return t in order[:k]


def test_topk_examples():
    p = np.array([[0.1, 0.8, 0.1], [0.6, 0.3, 0.1]])
    assert obj.top_k_accuracy(p, [1, 0], 1) == 1.0
    assert obj.top_k_accuracy(p, [0, 1], 1) == 0.0
    assert obj.top_k_accuracy(p, [0, 1], 2) == 1.0
    with pytest.raises(MetricError):
        obj.top_k_accuracy(p, [0, 1], 4)


def test_tolerance_examples():
    assert obj.tolerance_accuracy([1, 3, 5], [2, 2, 6], 1) == 1.0
    assert obj.tolerance_accuracy([0, 4, 7], [2, 2, 9], 1) == 0.0


def test_metrics_match_naive_oracles_on_100_instances():
    rng = np.random.default_rng(3)
    for _ in range(100):
        N, D = int(rng.integers(1, 7)), int(rng.integers(1, 15))
        p = rng.dirichlet(np.ones(D), size=N)
        if rng.random() < 0.3:
            p = np.round(p, 1)          # force ties
        t = rng.integers(0, D, size=N)
        pred = obj.argmax_prediction(p)
        assert obj.mae(pred, t) == pytest.approx(sum(abs(int(a) - int(b)) for a, b in zip(pred, t)) / N, abs=1e-12)
        for k in range(1, D + 1):
            want = sum(sort_topk_oracle(list(p[j]), int(t[j]), k) for j in range(N)) / N
            assert obj.top_k_accuracy(p, t, k) == pytest.approx(want, abs=1e-12)
        for tau in range(0, 4):
            want = sum(1 for a, b in zip(pred, t) if abs(int(a) - int(b)) <= tau) / N
            assert obj.tolerance_accuracy(pred, t, tau) == pytest.approx(want, abs=1e-12)


def test_metric_monotonicity_and_equivalence():
    rng = np.random.default_rng(4)
    for _ in range(50):
        N, D = 6, int(rng.integers(2, 12))
        p = rng.dirichlet(np.ones(D), size=N)
        t = rng.integers(0, D, size=N)
        tops = [obj.top_k_accuracy(p, t, k) for k in range(1, D + 1)]
        assert all(a <= b for a, b in zip(tops, tops[1:]))
        pred = obj.argmax_prediction(p)
        tols = [obj.tolerance_accuracy(pred, t, tau) for tau in range(D)]
        assert all(a <= b for a, b in zip(tols, tols[1:]))
        exact = obj.mae(pred, t) == 0
        assert exact == (tops[0] == 1.0) == (tols[0] == 1.0)


# ------------------------------------------------------------------ kappa

def test_kappa_example_k3():
    cm = ConfusionMatrix(np.array([[2, 1, 0], [0, 2, 1], [0, 0, 2]]))
    assert obj.quadratic_weighted_kappa(cm) == pytest.approx(KAPPA_K3_EXAMPLE, abs=1e-12)


def test_kappa_matches_direct_formula_on_100_matrices():
    rng = np.random.default_rng(5)
    done = 0
    while done < 100:
        K = int(rng.integers(2, 9))
        c = random_confusion(rng, K)
        try:
            want = oracles.qwk_direct(c)
        except ZeroDivisionError:
            continue
        assert abs(obj.quadratic_weighted_kappa(ConfusionMatrix(c)) - want) <= 1e-9
        done += 1


@pytest.mark.parametrize("K", range(2, 9))
def test_kappa_diagonal_is_one(K):
    rng = np.random.default_rng(K)
    c = np.diag(rng.integers(1, 10, size=K))
    assert abs(obj.quadratic_weighted_kappa(ConfusionMatrix(c)) - 1.0) <= 1e-12


@pytest.mark.parametrize("K", range(2, 9))
def test_kappa_independent_marginals_is_zero(K):
    rng = np.random.default_rng(100 + K)
    r, c = rng.integers(1, 6, size=K), rng.integers(1, 6, size=K)
    assert abs(obj.quadratic_weighted_kappa(ConfusionMatrix(np.outer(r, c)))) <= 1e-12


def test_kappa_scale_invariant():
    rng = np.random.default_rng(6)
    c = random_confusion(rng, 5) + 1
    a = obj.quadratic_weighted_kappa(ConfusionMatrix(c))
    assert obj.quadratic_weighted_kappa(ConfusionMatrix(7 * c)) == pytest.approx(a, abs=1e-12)


def test_kappa_degenerate_cases():
    with pytest.raises(MetricError):
        obj.quadratic_weighted_kappa(ConfusionMatrix(np.zeros((3, 3), int)))
    # all mass in one category on both sides: expected disagreement 0, observed 0
    c = np.zeros((3, 3), int)
    c[1, 1] = 5
    assert obj.quadratic_weighted_kappa(ConfusionMatrix(c)) == 1.0
    assert obj.kappa_from_ratings([4, 4, 4], [4, 4, 4]) == 1.0
    with pytest.raises(MetricError):
        ConfusionMatrix(np.array([[1, -1], [0, 2]]))


def test_kappa_from_ratings_builds_counts():
    cm = ConfusionMatrix.from_ratings([0, 1, 2, 2], [0, 2, 2, 1])
    np.testing.assert_array_equal(cm.counts, [[1, 0, 0], [0, 0, 1], [0, 1, 1]])


# ---------------------------------------------------------- dice & volume

def test_dice_examples():
    a = np.zeros((4, 4, 2), bool)
    a[:2] = True
    b = np.zeros_like(a)
    b[2:] = True
    assert obj.dice(BinaryMask(a), BinaryMask(a)) == 1.0
    assert obj.dice(BinaryMask(a), BinaryMask(b)) == 0.0
    empty = BinaryMask(np.zeros((4, 4, 2), bool))
    assert obj.dice(empty, empty) == 1.0
    with pytest.raises(MetricError):
        obj.dice(empty, BinaryMask(np.zeros((2, 2, 2), bool)))


def test_dice_matches_counting_oracle():
    rng = np.random.default_rng(7)
    for _ in range(100):
        shape = tuple(int(n) for n in rng.integers(1, 7, size=3))
        a, b = rng.random(shape) < rng.random(), rng.random(shape) < rng.random()
        inter = sum(1 for x, y in zip(a.ravel(), b.ravel()) if x and y)
        na, nb = sum(a.ravel()), sum(b.ravel())
        want = 1.0 if na + nb == 0 else 2 * inter / (na + nb)
        assert obj.dice(BinaryMask(a), BinaryMask(b)) == pytest.approx(want, abs=1e-12)


def test_per_segment_volume_examples():
    assert obj.per_segment_volume(LabelMask(np.zeros((3, 3, 3), np.uint8)), (1, 1, 1)).tolist() == [0.0] * 8
    lab = np.zeros((5, 5, 5), np.uint8)
    lab.ravel()[:10] = 3
    vol = obj.per_segment_volume(LabelMask(lab), (0.5, 0.5, 1.0))
    assert vol[2] == 2.5 and vol.sum() == 2.5


def test_per_segment_volume_conserves_support():
    rng = np.random.default_rng(8)
    for _ in range(50):
        lab = rng.integers(0, 9, size=(6, 5, 4)).astype(np.uint8)
        spacing = tuple(float(s) for s in 2.0 ** rng.integers(-3, 2, size=3))
        vol = obj.per_segment_volume(LabelMask(lab), spacing)
        assert vol.sum() == np.count_nonzero(lab) * spacing[0] * spacing[1] * spacing[2]


# ---------------------------------------------------------------- report

def test_localization_report_perfect_and_keys():
    rng = np.random.default_rng(9)
    truths = [np.sort(rng.integers(0, 12, size=6)) for _ in range(5)]
    probs = [np.eye(12)[t] for t in truths]
    rep = obj.localization_report(probs, truths).to_dict()
    assert rep["n_cases"] == 5
    assert rep["aggregate"]["mae"] == 0.0 and rep["aggregate"]["top1"] == 1.0
    assert rep["aggregate"]["acc_tau1"] == 1.0 and rep["aggregate"]["kappa_pooled"] == 1.0
    assert set(rep["per_landmark"]) == set(obj.LANDMARK_NAMES)
    assert set(rep["per_landmark"][obj.LANDMARK_NAMES[0]]) == {"mae", "top1", "top2", "acc_tau1", "kappa"}


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_report_aggregate_is_mean_of_cases(seed):
    rng = np.random.default_rng(seed)
    D = int(rng.integers(3, 10))
    truths = [rng.integers(0, D, size=6) for _ in range(4)]
    probs = [rng.dirichlet(np.ones(D), size=6) for _ in range(4)]
    rep = obj.localization_report(probs, truths)
    per_mae = [rep.per_landmark[n]["mae"] for n in obj.LANDMARK_NAMES]
    assert rep.aggregate["mae"] == pytest.approx(np.mean(per_mae), abs=1e-12)
