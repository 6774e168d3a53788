"""Training losses and evaluation metrics for slice localization."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensorcore import Tensor
from .tensorcore import ops as F
from .volume_io import BinaryMask, LabelMask, N_SEGMENT_LABELS

LANDMARK_NAMES = (
    "left_canal",
    "left_petrolingual",
    "left_clinoid",
    "right_canal",
    "right_petrolingual",
    "right_clinoid",
)


class MetricError(ValueError):
    pass


# ------------------------------------------------------------------ losses

def one_hot_target(z: int, D: int) -> np.ndarray:
    if not 0 <= z < D:
        raise MetricError(f"target index {z} outside [0, {D})")
    y = np.zeros(D)
    y[z] = 1.0
    return y


def loss_loc(logits: Tensor, truth, mask, offset=0) -> Tensor:
    """Summed per-landmark cross-entropy over depth.

    ``logits`` is (N, L) for one sequence or (B, N, L) for a batch; ``truth``
    holds slice indices (N,) or (B, N) and ``offset`` (scalar or (B,)) maps a
    slice index to its sequence position. ``mask`` marks the positions a
    landmark may occupy. A batch loss is the mean of per-sequence sums.
    """
    truth = np.asarray(truth, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if logits.ndim == 2:
        if truth.shape != (logits.shape[0],):
            raise MetricError(f"expected {logits.shape[0]} targets, got shape {truth.shape}")
        return F.cross_entropy(logits, truth + int(offset), mask[None, :], reduction="sum")
    B, N, _ = logits.shape
    if truth.shape != (B, N):
        raise MetricError(f"expected targets of shape {(B, N)}, got {truth.shape}")
    offset = np.broadcast_to(np.asarray(offset, dtype=np.int64), (B,))
    total = F.cross_entropy(logits, truth + offset[:, None], mask[:, None, :], reduction="sum")
    return F.mul(total, 1.0 / B)


def loss_cls(cls_logits: Tensor, label) -> Tensor:
    """Cross-entropy over class logits; a batch (B, K) is averaged."""
    label = np.asarray(label, dtype=np.int64)
    K = cls_logits.shape[-1]
    if np.any(label < 0) or np.any(label >= K):
        raise MetricError(f"class label outside [0, {K})")
    return F.cross_entropy(cls_logits, label, reduction="mean")


# ------------------------------------------------------------- predictions

def _probs(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise MetricError(f"prediction set must be (N, D), got shape {p.shape}")
    return p


def argmax_prediction(p) -> np.ndarray:
    """Most probable slice per landmark; np.argmax already breaks ties low."""
    return np.argmax(_probs(p), axis=1).astype(np.int64)


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if pred.shape != truth.shape:
        raise MetricError(f"length mismatch: {pred.size} predictions vs {truth.size} targets")
    return pred, truth


def mae(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def ranks(p) -> np.ndarray:
    """Rank of every slice per landmark (0 = most probable; ties go to the lower index)."""
    p = _probs(p)
    order = np.argsort(-p, axis=1, kind="stable")
    r = np.empty_like(order)
    np.put_along_axis(r, order, np.arange(p.shape[1])[None, :].repeat(p.shape[0], 0), axis=1)
    return r


def top_k_hits(p, truth, k: int) -> np.ndarray:
    p = _probs(p)
    truth = np.asarray(truth, dtype=np.int64)
    if not 1 <= k <= p.shape[1]:
        raise MetricError(f"k={k} outside [1, {p.shape[1]}]")
    if truth.shape != (p.shape[0],):
        raise MetricError("length mismatch between probabilities and targets")
    return np.take_along_axis(ranks(p), truth[:, None], axis=1)[:, 0] < k


def top_k_accuracy(p, truth, k: int) -> float:
    return float(np.mean(top_k_hits(p, truth, k)))


def tolerance_accuracy(pred, truth, tau: int = 1) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean(np.abs(pred - truth) <= tau))


# ------------------------------------------------------------------- kappa

@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise MetricError("confusion matrix must be square")
        if np.any(c < 0) or not np.all(np.equal(np.mod(c, 1), 0)):
            raise MetricError("confusion counts must be non-negative integers")
        object.__setattr__(self, "counts", c.astype(np.int64))

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_ratings(cls, a, b, lo: int | None = None, hi: int | None = None) -> "ConfusionMatrix":
        """Rows rater ``a``, columns rater ``b``; categories lo..hi (default: observed range)."""
        a = np.asarray(a, dtype=np.int64).ravel()
        b = np.asarray(b, dtype=np.int64).ravel()
        if a.shape != b.shape or a.size == 0:
            raise MetricError("ratings must be two equal-length nonempty sequences")
        lo = int(min(a.min(), b.min())) if lo is None else lo
        hi = int(max(a.max(), b.max())) if hi is None else hi
        K = hi - lo + 1
        counts = np.zeros((K, K), dtype=np.int64)
        np.add.at(counts, (a - lo, b - lo), 1)
        return cls(counts)


def quadratic_weighted_kappa(cm: ConfusionMatrix) -> float:
    O = cm.counts.astype(np.float64)
    total = O.sum()
    if total <= 0:
        raise MetricError("kappa of an empty confusion matrix")
    K = cm.k
    if K < 2:
        raise MetricError("kappa needs at least two categories")
    O = O / total
    E = np.outer(O.sum(axis=1), O.sum(axis=0))
    i = np.arange(K)
    w = (i[:, None] - i[None, :]) ** 2 / (K - 1) ** 2
    den = float((w * E).sum())
    num = float((w * O).sum())
    if den == 0.0:
        if num == 0.0:
            return 1.0
        raise MetricError("undefined kappa")
    return 1.0 - num / den


def kappa_from_ratings(a, b) -> float:
    """Quadratic kappa over the observed category range; a single shared category counts as agreement."""
    cm = ConfusionMatrix.from_ratings(a, b)
    if cm.k == 1:
        return 1.0
    return quadratic_weighted_kappa(cm)


# ------------------------------------------------------------ segmentation

def dice(a: BinaryMask, b: BinaryMask) -> float:
    if a.dims != b.dims:
        raise MetricError(f"mask dims differ: {a.dims} vs {b.dims}")
    na, nb = int(a.bits.sum()), int(b.bits.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a.bits, b.bits).sum()) / (na + nb)


def per_segment_volume(lm: LabelMask, spacing) -> np.ndarray:
    """Volume in mm^3 of labels 1..8, in label order."""
    counts = np.bincount(lm.labels.ravel(), minlength=N_SEGMENT_LABELS + 1)[1:N_SEGMENT_LABELS + 1]
    sx, sy, sz = (float(s) for s in spacing)
    return counts * (sx * sy * sz)


# ---------------------------------------------------------------- reports

@dataclass
class MetricsReport:
    """Per-landmark and aggregate localization metrics."""

    per_landmark: dict[str, dict[str, float]]
    aggregate: dict[str, float]
    n_cases: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_cases": self.n_cases,
            "per_landmark": self.per_landmark,
            "aggregate": self.aggregate,
            **self.extra,
        }


def localization_report(probs: list[np.ndarray], truths: list[np.ndarray], names=LANDMARK_NAMES) -> MetricsReport:
    """Metrics over a set of cases; ``probs[i]`` is (N, D_i), ``truths[i]`` is (N,).

    Kappa is reported per landmark and pooled over all landmarks
    (``kappa_pooled``); ``kappa`` in the aggregate is the per-landmark mean.
    """
    if not probs or len(probs) != len(truths):
        raise MetricError("need one prediction set per case and at least one case")
    truths = np.stack([np.asarray(t, dtype=np.int64) for t in truths])
    preds = np.stack([argmax_prediction(p) for p in probs])
    top1 = np.stack([top_k_hits(p, t, 1) for p, t in zip(probs, truths)])
    top2 = np.stack([top_k_hits(p, t, min(2, p.shape[1])) for p, t in zip(probs, truths)])
    N = truths.shape[1]
    names = list(names)[:N] if len(names) >= N else [f"landmark{j}" for j in range(N)]
    per = {}
    for j, name in enumerate(names):
        per[name] = {
            "mae": mae(preds[:, j], truths[:, j]),
            "top1": float(top1[:, j].mean()),
            "top2": float(top2[:, j].mean()),
            "acc_tau1": tolerance_accuracy(preds[:, j], truths[:, j], 1),
            "kappa": kappa_from_ratings(truths[:, j], preds[:, j]),
        }
    agg = {
        "mae": mae(preds, truths),
        "top1": float(top1.mean()),
        "top2": float(top2.mean()),
        "acc_tau1": tolerance_accuracy(preds, truths, 1),
        "kappa": float(np.mean([per[n]["kappa"] for n in names])),
        "kappa_pooled": kappa_from_ratings(truths.ravel(), preds.ravel()),
    }
    return MetricsReport(per, agg, len(probs))
