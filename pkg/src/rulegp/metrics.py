"""Displacement, likelihood and calibration metrics over anchor distributions."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

NLL_CLAMP = 1e-12
ECE_BINS = 10
REPORT_COLUMNS = ("minADE_1", "minADE_5", "minFDE_1", "NLL", "ECE", "RNK")


class EmptyInputError(ValueError):
    pass


@dataclass(eq=False)
class EvalRecord:
    p: np.ndarray  # (K,)
    gt_future: np.ndarray  # (12, 2) ego-local
    gt_class: int
    anchor_hash: str = ""

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        self.gt_future = np.asarray(getattr(self.gt_future, "points", self.gt_future), dtype=np.float64)
        if abs(self.p.sum() - 1.0) > 1e-9 or np.any(self.p < 0):
            raise ValueError("probabilities must be nonnegative and sum to 1")
        if not 0 <= self.gt_class < len(self.p):
            raise ValueError(f"gt_class {self.gt_class} outside [0, {len(self.p)})")


def _anchors(anchors) -> np.ndarray:
    return np.asarray(getattr(anchors, "anchors", anchors), dtype=np.float64)


def top_k(p: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` most probable classes; ties go to the lower index."""
    if not 1 <= k <= len(p):
        raise ValueError(f"k={k} outside [1, {len(p)}]")
    return np.argsort(-np.asarray(p), kind="stable")[:k]


def min_ade_k(record: EvalRecord, anchors, k: int) -> float:
    A = _anchors(anchors)[top_k(record.p, k)]
    d = np.sqrt(((A - record.gt_future[None]) ** 2).sum(axis=-1)).mean(axis=1)
    return float(d.min())


def min_fde_k(record: EvalRecord, anchors, k: int) -> float:
    A = _anchors(anchors)[top_k(record.p, k)]
    d = np.sqrt(((A[:, -1] - record.gt_future[-1]) ** 2).sum(axis=-1))
    return float(d.min())


def nll(record: EvalRecord) -> float:
    return float(-np.log(max(record.p[record.gt_class], NLL_CLAMP)))


def rnk(record: EvalRecord) -> int:
    order = np.argsort(-record.p, kind="stable")
    return int(np.nonzero(order == record.gt_class)[0][0]) + 1


def ece(records, bins: int = ECE_BINS) -> float:
    records = list(records)
    if not records:
        raise EmptyInputError("ECE needs at least one record")
    conf = np.array([r.p.max() for r in records])
    correct = np.array([int(np.argmax(r.p)) == r.gt_class for r in records], dtype=np.float64)
    return _ece(conf, correct, bins)


def _ece(conf: np.ndarray, correct: np.ndarray, bins: int = ECE_BINS) -> float:
    # bin b covers (b/bins, (b+1)/bins]
    idx = np.clip(np.ceil(conf * bins).astype(np.int64) - 1, 0, bins - 1)
    total = 0.0
    for b in range(bins):
        sel = idx == b
        n_b = int(sel.sum())
        if n_b:
            # fsum keeps the result independent of record order
            acc = math.fsum(correct[sel]) / n_b
            avg = math.fsum(conf[sel]) / n_b
            total += n_b / len(conf) * abs(acc - avg)
    return float(total)


def aggregate(records, anchors) -> dict:
    """Per-record means plus a single global ECE."""
    records = list(records)
    if not records:
        raise EmptyInputError("cannot aggregate zero records")
    K = len(_anchors(anchors))
    k5 = min(5, K)
    return {
        "minADE_1": float(np.mean([min_ade_k(r, anchors, 1) for r in records])),
        "minADE_5": float(np.mean([min_ade_k(r, anchors, k5) for r in records])),
        "minFDE_1": float(np.mean([min_fde_k(r, anchors, 1) for r in records])),
        "NLL": float(np.mean([nll(r) for r in records])),
        "ECE": ece(records),
        "RNK": float(np.mean([rnk(r) for r in records])),
    }


def evaluate_predictions(P: np.ndarray, futures: np.ndarray, labels: np.ndarray, anchors) -> dict:
    """Same numbers as ``aggregate`` over per-row records, computed in bulk."""
    P = np.asarray(P, dtype=np.float64)
    F = np.asarray(futures, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(P) == 0:
        raise EmptyInputError("cannot aggregate zero records")
    if np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-9) or np.any(P < 0):
        raise ValueError("probabilities must be nonnegative and sum to 1")
    A = _anchors(anchors)
    K = len(A)
    if P.shape[1] != K or np.any(y < 0) or np.any(y >= K):
        raise ValueError("labels or probability columns do not match the anchor set")
    rows = np.arange(len(P))
    order = np.argsort(-P, axis=1, kind="stable")
    ade = np.empty((len(P), K))
    fde = np.empty((len(P), K))
    for n in range(len(P)):
        d = np.sqrt(((A - F[n][None]) ** 2).sum(axis=-1))
        ade[n] = d.mean(axis=1)
        fde[n] = np.sqrt(((A[:, -1] - F[n][-1]) ** 2).sum(axis=-1))
    ranked_ade = np.take_along_axis(ade, order, axis=1)
    k5 = min(5, K)
    rank = np.argmax(order == y[:, None], axis=1) + 1
    correct = (np.argmax(P, axis=1) == y).astype(np.float64)
    return {
        "minADE_1": float(np.mean(ranked_ade[:, 0])),
        "minADE_5": float(np.mean(ranked_ade[:, :k5].min(axis=1))),
        "minFDE_1": float(np.mean(fde[rows, order[:, 0]])),
        "NLL": float(np.mean(-np.log(np.maximum(P[rows, y], NLL_CLAMP)))),
        "ECE": _ece(P.max(axis=1), correct),
        "RNK": float(np.mean(rank)),
    }


def format_value(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.15g}"
    return str(x)


def rows_to_csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([format_value(row[c]) for c in columns])
    return buf.getvalue()
