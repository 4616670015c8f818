"""Fixed anchor trajectory set built by greedy epsilon-coverage."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene import FUTURE_LEN


@dataclass(eq=False)
class AnchorSet:
    anchors: np.ndarray  # (K, 12, 2) ego-local
    epsilon: float
    hash: str = ""

    def __post_init__(self):
        self.anchors = np.asarray(self.anchors, dtype=np.float64)
        if not self.hash:
            self.hash = anchor_hash(self.anchors, self.epsilon)

    def __len__(self):
        return len(self.anchors)

    @property
    def K(self) -> int:
        return len(self.anchors)

    def __eq__(self, other):
        return (
            isinstance(other, AnchorSet)
            and self.epsilon == other.epsilon
            and self.hash == other.hash
            and np.array_equal(self.anchors, other.anchors)
        )


def anchor_hash(anchors: np.ndarray, epsilon: float) -> str:
    h = hashlib.sha256()
    h.update(np.asarray(anchors, dtype="<f8").tobytes())
    h.update(np.float64(epsilon).astype("<f8").tobytes())
    return h.hexdigest()[:16]


def _as_array(futures) -> np.ndarray:
    arr = np.stack([getattr(f, "points", f) for f in futures]) if not isinstance(futures, np.ndarray) else futures
    return np.asarray(arr, dtype=np.float64)


def max_pointwise_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``(len(a), len(b))`` matrix of max-over-time L2 distances."""
    out = np.zeros((len(a), len(b)))
    for t in range(a.shape[1]):
        dx = a[:, None, t, 0] - b[None, :, t, 0]
        dy = a[:, None, t, 1] - b[None, :, t, 1]
        np.maximum(out, dx * dx + dy * dy, out=out)
    return np.sqrt(out)


def coverage_matrix(futures: np.ndarray, epsilon: float, chunk: int = 512) -> np.ndarray:
    n = len(futures)
    cover = np.empty((n, n), dtype=bool)
    for i in range(0, n, chunk):
        cover[i : i + chunk] = max_pointwise_distance(futures[i : i + chunk], futures) <= epsilon
    return cover


def build_cover_set(futures, epsilon: float) -> AnchorSet:
    """Greedy set cover: repeatedly pick the future covering most uncovered futures.

    Ties go to the lowest candidate index.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    fut = _as_array(futures) if len(futures) else np.zeros((0, FUTURE_LEN, 2))
    if len(fut) == 0:
        raise ValueError("cannot build an anchor set from no futures")
    if fut.shape[1:] != (FUTURE_LEN, 2):
        raise ValueError(f"futures must have shape (N, {FUTURE_LEN}, 2), got {fut.shape}")
    cover = coverage_matrix(fut, epsilon)
    uncovered = np.ones(len(fut), dtype=bool)
    counts = cover.sum(axis=1).astype(np.int64)
    picks = []
    while uncovered.any():
        c = int(np.argmax(counts))
        picks.append(c)
        newly = cover[c] & uncovered
        uncovered &= ~newly
        counts -= cover[:, newly].sum(axis=1)
    return AnchorSet(fut[picks].copy(), float(epsilon))


def summed_distances(futures: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """``(N, K)`` summed pointwise L2 distances."""
    futures = np.asarray(futures, dtype=np.float64)
    out = np.zeros((len(futures), len(anchors)))
    for t in range(anchors.shape[1]):
        diff = futures[:, None, t, :] - anchors[None, :, t, :]
        out += np.sqrt(np.einsum("nkj,nkj->nk", diff, diff))
    return out


def nearest_anchor(future, anchor_set: AnchorSet) -> int:
    pts = np.asarray(getattr(future, "points", future), dtype=np.float64)
    return int(np.argmin(summed_distances(pts[None], anchor_set.anchors)[0]))


def assign_labels(futures, anchor_set: AnchorSet) -> np.ndarray:
    fut = _as_array(futures)
    if len(fut) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmin(summed_distances(fut, anchor_set.anchors), axis=1).astype(np.int64)


def save_anchors(anchor_set: AnchorSet, path) -> None:
    header = {"epsilon": anchor_set.epsilon, "K": anchor_set.K, "hash": anchor_set.hash}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for a in anchor_set.anchors:
            fh.write(json.dumps(a.reshape(-1).tolist(), separators=(",", ":")) + "\n")


def load_anchors(path) -> AnchorSet:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    anchors = np.array([json.loads(l) for l in lines[1:]], dtype=np.float64).reshape(-1, FUTURE_LEN, 2)
    if len(anchors) != header["K"]:
        raise ValueError(f"{path}: header says K={header['K']}, found {len(anchors)} anchors")
    out = AnchorSet(anchors, float(header["epsilon"]))
    if out.hash != header["hash"]:
        raise ValueError(f"{path}: anchor hash mismatch")
    return out
