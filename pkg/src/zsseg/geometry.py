"""Farthest point sampling, anchor assignment and visual prototypes.

All routines take plain ``(n, d)`` float arrays; prototypes built from real
backbone features carry no gradient, so nothing here touches the tape.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

START_RULES = ("first_index", "max_norm")


@dataclass(frozen=True)
class AnchorAssignment:
    anchors: np.ndarray  # point indices of the anchors
    labels: np.ndarray  # per-point position into ``anchors``

    @property
    def num_anchors(self) -> int:
        return len(self.anchors)


def _sq_dist_to(features: np.ndarray, row: np.ndarray) -> np.ndarray:
    diff = features - row
    return np.einsum("ij,ij->i", diff, diff)


def fps(features: np.ndarray, k: int, start_rule: str = "max_norm") -> np.ndarray:
    """Greedy max-min farthest point sampling; ties go to the lowest index."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"fps needs 1 <= k <= n, got k={k}, n={n}")
    if start_rule == "first_index":
        first = 0
    elif start_rule == "max_norm":
        first = int(np.argmax(np.einsum("ij,ij->i", features, features)))
    else:
        raise ValueError(f"unknown start rule {start_rule!r}")

    chosen = [first]
    min_d = _sq_dist_to(features, features[first])
    min_d[first] = -1.0
    for _ in range(1, k):
        nxt = int(np.argmax(min_d))
        chosen.append(nxt)
        min_d = np.minimum(min_d, _sq_dist_to(features, features[nxt]))
        min_d[chosen] = -1.0
    return np.array(chosen, dtype=np.int64)


def assign_to_anchors(features: np.ndarray, anchor_indices) -> AnchorAssignment:
    features = np.asarray(features, dtype=np.float64)
    anchor_indices = np.asarray(anchor_indices, dtype=np.int64)
    if anchor_indices.size == 0:
        raise ValueError("need at least one anchor")
    anchors = features[anchor_indices]
    d = np.stack([_sq_dist_to(features, a) for a in anchors], axis=1)
    labels = np.argmin(d, axis=1)
    # duplicate anchors tie at distance 0; each still keeps its own point
    labels[anchor_indices] = np.arange(len(anchor_indices))
    return AnchorAssignment(anchor_indices, labels)


def prototype_count(n: int, r: float, rounding: str = "floor") -> int:
    """Number of regions for ``n`` points at ratio ``r`` (never below one)."""
    if rounding == "floor":
        count = math.floor(n * r)
    elif rounding == "round":
        count = math.floor(n * r + 0.5)
    else:
        raise ValueError(f"unknown rounding {rounding!r}")
    return min(n, max(1, count))


def region_means(features: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    sums = np.zeros((k, features.shape[1]))
    np.add.at(sums, labels, features)
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    return sums / counts[:, None]


def neighbor_aware_prototypes(
    features: np.ndarray, r: float, start_rule: str = "max_norm", rounding: str = "floor"
) -> np.ndarray:
    """FPS anchors on the features, nearest-anchor regions, one mean per region."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] < 1:
        raise ValueError("need at least one feature")
    k = prototype_count(features.shape[0], r, rounding)
    assignment = assign_to_anchors(features, fps(features, k, start_rule))
    return region_means(features, assignment.labels, k)


def simple_average_prototype(features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] < 1:
        raise ValueError("need at least one feature")
    return features.mean(axis=0, keepdims=True)


def kmeans_prototypes(features: np.ndarray, k: int, iters: int = 20, seed: int = 0) -> np.ndarray:
    """Lloyd's algorithm from ``k`` distinct rows drawn with ``seed``.

    An emptied cluster is moved onto the point lying farthest from its own
    center.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"kmeans needs 1 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    centers = features[np.sort(rng.choice(n, size=k, replace=False))].copy()
    for _ in range(iters):
        d = np.stack([_sq_dist_to(features, c) for c in centers], axis=1)
        labels = np.argmin(d, axis=1)
        counts = np.bincount(labels, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            own = d[np.arange(n), labels]
            far = int(np.argmax(own))
            labels[far] = empty
            d[far] = np.inf
            d[far, empty] = 0.0
        new = region_means(features, labels, k)
        if np.array_equal(new, centers):
            break
        centers = new
    return centers


PROTOTYPE_STRATEGIES = ("neighbor_aware", "simple_average", "kmeans")


def build_prototypes(
    features: np.ndarray,
    strategy: str = "neighbor_aware",
    r: float = 0.04,
    start_rule: str = "max_norm",
    rounding: str = "floor",
    seed: int = 0,
) -> np.ndarray:
    """Dispatch to one of the prototype strategies compared in the ablation."""
    if strategy == "neighbor_aware":
        return neighbor_aware_prototypes(features, r, start_rule, rounding)
    if strategy == "simple_average":
        return simple_average_prototype(features)
    if strategy == "kmeans":
        k = prototype_count(len(features), r, rounding)
        return kmeans_prototypes(features, k, seed=seed)
    raise ValueError(f"unknown prototype strategy {strategy!r}")
