"""Training objectives for the backbone, the generator and the final classifier.

Each loss takes :class:`~zsseg.numerics.Tensor` (or array) inputs and returns
a scalar Tensor; call :func:`~zsseg.numerics.backprop` on it for gradients.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import DimensionError, Tensor, as_tensor, concat, logsumexp


def gaussian_kernel(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"kernel arguments differ in shape: {x.shape} vs {y.shape}")
    diff = x - y
    return float(np.exp(-0.5 * diff @ diff))


def pairwise_sq_dists(a, b) -> Tensor:
    """``out[i, j] = ||a_i - b_j||^2`` computed from explicit differences."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    diff = a.reshape(a.shape[0], 1, a.shape[1]) - b.reshape(1, b.shape[0], b.shape[1])
    return (diff * diff).sum(axis=2)


def _kernel_sum(a: Tensor, b: Tensor) -> Tensor:
    # norm expansion: roughly 10x cheaper than explicit differences at these sizes
    sq = (a * a).sum(axis=1, keepdims=True) + (b * b).sum(axis=1, keepdims=True).T - (a @ b.T) * 2.0
    return (sq * -0.5).exp().sum()


def mmd_loss(real, synth, normalized: bool = False) -> Tensor:
    """Gaussian-kernel MMD between two feature sets.

    By default the three double sums are left unnormalized (self pairs
    included), so identical sets give exactly zero.  ``normalized=True``
    divides each sum by its pair count (the biased V-statistic).
    """
    real, synth = as_tensor(real), as_tensor(synth)
    if real.shape[0] == 0 or synth.shape[0] == 0:
        raise ValueError("MMD needs non-empty feature sets")
    if real.shape[1] != synth.shape[1]:
        raise DimensionError(f"feature widths differ: {real.shape[1]} vs {synth.shape[1]}")
    kxx = _kernel_sum(real, real)
    kyy = _kernel_sum(synth, synth)
    kxy = _kernel_sum(real, synth)
    if normalized:
        n, m = real.shape[0], synth.shape[0]
        return kxx * (1.0 / (n * n)) + kyy * (1.0 / (m * m)) - kxy * (2.0 / (n * m))
    return kxx + kyy - kxy * 2.0


def infonce_loss(synth, positive, negatives, tau: float = 0.07) -> Tensor:
    """Mean over synthetic rows of ``-log softmax`` of the positive dot-product logit.

    ``positive`` is the centroid of the real features of the synthesized
    class, ``negatives`` are centroids of the other classes present.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    synth = as_tensor(synth)
    pos = as_tensor(positive).reshape(1, -1)
    negs = [as_tensor(n).reshape(1, -1) for n in negatives]
    if not negs:
        # the positive is the whole denominator
        return (synth.sum() * 0.0)
    centroids = concat([pos] + negs, axis=0)
    logits = (synth @ centroids.T) * (1.0 / tau)
    return (logsumexp(logits, axis=1) - logits[:, 0:1]).mean()


def _row_cosine_distance(u: Tensor, v: Tensor) -> Tensor:
    """Per-row ``1 - cos``; rows where either side has zero norm give 1."""
    uu = (u * u).sum(axis=1)
    vv = (v * v).sum(axis=1)
    zero = (uu.data == 0.0) | (vv.data == 0.0)
    valid = (~zero).astype(np.float64)
    nu = (uu + (uu.data == 0.0).astype(np.float64)).sqrt()
    nv = (vv + (vv.data == 0.0).astype(np.float64)).sqrt()
    cos = (u * v).sum(axis=1) / (nu * nv) * valid
    return 1.0 - cos


def cosine_distance(u, v) -> Tensor:
    u = as_tensor(u)
    v = as_tensor(v)
    if u.shape[-1] != v.shape[-1]:
        raise DimensionError(f"vector lengths differ: {u.shape} vs {v.shape}")
    return _row_cosine_distance(u.reshape(1, -1), v.reshape(1, -1)).sum()


def align_loss(prototypes, sigma_t) -> Tensor:
    """Mean cosine distance from each visual prototype to the mapped semantic vector."""
    prototypes = as_tensor(prototypes)
    sigma_t = as_tensor(sigma_t).reshape(1, -1)
    if prototypes.shape[0] < 1:
        raise ValueError("need at least one prototype")
    if prototypes.shape[1] != sigma_t.shape[1]:
        raise DimensionError(f"prototype width {prototypes.shape[1]} != mapped width {sigma_t.shape[1]}")
    ones = Tensor(np.ones((prototypes.shape[0], 1)))
    return _row_cosine_distance(prototypes, ones @ sigma_t).mean()


@dataclass
class RelationMatrices:
    semantic: Tensor  # W
    visual: Tensor  # V


def relation_matrices(semantic_set, visual_set) -> RelationMatrices:
    semantic_set, visual_set = as_tensor(semantic_set), as_tensor(visual_set)
    m = semantic_set.shape[0]
    if m != visual_set.shape[0]:
        raise DimensionError(f"semantic set has {m} rows, visual set {visual_set.shape[0]}")
    if m < 2:
        raise ValueError("relation matrices need at least two prototypes")
    return RelationMatrices(pairwise_sq_dists(semantic_set, semantic_set), pairwise_sq_dists(visual_set, visual_set))


def consistency_loss(rel: RelationMatrices, flatten: bool = False) -> Tensor:
    """Sum over rows of the cosine distance between matching rows of W and V.

    With ``flatten=True`` the two matrices are compared as single vectors.
    """
    w, v = as_tensor(rel.semantic), as_tensor(rel.visual)
    if w.shape != v.shape:
        raise DimensionError(f"relation matrices differ in shape: {w.shape} vs {v.shape}")
    if flatten:
        return cosine_distance(w.reshape(-1), v.reshape(-1))
    return _row_cosine_distance(w, v).sum()


def cross_entropy(logits, labels: Sequence[int], class_weights=None) -> Tensor:
    """Weighted mean negative log-likelihood: ``-(1/n) sum_i w[y_i] log p_i[y_i]``."""
    logits = as_tensor(logits)
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise DimensionError(f"{n} logit rows but {labels.shape} labels")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    weights = np.ones(c) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (c,) or (weights < 0).any():
        raise ValueError("class weights must be a non-negative vector, one per class")
    if n == 0:
        return logits.sum() * 0.0
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = weights[labels]
    logp = logits - logsumexp(logits, axis=1)
    return (logp * Tensor(onehot)).sum() * (-1.0 / n)


def generator_loss(parts: dict, alpha: float = 0.4) -> Tensor:
    """``mmd + con + align + alpha * cst`` for one class; missing parts count as zero."""
    total = Tensor(0.0)
    for key, scale in (("mmd", 1.0), ("con", 1.0), ("align", 1.0), ("cst", alpha)):
        part = parts.get(key)
        if part is None:
            continue
        part = as_tensor(part)
        if not np.isfinite(part.data).all():
            raise ValueError(f"loss part {key!r} is not finite")
        total = total + part * scale if scale != 1.0 else total + part
    return total
