"""Self-contained gradient and oracle suites (used by the ``grad-check`` and
``oracle-check`` subcommands and by the acceptance tests).

The reference implementations here are deliberately naive loops that share
no code with the vectorized routines they check.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import geometry, losses
from .embeddings import mask_semantics
from .numerics import MlpSpec, ParamStore, Tensor, finite_diff_check, init_mlp, mlp_forward


@dataclass
class CheckResult:
    name: str
    value: float
    threshold: float
    passed: bool

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.value:.3e} (limit {self.threshold:.1e})"


# -- naive references ---------------------------------------------------------


def mmd_reference(real: np.ndarray, synth: np.ndarray) -> float:
    def k(a, b):
        s = 0.0
        for j in range(len(a)):
            s += (a[j] - b[j]) ** 2
        return math.exp(-0.5 * s)

    total = 0.0
    for x in real:
        for x2 in real:
            total += k(x, x2)
    for y in synth:
        for y2 in synth:
            total += k(y, y2)
    for x in real:
        for y in synth:
            total -= 2.0 * k(x, y)
    return total


def fps_reference(points: np.ndarray, k: int, start_rule: str = "max_norm") -> list[int]:
    """O(n^2 k): recompute every candidate's min distance from scratch each round."""
    n = len(points)

    def sq(i, j):
        return float(sum((points[i][t] - points[j][t]) ** 2 for t in range(points.shape[1])))

    if start_rule == "first_index":
        chosen = [0]
    else:
        norms = [float(sum(v * v for v in p)) for p in points]
        chosen = [max(range(n), key=lambda i: (norms[i], -i))]
    while len(chosen) < k:
        best, best_d = None, -1.0
        for i in range(n):
            if i in chosen:
                continue
            d = min(sq(i, j) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def region_means_reference(features: np.ndarray, anchors: list[int]) -> np.ndarray:
    groups: dict[int, list[np.ndarray]] = {b: [] for b in range(len(anchors))}
    for i, x in enumerate(features):
        if i in anchors:
            groups[anchors.index(i)].append(x)
            continue
        dists = [float(np.sum((x - features[a]) ** 2)) for a in anchors]
        groups[int(np.argmin(dists))].append(x)
    return np.array([np.mean(groups[b], axis=0) for b in range(len(anchors))])


def relation_reference(points: np.ndarray) -> np.ndarray:
    m = len(points)
    out = np.zeros((m, m))
    for e in range(m):
        for j in range(m):
            out[e, j] = sum((points[e][t] - points[j][t]) ** 2 for t in range(points.shape[1]))
    return out


# -- suites ---------------------------------------------------------------------


def _mlp_fn(rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    spec = MlpSpec((4, 6, 5, 3), "leaky_relu", 0.1)
    store = ParamStore()
    init_mlp(store, "m", spec, rng)
    for _, t in store:
        t.data = t.data + rng.normal(0, 0.1, t.shape)
    target = rng.normal(size=(5, 3))
    return lambda x: ((mlp_forward(store, "m", spec, x) - target) ** 2).sum()


def gradient_suite(points: int = 10, seed: int = 0, tol: float = 1e-4) -> list[CheckResult]:
    """Max relative backprop vs central-difference error per operation over ``points`` random inputs."""
    rng = np.random.default_rng(seed)
    cases: dict[str, list[float]] = {}

    def run(name, fn, x):
        cases.setdefault(name, []).append(finite_diff_check(fn, x, h=1e-5))

    for _ in range(points):
        real = rng.normal(size=(6, 3))
        run("mmd", lambda x: losses.mmd_loss(real, x), rng.normal(size=(5, 3)))
        run("mmd_normalized", lambda x: losses.mmd_loss(real, x, normalized=True), rng.normal(size=(5, 3)))
        pos, negs = rng.normal(size=3), list(rng.normal(size=(3, 3)))
        run("infonce", lambda x: losses.infonce_loss(x, pos, negs, tau=0.5), rng.normal(size=(4, 3)))
        protos = rng.normal(size=(4, 3))
        run("align/sigma", lambda x: losses.align_loss(protos, x), rng.normal(size=(1, 3)))
        sig = rng.normal(size=3)
        run("align/prototypes", lambda x: losses.align_loss(x, sig), rng.normal(size=(4, 3)))
        sem = rng.normal(size=(5, 4))
        run("consistency", lambda x: losses.consistency_loss(losses.relation_matrices(sem, x)), rng.normal(size=(5, 3)))
        run(
            "consistency_flat",
            lambda x: losses.consistency_loss(losses.relation_matrices(sem, x), flatten=True),
            rng.normal(size=(5, 3)),
        )
        labels = rng.integers(0, 4, size=6)
        weights = rng.uniform(0.2, 2.0, size=4)
        run("weighted_ce", lambda x: losses.cross_entropy(x, labels, weights), rng.normal(size=(6, 4)))
        run("mlp", _mlp_fn(rng), rng.normal(size=(5, 4)))
    return [CheckResult(f"grad {name}", max(errs), tol, max(errs) < tol) for name, errs in cases.items()]


def oracle_suite(seed: int = 0, mmd_instances: int = 100, fps_instances: int = 200) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []

    worst = 0.0
    for _ in range(mmd_instances):
        n, m, d = rng.integers(1, 9, size=3)
        real, synth = rng.normal(size=(n, d)), rng.normal(size=(m, d))
        worst = max(worst, abs(losses.mmd_loss(real, synth).item() - mmd_reference(real, synth)))
    out.append(CheckResult("oracle mmd vs triple loop", worst, 1e-10, worst <= 1e-10))

    mismatches = 0
    for i in range(fps_instances):
        n = int(rng.integers(1, 65))
        k = int(rng.integers(1, n + 1))
        pts = rng.normal(size=(n, int(rng.integers(1, 5))))
        rule = geometry.START_RULES[i % 2]
        if list(geometry.fps(pts, k, rule)) != fps_reference(pts, k, rule):
            mismatches += 1
    out.append(CheckResult("oracle fps vs greedy reference", mismatches, 0, mismatches == 0))

    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(1, 120))
        feats = rng.normal(size=(n, 4))
        r = float(rng.uniform(0.01, 0.5))
        k = geometry.prototype_count(n, r)
        anchors = fps_reference(feats, k) if n <= 64 else list(geometry.fps(feats, k))
        ref = region_means_reference(feats, anchors)
        worst = max(worst, float(np.max(np.abs(geometry.neighbor_aware_prototypes(feats, r) - ref))))
    out.append(CheckResult("oracle neighbor-aware prototypes", worst, 1e-12, worst <= 1e-12))

    worst = 0.0
    for _ in range(50):
        m = int(rng.integers(2, 8))
        sem, vis = rng.normal(size=(m, 5)), rng.normal(size=(m, 3))
        rel = losses.relation_matrices(sem, vis)
        worst = max(
            worst,
            float(np.max(np.abs(rel.semantic.data - relation_reference(sem)))),
            float(np.max(np.abs(rel.visual.data - relation_reference(vis)))),
        )
    out.append(CheckResult("oracle relation matrices", worst, 1e-12, worst <= 1e-12))

    t = np.ones((100, 100))
    frac = float((mask_semantics(t, 0.2, rng) == 0).mean())
    sd = math.sqrt(0.2 * 0.8 / t.size)
    out.append(CheckResult("mask zero-fraction deviation (in sd)", abs(frac - 0.2) / sd, 3.0, abs(frac - 0.2) <= 3 * sd))
    return out
