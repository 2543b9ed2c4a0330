"""Procedural toy benchmark.

Class centers in input space are a hidden linear image of the class
embeddings (mixed with an independent random center by ``rho``), so what the
generator learns on seen classes can transfer to unseen ones.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .embeddings import SemanticTable, synth_embeddings

SCENE_MAGIC = "ZSSEG-SCENE v1"


@dataclass(frozen=True)
class ToyWorld:
    table: SemanticTable
    hidden_map: np.ndarray  # (D_sem, D_in)
    random_centers: np.ndarray  # (C, D_in)
    centers: np.ndarray  # (C, D_in)
    class_scales: np.ndarray  # (C,) per-class noise multiplier
    rho: float
    noise_scale: float

    @property
    def input_dim(self) -> int:
        return self.hidden_map.shape[1]


@dataclass
class PointScene:
    points: np.ndarray  # (N, D_in)
    labels: np.ndarray  # (N,)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.points.ndim != 2 or self.points.shape[0] != self.labels.shape[0]:
            raise ValueError("one label per point required")
        if self.points.shape[0] < 1:
            raise ValueError("a scene needs at least one point")

    @property
    def class_ids(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels) if c >= 0)


def make_toy_table(
    num_seen: int = 8,
    num_unseen: int = 4,
    dim: int = 16,
    seed: int = 0,
    min_angle_deg: float = 60.0,
    unseen_angle_deg: float = 40.0,
) -> SemanticTable:
    """Seen classes spread apart; each unseen class sits ``unseen_angle_deg`` from one seen class."""
    base = synth_embeddings(num_seen, dim, seed, min_angle_deg)
    rng = np.random.default_rng([seed, 1])
    anchors = rng.choice(num_seen, size=num_unseen, replace=num_unseen > num_seen)
    phi = math.radians(unseen_angle_deg)
    unseen = []
    for a in anchors:
        s = base.vectors[a]
        u = rng.standard_normal(dim)
        u -= (u @ s) * s
        u /= np.linalg.norm(u)
        unseen.append(math.cos(phi) * s + math.sin(phi) * u)
    vectors = np.concatenate([base.vectors, np.array(unseen).reshape(num_unseen, dim)])
    names = tuple(f"seen{i}" for i in range(num_seen)) + tuple(f"unseen{i}" for i in range(num_unseen))
    return SemanticTable(names, vectors, (True,) * num_seen + (False,) * num_unseen)


def make_toy_world(
    table: SemanticTable,
    input_dim: int = 12,
    rho: float = 1.0,
    noise_scale: float = 0.6,
    seed: int = 0,
    center_scale: float = 1.0,
    scale_jitter: float = 0.25,
) -> ToyWorld:
    if input_dim < 2:
        raise ValueError("input_dim must be >= 2")
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    hidden = rng.normal(0.0, center_scale, size=(table.dim, input_dim))
    random_centers = rng.normal(0.0, center_scale, size=(table.num_classes, input_dim))
    scales = 1.0 + rng.uniform(-scale_jitter, scale_jitter, size=table.num_classes)
    centers = rho * (table.vectors @ hidden) + (1.0 - rho) * random_centers
    return ToyWorld(table, hidden, random_centers, centers, scales, float(rho), float(noise_scale))


def sample_scene(world: ToyWorld, class_ids: Sequence[int], points_per_class: int | Sequence[int], seed) -> PointScene:
    rng = np.random.default_rng(seed)
    class_ids = [int(c) for c in class_ids]
    if isinstance(points_per_class, (int, np.integer)):
        counts = [int(points_per_class)] * len(class_ids)
    else:
        counts = [int(n) for n in points_per_class]
    pts, labels = [], []
    for c, n in zip(class_ids, counts):
        if not 0 <= c < world.table.num_classes:
            raise ValueError(f"unknown class id {c}")
        noise = rng.standard_normal((n, world.input_dim)) * (world.noise_scale * world.class_scales[c])
        pts.append(world.centers[c] + noise)
        labels.append(np.full(n, c))
    points = np.concatenate(pts)
    labels = np.concatenate(labels)
    order = rng.permutation(len(labels))
    return PointScene(points[order], labels[order])


def make_splits(
    world: ToyWorld,
    num_train_scenes: int = 40,
    num_test_scenes: int = 10,
    seed: int = 0,
    points_per_class: int = 60,
    classes_per_train_scene: int = 4,
) -> tuple[list[PointScene], list[PointScene]]:
    """Seen-only training scenes and test scenes holding every class."""
    table = world.table
    table.check_gzsl()
    seen = table.seen_ids
    rng = np.random.default_rng([seed, 7])
    k = min(classes_per_train_scene, len(seen))
    train = []
    for i in range(num_train_scenes):
        ids = sorted(rng.choice(seen, size=k, replace=False).tolist())
        train.append(sample_scene(world, ids, points_per_class, [seed, 0, i]))
    all_ids = list(range(table.num_classes))
    test = [sample_scene(world, all_ids, points_per_class, [seed, 1, i]) for i in range(num_test_scenes)]
    return train, test


def save_scene(path, scene: PointScene) -> None:
    n, d = scene.points.shape
    lines = [f"{SCENE_MAGIC} {n} {d}"]
    for label, row in zip(scene.labels, scene.points):
        lines.append(" ".join([str(int(label))] + [f"{v:.17g}" for v in row]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_scene(path) -> PointScene:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 4 or " ".join(head[:2]) != SCENE_MAGIC:
        raise ValueError(f"{path}: not a {SCENE_MAGIC} file")
    n, d = int(head[2]), int(head[3])
    body = [ln.split() for ln in lines[1 : 1 + n]]
    if len(body) != n or any(len(parts) != d + 1 for parts in body):
        raise ValueError(f"{path}: expected {n} rows of 1 + {d} fields")
    labels = np.array([int(parts[0]) for parts in body], dtype=np.int64)
    points = np.array([[float(v) for v in parts[1:]] for parts in body]).reshape(n, d)
    return PointScene(points, labels)
