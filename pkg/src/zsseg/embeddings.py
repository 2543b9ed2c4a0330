"""Class semantic embeddings: loading, concatenation, synthesis and masking."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class EmbeddingFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SemanticTable:
    names: tuple[str, ...]
    vectors: np.ndarray  # (C, D)
    seen: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "seen", tuple(bool(s) for s in self.seen))
        vectors = np.array(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(self.names):
            raise ValueError(f"need one vector per class: {vectors.shape} for {len(self.names)} names")
        if len(self.seen) != len(self.names):
            raise ValueError("one seen flag per class")
        vectors.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def seen_ids(self) -> list[int]:
        return [i for i, s in enumerate(self.seen) if s]

    @property
    def unseen_ids(self) -> list[int]:
        return [i for i, s in enumerate(self.seen) if not s]

    def vector(self, class_id: int) -> np.ndarray:
        if not 0 <= class_id < self.num_classes:
            raise KeyError(f"unknown class id {class_id}")
        return self.vectors[class_id]

    def with_seen(self, seen: Sequence[bool]) -> "SemanticTable":
        return SemanticTable(self.names, self.vectors, tuple(seen))

    def check_gzsl(self):
        if not self.seen_ids or not self.unseen_ids:
            raise ValueError("a GZSL table needs at least one seen and one unseen class")


def load_word_vectors(path, class_names: Sequence[str], seen: Sequence[bool] | None = None) -> SemanticTable:
    """Read ``token v1 ... vD`` lines and keep the rows for ``class_names``."""
    wanted = set(class_names)
    found: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            parts = [p for p in parts if p]
            if not parts:
                continue
            values = parts[1:]
            if dim is None:
                dim = len(values)
            elif len(values) != dim:
                raise EmbeddingFormatError(f"{path}:{lineno}: expected {dim} values, found {len(values)}")
            if parts[0] in wanted and parts[0] not in found:
                try:
                    found[parts[0]] = np.array([float(v) for v in values])
                except ValueError as exc:
                    raise EmbeddingFormatError(f"{path}:{lineno}: {exc}") from None
    missing = [c for c in class_names if c not in found]
    if missing:
        raise KeyError(f"class token {missing[0]!r} not found in {path}")
    vectors = np.stack([found[c] for c in class_names]) if class_names else np.zeros((0, dim or 0))
    if seen is None:
        seen = [True] * len(class_names)
    return SemanticTable(tuple(class_names), vectors, tuple(seen))


def save_word_vectors(path, table: SemanticTable) -> None:
    lines = [" ".join([name] + [f"{v:.17g}" for v in row]) for name, row in zip(table.names, table.vectors)]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8", newline="\n")


def concat_embeddings(a: SemanticTable, b: SemanticTable) -> SemanticTable:
    """Row-wise concatenation, e.g. GloVe (300) + Word2Vec (300) -> 600."""
    if a.names != b.names:
        raise ValueError("tables must list the same classes in the same order")
    return SemanticTable(a.names, np.concatenate([a.vectors, b.vectors], axis=1), a.seen)


def synth_embeddings(
    num_classes: int,
    dim: int,
    seed: int,
    min_angle_deg: float = 60.0,
    max_tries: int = 200,
    seen: Sequence[bool] | None = None,
    names: Sequence[str] | None = None,
) -> SemanticTable:
    """Random unit vectors whose pairwise angles are all at least ``min_angle_deg``.

    Vectors are drawn one at a time by rejection; a run that gets stuck is
    restarted, and ``max_tries`` restarts without success raise ValueError.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    cos_max = math.cos(math.radians(min_angle_deg))
    rng = np.random.default_rng(seed)
    names = tuple(names) if names is not None else tuple(f"class{i}" for i in range(num_classes))
    seen = tuple(seen) if seen is not None else (True,) * num_classes

    if cos_max <= 1e-12 and num_classes <= dim:
        # random orthonormal frame; rejection sampling would never hit exact orthogonality
        q, _ = np.linalg.qr(rng.standard_normal((dim, num_classes)))
        vecs = q.T.copy()
        if _max_cos(vecs) <= max(cos_max, 0.0) + 1e-12:
            return SemanticTable(names, vecs, seen)
        raise ValueError("could not build orthogonal embeddings")

    for _ in range(max_tries):
        vecs: list[np.ndarray] = []
        for _attempt in range(1000):
            v = rng.standard_normal(dim)
            v /= np.linalg.norm(v)
            if all(float(v @ u) <= cos_max for u in vecs):
                vecs.append(v)
                if len(vecs) == num_classes:
                    return SemanticTable(names, np.stack(vecs), seen)
    raise ValueError(f"could not place {num_classes} vectors in {dim} dims at >= {min_angle_deg} degrees")


def _max_cos(vecs: np.ndarray) -> float:
    g = vecs @ vecs.T
    np.fill_diagonal(g, -np.inf)
    return float(g.max())


def replicate_per_point(vector: np.ndarray, n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    vector = np.asarray(vector, dtype=np.float64).reshape(1, -1)
    return np.repeat(vector, n, axis=0)


MASK_MODES = ("elementwise", "per_point")


def mask_semantics(t: np.ndarray, q: float, rng: np.random.Generator, mode: str = "elementwise") -> np.ndarray:
    """Zero entries (or whole rows) independently with probability ``q``."""
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"mask probability must lie in [0, 1], got {q}")
    t = np.asarray(t, dtype=np.float64)
    if q == 0.0:
        return t.copy()
    if q == 1.0:
        return np.zeros_like(t)
    if mode == "elementwise":
        keep = rng.random(t.shape) >= q
    elif mode == "per_point":
        keep = (rng.random((t.shape[0], 1)) >= q)
    else:
        raise ValueError(f"unknown mask mode {mode!r}")
    return t * keep
