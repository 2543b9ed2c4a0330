"""Three-stage generalized zero-shot segmentation training and inference.

a) backbone + seen classifier on seen-only scenes,
b) generator (plus the semantic map ``sigma``) against frozen backbone features,
c) final classifier on real seen features and synthetic unseen features.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import geometry
from .datagen import PointScene
from .embeddings import SemanticTable, mask_semantics, replicate_per_point
from .losses import (
    align_loss,
    consistency_loss,
    cross_entropy,
    generator_loss,
    infonce_loss,
    mmd_loss,
    relation_matrices,
)
from .metrics import ConfusionMatrix, IGNORE_LABEL, MetricsReport
from .numerics import (
    AdamState,
    MlpSpec,
    NumericError,
    ParamStore,
    Tensor,
    adam_step,
    backprop,
    concat,
    init_mlp,
    mlp_forward,
    poly_lr,
)

log = logging.getLogger(__name__)


class StageOrderError(RuntimeError):
    """A stage was invoked before the stage it depends on."""


class ContaminationError(ValueError):
    """Unseen-class point data reached a stage that must only see seen classes."""


class ConfigurationError(ValueError):
    pass


RNG_STREAMS = {"world": 0, "data": 1, "mask": 2, "noise": 3, "init": 4, "shuffle": 5, "calib": 6}


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for one named randomness source."""
    return np.random.default_rng([int(seed), RNG_STREAMS[name], *extra])


@dataclass
class TrainConfig:
    q: float = 0.2
    r: float = 0.04
    alpha: float = 0.4
    tau: float = 0.07
    lr_generator: float = 2e-4
    lr_backbone: float = 7e-3
    lr_head: float = 7e-2
    poly_power: float = 0.9
    backbone_epochs: int = 20
    generator_epochs: int = 20
    classifier_epochs: int = 20
    batch_size: int = 256
    feature_dim: int = 16
    backbone_hidden: int = 32
    generator_hidden: int = 64
    noise_dim: int = 0  # 0: same as the embedding width
    synth_per_class: int = 0  # 0: mean per-class seen count in training
    rtc_points: int = 0  # 0: same as the seen class being synthesized
    gamma: float = 0.0
    unseen_weight: float = 1.0
    seed: int = 0
    mcl_mask: bool = True
    mcl_contrast: bool = True
    hpa: bool = True
    rtc: bool = True
    hpa_prototypes: str = "neighbor_aware"
    rtc_prototypes: str = "simple_average"
    fps_start: str = "max_norm"
    prototype_rounding: str = "floor"
    mask_mode: str = "elementwise"
    mmd_normalized: bool = False
    cst_flatten: bool = False

    def validate(self) -> "TrainConfig":
        if not 0.0 <= self.q <= 1.0:
            raise ConfigurationError(f"q must lie in [0, 1], got {self.q}")
        if not 0.0 < self.r < 1.0:
            raise ConfigurationError(f"r must lie in (0, 1), got {self.r}")
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")
        if self.tau <= 0:
            raise ConfigurationError(f"tau must be > 0, got {self.tau}")
        for key in ("hpa_prototypes", "rtc_prototypes"):
            if getattr(self, key) not in geometry.PROTOTYPE_STRATEGIES:
                raise ConfigurationError(f"{key}: unknown strategy {getattr(self, key)!r}")
        if self.fps_start not in geometry.START_RULES:
            raise ConfigurationError(f"fps_start: unknown rule {self.fps_start!r}")
        if self.prototype_rounding not in ("floor", "round"):
            raise ConfigurationError(f"prototype_rounding must be floor or round")
        if self.mask_mode not in ("elementwise", "per_point"):
            raise ConfigurationError(f"mask_mode must be elementwise or per_point")
        return self

    @property
    def flags(self) -> tuple[bool, bool, bool, bool]:
        return (self.mcl_mask, self.mcl_contrast, self.hpa, self.rtc)


class LabelAudit:
    """Records every class id whose point data a stage reads."""

    def __init__(self):
        self.touched: dict[str, set[int]] = {}

    def record(self, stage: str, labels) -> None:
        ids = {int(c) for c in np.unique(np.asarray(labels)) if c != IGNORE_LABEL}
        self.touched.setdefault(stage, set()).update(ids)

    def all_ids(self, stages: Iterable[str] | None = None) -> set[int]:
        out: set[int] = set()
        for stage, ids in self.touched.items():
            if stages is None or stage in stages:
                out |= ids
        return out


def _record(audit: LabelAudit | None, stage: str, labels) -> None:
    if audit is not None:
        audit.record(stage, labels)


@dataclass
class ModelBundle:
    table: SemanticTable
    input_dim: int
    config: TrainConfig
    params: ParamStore = field(default_factory=ParamStore)
    theta_frozen: bool = False
    generator_trained: bool = False
    final_trained: bool = False
    gamma: float = 0.0
    class_weights: np.ndarray | None = None

    def __post_init__(self):
        cfg = self.config
        d = cfg.feature_dim
        emb = self.table.dim
        self.theta_spec = MlpSpec((self.input_dim, cfg.backbone_hidden, d), "relu")
        self.fseen_spec = MlpSpec((d, len(self.table.seen_ids)))
        self.gen_spec = MlpSpec((emb + self.noise_dim, cfg.generator_hidden, cfg.generator_hidden, d), "leaky_relu")
        self.sigma_spec = MlpSpec((emb, d))
        self.final_spec = MlpSpec((d, self.table.num_classes))

    @property
    def noise_dim(self) -> int:
        return self.config.noise_dim or self.table.dim

    def store(self, prefix: str) -> ParamStore:
        return self.params.subset(prefix + ".")

    def ensure(self, prefix: str, spec: MlpSpec, rng_index: int) -> None:
        if f"{prefix}.W0" not in self.params:
            init_mlp(self.params, prefix, spec, stream(self.config.seed, "init", rng_index))

    # -- forward helpers --------------------------------------------------
    def features(self, points) -> Tensor:
        return mlp_forward(self.params, "theta", self.theta_spec, points)

    def features_np(self, points) -> np.ndarray:
        return self.features(points).data.copy()

    def generate(self, semantics, noise) -> Tensor:
        return mlp_forward(self.params, "gen", self.gen_spec, concat([Tensor(semantics), Tensor(noise)], axis=1))

    def sigma(self, t) -> Tensor:
        return mlp_forward(self.params, "sigma", self.sigma_spec, np.asarray(t, dtype=np.float64).reshape(1, -1))

    def final_logits(self, features) -> Tensor:
        return mlp_forward(self.params, "final", self.final_spec, features)


def _check_seen_only(scenes: Sequence[PointScene], table: SemanticTable) -> None:
    unseen = set(table.unseen_ids)
    for i, scene in enumerate(scenes):
        bad = unseen.intersection(int(c) for c in np.unique(scene.labels))
        if bad:
            raise ContaminationError(f"training scene {i} contains unseen class ids {sorted(bad)}")


def _labelled(scenes: Sequence[PointScene]) -> tuple[np.ndarray, np.ndarray]:
    points = np.concatenate([s.points for s in scenes])
    labels = np.concatenate([s.labels for s in scenes])
    keep = labels != IGNORE_LABEL
    return points[keep], labels[keep]


def _minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _check_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise NumericError(f"non-finite {what} loss")


# ---------------------------------------------------------------------------
# stage a


def train_backbone(bundle: ModelBundle, scenes: Sequence[PointScene], audit: LabelAudit | None = None) -> list[float]:
    """Fit theta and the seen-class head with weighted CE; theta is frozen afterwards."""
    cfg = bundle.config
    table = bundle.table
    _check_seen_only(scenes, table)
    bundle.ensure("theta", bundle.theta_spec, 0)
    bundle.ensure("fseen", bundle.fseen_spec, 1)
    points, labels = _labelled(scenes)
    _record(audit, "backbone", labels)
    seen_index = {c: i for i, c in enumerate(table.seen_ids)}
    targets = np.array([seen_index[int(c)] for c in labels], dtype=np.int64)

    store = bundle.store("theta").merge(bundle.store("fseen"))
    state = AdamState(lr=cfg.lr_backbone)
    rng = stream(cfg.seed, "shuffle", 0)
    batches_per_epoch = math.ceil(len(labels) / cfg.batch_size)
    total = cfg.backbone_epochs * batches_per_epoch
    history = []
    it = 0
    for _ in range(cfg.backbone_epochs):
        for idx in _minibatches(len(labels), cfg.batch_size, rng):
            logits = mlp_forward(bundle.params, "fseen", bundle.fseen_spec, bundle.features(points[idx]))
            loss = cross_entropy(logits, targets[idx])
            _check_finite(loss.item(), "backbone")
            backprop(loss)
            adam_step(state, store, poly_lr(it, total, cfg.lr_backbone, cfg.poly_power))
            history.append(loss.item())
            it += 1
    bundle.theta_frozen = True
    return history


def seen_head_predict(bundle: ModelBundle, points) -> np.ndarray:
    logits = mlp_forward(bundle.params, "fseen", bundle.fseen_spec, bundle.features(points)).data
    return np.asarray(bundle.table.seen_ids)[np.argmax(logits, axis=1)]


# ---------------------------------------------------------------------------
# stage b


def synthesize_features(
    bundle: ModelBundle,
    class_id: int,
    n: int,
    q: float,
    mask_rng: np.random.Generator | None,
    noise_rng: np.random.Generator | None,
    mask_mode: str = "elementwise",
    zero_noise: bool = False,
) -> Tensor:
    """Rows of G(mask(t_c) ++ z) with fresh standard-normal z per row."""
    if n < 1:
        raise ValueError("n must be >= 1")
    t = replicate_per_point(bundle.table.vector(class_id), n)
    if q > 0:
        t = mask_semantics(t, q, mask_rng, mask_mode)
    z = np.zeros((n, bundle.noise_dim)) if zero_noise else noise_rng.standard_normal((n, bundle.noise_dim))
    return bundle.generate(t, z)


def enhance(synth, sigma_t) -> Tensor:
    synth = synth if isinstance(synth, Tensor) else Tensor(synth)
    sigma_t = sigma_t if isinstance(sigma_t, Tensor) else Tensor(np.asarray(sigma_t, dtype=np.float64))
    sigma_t = sigma_t.reshape(1, -1)
    if synth.shape[1] != sigma_t.shape[1]:
        raise ValueError(f"width mismatch: {synth.shape[1]} vs {sigma_t.shape[1]}")
    return synth + sigma_t


def _region_average(features: np.ndarray, synth: Tensor, strategy: str, cfg: TrainConfig) -> Tensor:
    """Differentiable class prototype of ``synth`` under the chosen strategy.

    Region membership is decided on the current values; the prototype is the
    mean of region means (a single mean for simple averaging).
    """
    n = features.shape[0]
    if strategy == "simple_average":
        return synth.mean(axis=0, keepdims=True)
    k = geometry.prototype_count(n, cfg.r, cfg.prototype_rounding)
    if strategy == "neighbor_aware":
        labels = geometry.assign_to_anchors(features, geometry.fps(features, k, cfg.fps_start)).labels
    else:
        centers = geometry.kmeans_prototypes(features, k, seed=cfg.seed)
        d = np.stack([((features - c) ** 2).sum(axis=1) for c in centers], axis=1)
        labels = np.argmin(d, axis=1)
    used = np.unique(labels)
    weights = np.zeros((1, n))
    for b in used:
        members = labels == b
        weights[0, members] = 1.0 / (members.sum() * len(used))
    return Tensor(weights) @ synth


def generator_training_step(
    bundle: ModelBundle,
    scene: PointScene,
    state: AdamState,
    rngs: dict,
    scene_features: np.ndarray | None = None,
    audit: LabelAudit | None = None,
    update: bool = True,
) -> dict[str, float]:
    """One joint update of G and sigma on every seen class in ``scene``."""
    if not bundle.theta_frozen:
        raise StageOrderError("generator training needs a trained, frozen backbone (run train-backbone)")
    cfg = bundle.config
    table = bundle.table
    _check_seen_only([scene], table)
    _record(audit, "generator", scene.labels)
    feats = bundle.features_np(scene.points) if scene_features is None else scene_features
    classes = [c for c in scene.class_ids if table.seen[c]]
    if not classes:
        log.info("scene without seen classes skipped")
        return {"mmd": 0.0, "con": 0.0, "align": 0.0, "cst": 0.0, "total": 0.0}
    class_feats = {c: feats[scene.labels == c] for c in classes}
    centroids = {c: f.mean(axis=0) for c, f in class_feats.items()}

    totals = {"mmd": 0.0, "con": 0.0, "align": 0.0, "cst": 0.0}
    q = cfg.q if cfg.mcl_mask else 0.0
    unseen = table.unseen_ids if cfg.rtc else []

    # a single generator pass covers every row this step needs
    blocks, sizes = [], []
    for c in classes:
        n = len(class_feats[c])
        t = replicate_per_point(table.vector(c), n)
        blocks.append(mask_semantics(t, q, rngs["mask"], cfg.mask_mode) if q > 0 else t)
        sizes.append(n)
        for u in unseen:
            nu = cfg.rtc_points or n
            blocks.append(replicate_per_point(table.vector(u), nu))
            sizes.append(nu)
    semantics = np.concatenate(blocks)
    noise = rngs["noise"].standard_normal((len(semantics), bundle.noise_dim))
    generated = bundle.generate(semantics, noise)
    mapped = mlp_forward(bundle.params, "sigma", bundle.sigma_spec, table.vectors) if cfg.hpa else None
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def block(i: int, class_id: int) -> Tensor:
        out = generated[int(offsets[i]) : int(offsets[i + 1])]
        return enhance(out, mapped[class_id : class_id + 1]) if cfg.hpa else out

    loss = None
    i = 0
    for c in classes:
        real = class_feats[c]
        synth = block(i, c)
        i += 1
        parts = {}
        if cfg.hpa:
            protos = geometry.build_prototypes(
                real, cfg.hpa_prototypes, cfg.r, cfg.fps_start, cfg.prototype_rounding, cfg.seed
            )
            parts["align"] = align_loss(protos, mapped[c : c + 1])
        parts["mmd"] = mmd_loss(real, synth, normalized=cfg.mmd_normalized)
        if cfg.mcl_contrast:
            negatives = [centroids[k] for k in classes if k != c]
            parts["con"] = infonce_loss(synth, centroids[c], negatives, cfg.tau)
        if unseen:
            protos = [_region_average(synth.data, synth, cfg.rtc_prototypes, cfg)]
            for u in unseen:
                fu = block(i, u)
                i += 1
                protos.append(_region_average(fu.data, fu, cfg.rtc_prototypes, cfg))
            semantic = table.vectors[[c] + unseen]
            parts["cst"] = consistency_loss(relation_matrices(semantic, concat(protos, axis=0)), flatten=cfg.cst_flatten)
        class_loss = generator_loss(parts, cfg.alpha)
        for key, value in parts.items():
            totals[key] += value.item()
        loss = class_loss if loss is None else loss + class_loss

    total = loss.item()
    _check_finite(total, "generator")
    totals["total"] = total
    if update:
        backprop(loss)
        store = bundle.store("gen").merge(bundle.store("sigma"))
        adam_step(state, store)
    return totals


def train_generator(
    bundle: ModelBundle, scenes: Sequence[PointScene], audit: LabelAudit | None = None
) -> list[dict[str, float]]:
    if not bundle.theta_frozen:
        raise StageOrderError("generator training needs a trained, frozen backbone (run train-backbone)")
    cfg = bundle.config
    bundle.ensure("gen", bundle.gen_spec, 2)
    bundle.ensure("sigma", bundle.sigma_spec, 3)
    _check_seen_only(scenes, bundle.table)
    feats = [bundle.features_np(s.points) for s in scenes]
    rngs = {"mask": stream(cfg.seed, "mask"), "noise": stream(cfg.seed, "noise")}
    order_rng = stream(cfg.seed, "shuffle", 1)
    state = AdamState(lr=cfg.lr_generator)
    history = []
    for _ in range(cfg.generator_epochs):
        for i in order_rng.permutation(len(scenes)):
            history.append(generator_training_step(bundle, scenes[i], state, rngs, feats[i], audit))
    bundle.generator_trained = True
    return history


def synth_unseen_set(
    bundle: ModelBundle, per_class_count: int, rng: np.random.Generator, class_ids: Sequence[int] | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Unmasked, enhanced synthetic features for every unseen class."""
    if not bundle.generator_trained:
        raise StageOrderError("synthesizing unseen features needs a trained generator (run train-generator)")
    ids = bundle.table.unseen_ids if class_ids is None else list(class_ids)
    width = bundle.config.feature_dim
    if per_class_count <= 0 or not ids:
        return np.zeros((0, width)), np.zeros(0, dtype=np.int64)
    feats, labels = [], []
    for u in ids:
        f = synthesize_features(bundle, u, per_class_count, 0.0, None, rng)
        if bundle.config.hpa:
            f = enhance(f, bundle.sigma(bundle.table.vector(u)))
        feats.append(f.data)
        labels.append(np.full(per_class_count, u, dtype=np.int64))
    return np.concatenate(feats), np.concatenate(labels)


def default_synth_count(scenes: Sequence[PointScene], table: SemanticTable) -> int:
    _, labels = _labelled(scenes)
    counts = [int((labels == c).sum()) for c in table.seen_ids]
    counts = [n for n in counts if n > 0]
    return max(1, round(sum(counts) / len(counts))) if counts else 1


# ---------------------------------------------------------------------------
# stage c


def class_weight_vector(table: SemanticTable, unseen_weight: float) -> np.ndarray:
    return np.array([1.0 if s else float(unseen_weight) for s in table.seen])


def train_final_classifier(
    bundle: ModelBundle,
    scenes: Sequence[PointScene],
    synthetic: tuple[np.ndarray, np.ndarray],
    class_weights=None,
    real_features: tuple[np.ndarray, np.ndarray] | None = None,
    audit: LabelAudit | None = None,
) -> list[float]:
    """Weighted CE over real seen features and synthetic unseen features, poly-decayed LR."""
    if not bundle.generator_trained:
        raise StageOrderError("final classifier training needs a trained generator (run train-generator)")
    cfg = bundle.config
    table = bundle.table
    syn_x, syn_y = synthetic
    missing = [u for u in table.unseen_ids if not (syn_y == u).any()]
    if missing:
        raise ConfigurationError(f"synthetic set lacks unseen classes {missing}")
    if real_features is None:
        _check_seen_only(scenes, table)
        points, labels = _labelled(scenes)
        real_x, real_y = bundle.features_np(points), labels
    else:
        real_x, real_y = real_features
    _record(audit, "classifier", real_y)
    x = np.concatenate([real_x, syn_x])
    y = np.concatenate([real_y, syn_y]).astype(np.int64)
    weights = class_weight_vector(table, cfg.unseen_weight) if class_weights is None else np.asarray(class_weights)

    bundle.ensure("final", bundle.final_spec, 4)
    store = bundle.store("final")
    state = AdamState(lr=cfg.lr_head)
    rng = stream(cfg.seed, "shuffle", 2)
    total = cfg.classifier_epochs * math.ceil(len(y) / cfg.batch_size)
    history = []
    it = 0
    for _ in range(cfg.classifier_epochs):
        for idx in _minibatches(len(y), cfg.batch_size, rng):
            loss = cross_entropy(bundle.final_logits(x[idx]), y[idx], weights)
            _check_finite(loss.item(), "classifier")
            backprop(loss)
            adam_step(state, store, poly_lr(it, total, cfg.lr_head, cfg.poly_power))
            history.append(loss.item())
            it += 1
    bundle.class_weights = weights
    bundle.final_trained = True
    return history


def calibrated_argmax(logits: np.ndarray, seen: Sequence[bool], gamma: float) -> np.ndarray:
    """Argmax after subtracting ``gamma`` from every seen-class logit (lowest id wins ties)."""
    logits = np.asarray(logits, dtype=np.float64)
    if math.isinf(gamma) and gamma > 0:
        adjusted = np.where(np.asarray(seen)[None, :], -np.inf, logits)
    else:
        adjusted = logits - gamma * np.asarray(seen, dtype=np.float64)[None, :]
    return np.argmax(adjusted, axis=1)


def predict(bundle: ModelBundle, points, gamma: float | None = None) -> np.ndarray:
    if not bundle.final_trained:
        raise StageOrderError("prediction needs a trained final classifier (run train-classifier)")
    gamma = bundle.gamma if gamma is None else gamma
    logits = bundle.final_logits(bundle.features(points)).data
    return calibrated_argmax(logits, bundle.table.seen, gamma)


def evaluate(bundle: ModelBundle, scenes: Sequence[PointScene], gamma: float | None = None) -> MetricsReport:
    conf = ConfusionMatrix(bundle.table.seen)
    for scene in scenes:
        conf.update(predict(bundle, scene.points, gamma), scene.labels)
    return MetricsReport.from_confusion(conf, bundle.table.names)


# ---------------------------------------------------------------------------
# calibration


def pseudo_unseen_count(num_seen: int, fraction: float = 0.2) -> int:
    return max(2, math.ceil(fraction * num_seen - 1e-12))


def select_grid_point(
    score: Callable[[float, float], float], gamma_grid: Sequence[float], weight_grid: Sequence[float]
) -> tuple[float, float, float]:
    """Best (gamma, weight, score); ties go to the smaller gamma, then the smaller weight."""
    if not gamma_grid or not weight_grid:
        raise ValueError("calibration grids must be non-empty")
    best = None
    for w in sorted(weight_grid):
        for g in sorted(gamma_grid):
            s = score(g, w)
            key = (-s, g, w)
            if best is None or key < best[0]:
                best = (key, g, w, s)
    return best[1], best[2], best[3]


@dataclass
class CalibrationResult:
    gamma: float
    unseen_weight: float
    score: float
    pseudo_unseen: list[int]
    grid: dict


def calibrate(
    bundle: ModelBundle,
    scenes: Sequence[PointScene],
    gamma_grid: Sequence[float],
    weight_grid: Sequence[float],
    audit: LabelAudit | None = None,
    val_fraction: float = 0.2,
) -> CalibrationResult:
    """Pick gamma and the unseen class weight on a pseudo split of the seen classes.

    ``max(2, ceil(0.2 |C^S|))`` seen classes act as unseen: a fresh generator
    is trained on the remaining classes (pseudo-unseen points are dropped from
    the fitting scenes), and every grid point is scored by HmIoU on held-out
    scenes.
    """
    if not gamma_grid or not weight_grid:
        raise ValueError("calibration grids must be non-empty")
    if not bundle.theta_frozen:
        raise StageOrderError("calibration needs a trained backbone")
    cfg = bundle.config
    table = bundle.table
    _check_seen_only(scenes, table)
    rng = stream(cfg.seed, "calib")
    seen_ids = table.seen_ids
    k = pseudo_unseen_count(len(seen_ids))
    if k >= len(seen_ids):
        raise ConfigurationError("not enough seen classes for a pseudo split")
    pseudo = sorted(rng.choice(seen_ids, size=k, replace=False).tolist())

    # pseudo problem over the seen classes only, reindexed 0..|C^S|-1
    index = {c: i for i, c in enumerate(seen_ids)}
    sub = SemanticTable(
        tuple(table.names[c] for c in seen_ids),
        table.vectors[seen_ids],
        tuple(c not in pseudo for c in seen_ids),
    )

    def remap(scene: PointScene, drop: bool) -> PointScene | None:
        labels = np.array([index.get(int(c), IGNORE_LABEL) for c in scene.labels])
        keep = np.ones(len(labels), dtype=bool)
        if drop:
            keep = ~np.isin(scene.labels, pseudo)
        if not keep.any():
            return None
        return PointScene(scene.points[keep], labels[keep])

    order = rng.permutation(len(scenes))
    n_val = max(1, int(round(val_fraction * len(scenes))))
    val = [remap(scenes[i], False) for i in order[:n_val]]
    fit = [s for s in (remap(scenes[i], True) for i in order[n_val:]) if s is not None]
    val = [s for s in val if s is not None]

    sub_cfg = replace(cfg, seed=cfg.seed + 1_000_003)
    pb = ModelBundle(sub, bundle.input_dim, sub_cfg)
    pb.params = bundle.store("theta").merge(ParamStore())
    pb.theta_frozen = True
    _record(audit, "calibration", np.concatenate([s.labels for s in scenes]))
    train_generator(pb, fit)
    count = cfg.synth_per_class or default_synth_count(fit, sub)
    synthetic = synth_unseen_set(pb, count, stream(sub_cfg.seed, "noise", 1))
    fit_points, fit_labels = _labelled(fit)
    real = (pb.features_np(fit_points), fit_labels)
    val_feats = [(pb.features_np(s.points), s.labels) for s in val]

    logits_by_weight = {}
    for w in weight_grid:
        head = ModelBundle(sub, bundle.input_dim, sub_cfg)
        head.params = pb.params.merge(ParamStore())
        head.theta_frozen = head.generator_trained = True
        train_final_classifier(head, [], synthetic, class_weight_vector(sub, w), real_features=real)
        logits_by_weight[w] = [(head.final_logits(f).data, y) for f, y in val_feats]
        del head

    grid = {}

    def score(g: float, w: float) -> float:
        conf = ConfusionMatrix(sub.seen)
        for logits, y in logits_by_weight[w]:
            conf.update(calibrated_argmax(logits, sub.seen, g), y)
        value = MetricsReport.from_confusion(conf, sub.names).hmiou
        grid[(g, w)] = value
        return value

    g, w, s = select_grid_point(score, gamma_grid, weight_grid)
    return CalibrationResult(g, w, s, pseudo, grid)
