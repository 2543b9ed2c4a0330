"""Stage orchestration shared by the CLI, ablations and sweeps."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import datagen, pipeline
from .config import ExperimentConfig
from .embeddings import SemanticTable, concat_embeddings, load_word_vectors
from .metrics import MetricsReport
from .numerics import ParamStore, load_checkpoint, save_checkpoint
from .pipeline import LabelAudit, ModelBundle, StageOrderError

log = logging.getLogger(__name__)

STAGE_FILES = {"backbone": "backbone.ckpt", "generator": "generator.ckpt", "classifier": "final.ckpt"}
STAGE_COMMANDS = {"data": "gen-data", "backbone": "train-backbone", "generator": "train-generator", "classifier": "train-classifier"}


@dataclass
class Dataset:
    table: SemanticTable
    train: list[datagen.PointScene]
    test: list[datagen.PointScene]
    world: datagen.ToyWorld | None = None

    @property
    def input_dim(self) -> int:
        return self.train[0].points.shape[1]


def _sub_seed(seed: int, name: str) -> int:
    return int(pipeline.stream(seed, name).integers(2**31 - 1))


def build_table(cfg: ExperimentConfig, seed: int) -> SemanticTable:
    if cfg.embedding_source == "files":
        names = tuple(cfg.class_names)
        seen = tuple(n not in cfg.unseen_classes for n in names)
        tables = [load_word_vectors(p, names, seen) for p in cfg.embedding_files]
        table = tables[0]
        for other in tables[1:]:
            table = concat_embeddings(table, other)
        norms = np.linalg.norm(table.vectors, axis=1, keepdims=True)
        return SemanticTable(table.names, table.vectors / np.where(norms > 0, norms, 1.0), table.seen)
    return datagen.make_toy_table(
        cfg.num_seen, cfg.num_unseen, cfg.embedding_dim, _sub_seed(seed, "world"), cfg.seen_min_angle, cfg.unseen_angle
    )


def build_dataset(cfg: ExperimentConfig, seed: int | None = None) -> Dataset:
    seed = cfg.seed if seed is None else seed
    table = build_table(cfg, seed)
    world = datagen.make_toy_world(
        table, cfg.input_dim, cfg.rho, cfg.noise_scale, _sub_seed(seed, "world") + 1, cfg.center_scale
    )
    train, test = datagen.make_splits(
        world, cfg.num_train_scenes, cfg.num_test_scenes, _sub_seed(seed, "data"), cfg.points_per_class, cfg.classes_per_scene
    )
    return Dataset(table, train, test, world)


def new_bundle(cfg: ExperimentConfig, data: Dataset, seed: int | None = None, **overrides) -> ModelBundle:
    tc = cfg.train_config(**overrides)
    if seed is not None:
        tc = dataclasses.replace(tc, seed=seed)
    return ModelBundle(data.table, data.input_dim, tc.validate())


def fork_after_backbone(trained: ModelBundle, cfg: pipeline.TrainConfig) -> ModelBundle:
    """A bundle sharing ``trained``'s frozen backbone, with its own downstream parameters."""
    bundle = ModelBundle(trained.table, trained.input_dim, cfg)
    keep = trained.store("theta").merge(trained.store("fseen"))
    bundle.params = keep.merge(ParamStore())
    bundle.theta_frozen = trained.theta_frozen
    return bundle


@dataclass
class RunResult:
    bundle: ModelBundle
    report: MetricsReport
    calibration: pipeline.CalibrationResult | None


def run_downstream(
    backbone: ModelBundle, cfg: ExperimentConfig, data: Dataset, audit: LabelAudit | None = None, **overrides
) -> RunResult:
    """Stages b and c (with optional calibration) on top of a trained backbone, then evaluation."""
    tc = dataclasses.replace(cfg.train_config(**overrides), seed=backbone.config.seed).validate()
    bundle = fork_after_backbone(backbone, tc)
    pipeline.train_generator(bundle, data.train, audit)
    calib = None
    weight, gamma = tc.unseen_weight, tc.gamma
    if cfg.calibrate:
        calib = pipeline.calibrate(bundle, data.train, cfg.gamma_grid, cfg.weight_grid, audit)
        weight, gamma = calib.unseen_weight, calib.gamma
    train_classifier_stage(bundle, data, weight, gamma, audit)
    return RunResult(bundle, pipeline.evaluate(bundle, data.test), calib)


def train_classifier_stage(bundle: ModelBundle, data: Dataset, weight: float, gamma: float, audit=None) -> None:
    cfg = bundle.config
    count = cfg.synth_per_class or pipeline.default_synth_count(data.train, data.table)
    synthetic = pipeline.synth_unseen_set(bundle, count, pipeline.stream(cfg.seed, "noise", 1))
    pipeline.train_final_classifier(
        bundle, data.train, synthetic, pipeline.class_weight_vector(data.table, weight), audit=audit
    )
    bundle.gamma = gamma


def train_backbone_stage(cfg: ExperimentConfig, data: Dataset, seed: int, audit: LabelAudit | None = None) -> ModelBundle:
    bundle = new_bundle(cfg, data, seed)
    pipeline.train_backbone(bundle, data.train, audit)
    return bundle


def run_full(cfg: ExperimentConfig, seed: int | None = None, audit: LabelAudit | None = None, **overrides) -> RunResult:
    seed = cfg.seed if seed is None else seed
    data = build_dataset(cfg, seed)
    backbone = train_backbone_stage(cfg, data, seed, audit)
    return run_downstream(backbone, cfg, data, audit, **overrides)


def flags_from_row(row: str) -> dict:
    return dict(zip(("mcl_mask", "mcl_contrast", "hpa", "rtc"), (c == "1" for c in row)))


# ---------------------------------------------------------------------------
# checkpoints


def stage_state(bundle: ModelBundle, stage: str) -> dict:
    prefixes = {"backbone": ("theta.", "fseen."), "generator": ("gen.", "sigma."), "classifier": ("final.",)}[stage]
    out = {name: t.data for name, t in bundle.params if name.startswith(prefixes)}
    if stage == "classifier":
        out["calib.gamma"] = np.array([[bundle.gamma]])
        out["calib.class_weights"] = np.asarray(bundle.class_weights).reshape(1, -1)
    return out


def save_stage(bundle: ModelBundle, stage: str, directory) -> Path:
    path = Path(directory) / STAGE_FILES[stage]
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, stage_state(bundle, stage))
    return path


def load_stage(bundle: ModelBundle, stage: str, directory) -> None:
    path = Path(directory) / STAGE_FILES[stage]
    if not path.exists():
        raise StageOrderError(f"missing {path.name}: run `{STAGE_COMMANDS[stage]}` first")
    state = load_checkpoint(path)
    for name, value in state.items():
        if name.startswith("calib."):
            continue
        if name in bundle.params:
            bundle.params[name].data = value.copy()
        else:
            bundle.params.add(name, value)
    if stage == "backbone":
        bundle.theta_frozen = True
    elif stage == "generator":
        bundle.generator_trained = True
    else:
        bundle.gamma = float(state["calib.gamma"][0, 0])
        bundle.class_weights = state["calib.class_weights"][0].copy()
        bundle.final_trained = True


def save_dataset(data: Dataset, directory) -> None:
    from .embeddings import save_word_vectors

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_word_vectors(directory / "embeddings.txt", data.table)
    (directory / "partition.txt").write_text(
        "".join(f"{name} {'seen' if s else 'unseen'}\n" for name, s in zip(data.table.names, data.table.seen)),
        encoding="utf-8",
    )
    for split, scenes in (("train", data.train), ("test", data.test)):
        for i, scene in enumerate(scenes):
            datagen.save_scene(directory / f"{split}_{i:04d}.scene", scene)


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    part = directory / "partition.txt"
    if not part.exists():
        raise StageOrderError(f"missing {part}: run `gen-data` first")
    rows = [ln.split() for ln in part.read_text(encoding="utf-8").splitlines() if ln.strip()]
    names = [r[0] for r in rows]
    table = load_word_vectors(directory / "embeddings.txt", names, [r[1] == "seen" for r in rows])
    train = [datagen.load_scene(p) for p in sorted(directory.glob("train_*.scene"))]
    test = [datagen.load_scene(p) for p in sorted(directory.glob("test_*.scene"))]
    if not train:
        raise StageOrderError(f"no training scenes in {directory}: run `gen-data` first")
    return Dataset(table, train, test)


# ---------------------------------------------------------------------------
# ablations and sweeps

ABLATION_COLUMNS = ("mcl_mask", "mcl_contrast", "hpa", "rtc", "miou_s", "miou_u", "miou_all", "hmiou")


def _median_report(reports: Sequence[MetricsReport]) -> tuple[float, float, float, float]:
    arr = np.array([[r.miou_seen, r.miou_unseen, r.miou_all, r.hmiou] for r in reports])
    return tuple(float(v) for v in np.median(arr, axis=0))


def run_ablation(cfg: ExperimentConfig, out_dir=None) -> list[dict]:
    """Every configured flag row, median metrics over seeds; backbones are shared per seed."""
    per_row: dict[str, list[MetricsReport]] = {row: [] for row in cfg.ablation_rows}
    for seed in cfg.seeds:
        data = build_dataset(cfg, seed)
        backbone = train_backbone_stage(cfg, data, seed)
        if out_dir is not None:
            save_stage(backbone, "backbone", Path(out_dir) / f"seed{seed}")
        for row in cfg.ablation_rows:
            result = run_downstream(backbone, cfg, data, **flags_from_row(row))
            per_row[row].append(result.report)
            log.info("seed %d row %s hmiou %.4f", seed, row, result.report.hmiou)
            if out_dir is not None:
                row_dir = Path(out_dir) / f"seed{seed}" / f"row{row}"
                save_stage(result.bundle, "generator", row_dir)
                save_stage(result.bundle, "classifier", row_dir)
    rows = []
    for row in cfg.ablation_rows:
        s, u, a, h = _median_report(per_row[row])
        flags = flags_from_row(row)
        rows.append({**{k: int(v) for k, v in flags.items()}, "miou_s": s, "miou_u": u, "miou_all": a, "hmiou": h})
    return rows


def run_sweep(cfg: ExperimentConfig) -> list[dict]:
    """Vary q (with r fixed) and then r (with q fixed), median over seeds."""
    results: dict[tuple[str, float], list[MetricsReport]] = {}
    for seed in cfg.seeds:
        data = build_dataset(cfg, seed)
        backbone = train_backbone_stage(cfg, data, seed)
        for param, grid in (("q", cfg.q_grid), ("r", cfg.r_grid)):
            for value in grid:
                report = run_downstream(backbone, cfg, data, **{param: value}).report
                results.setdefault((param, value), []).append(report)
    rows = []
    for (param, value), reports in results.items():
        s, u, a, h = _median_report(reports)
        rows.append({"param": param, "value": value, "miou_s": s, "miou_u": u, "miou_all": a, "hmiou": h})
    return rows


def write_rows(path, columns: Sequence[str], rows: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_cell(row[c]) for c in columns))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def _cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)
