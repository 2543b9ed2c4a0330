"""``key = value`` experiment configuration files."""
from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .pipeline import ConfigurationError, TrainConfig

FLAG_MATRIX_ROWS = ("0000", "0010", "0001", "0011", "1100", "1110", "1101", "1111")
CL_ONLY_ROW = "0100"


@dataclass
class ExperimentConfig(TrainConfig):
    # toy world
    num_seen: int = 8
    num_unseen: int = 4
    embedding_dim: int = 16
    input_dim: int = 12
    rho: float = 1.0
    noise_scale: float = 0.6
    center_scale: float = 1.0
    seen_min_angle: float = 60.0
    unseen_angle: float = 40.0
    points_per_class: int = 60
    classes_per_scene: int = 4
    num_train_scenes: int = 40
    num_test_scenes: int = 10
    # semantic source
    embedding_source: str = "synthetic"
    embedding_files: tuple[str, ...] = ()
    class_names: tuple[str, ...] = ()
    unseen_classes: tuple[str, ...] = ()
    # orchestration
    output_dir: str = "runs"
    num_seeds: int = 1
    calibrate: bool = True
    gamma_grid: tuple[float, ...] = (0.0, 0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0)
    weight_grid: tuple[float, ...] = (0.5, 1.0, 2.0)
    q_grid: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
    r_grid: tuple[float, ...] = (0.01, 0.02, 0.04, 0.08, 0.16)
    ablation_rows: tuple[str, ...] = FLAG_MATRIX_ROWS + (CL_ONLY_ROW,)

    def validate(self) -> "ExperimentConfig":
        super().validate()
        if self.embedding_source not in ("synthetic", "files"):
            raise ConfigurationError(f"embedding_source must be synthetic or files, got {self.embedding_source!r}")
        if self.embedding_source == "files":
            if not self.embedding_files or not self.class_names or not self.unseen_classes:
                raise ConfigurationError("file embeddings need embedding_files, class_names and unseen_classes")
            unknown = set(self.unseen_classes) - set(self.class_names)
            if unknown:
                raise ConfigurationError(f"unseen classes not in class_names: {sorted(unknown)}")
        if self.num_seeds < 1:
            raise ConfigurationError("num_seeds must be >= 1")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigurationError(f"rho must lie in [0, 1], got {self.rho}")
        for row in self.ablation_rows:
            if len(row) != 4 or set(row) - {"0", "1"}:
                raise ConfigurationError(f"ablation row {row!r} must be four 0/1 digits (mask, contrast, hpa, rtc)")
        return self

    @property
    def seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.num_seeds)]

    def train_config(self, **overrides) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        values = {k: getattr(self, k) for k in names}
        values.update(overrides)
        return TrainConfig(**values)


_HINTS = typing.get_type_hints(ExperimentConfig)
_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _convert(key: str, raw: str, lineno: int | None):
    where = f"line {lineno}: " if lineno else ""
    hint = _HINTS[key]
    try:
        if hint is bool:
            if raw.lower() not in _BOOL:
                raise ValueError(f"expected a boolean, got {raw!r}")
            return _BOOL[raw.lower()]
        if hint in (int, float, str):
            return hint(raw)
        if typing.get_origin(hint) is tuple:
            inner = typing.get_args(hint)[0]
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(inner(s) for s in items)
    except ValueError as exc:
        raise ConfigurationError(f"{where}{key}: {exc}") from None
    raise ConfigurationError(f"{where}{key}: unsupported type {hint}")


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}: line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _HINTS:
            raise ConfigurationError(f"{source}: line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw, lineno)
    try:
        cfg = ExperimentConfig(**values)
        return cfg.validate()
    except ConfigurationError as exc:
        raise ConfigurationError(f"{source}: {exc}") from None


def parse_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, str(path))


def apply_env(cfg: ExperimentConfig) -> ExperimentConfig:
    """``ZSSEG_SEED`` replaces the master seed."""
    raw = os.environ.get("ZSSEG_SEED")
    if raw is None or raw == "":
        return cfg
    try:
        return dataclasses.replace(cfg, seed=int(raw))
    except ValueError:
        raise ConfigurationError(f"ZSSEG_SEED must be an integer, got {raw!r}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = [f"{f.name} = {_format(getattr(cfg, f.name))}" for f in dataclasses.fields(cfg)]
    return "\n".join(lines) + "\n"
