"""``zsseg`` command-line driver.

Exit codes: 0 success, 2 configuration error, 3 stage-order error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import checks, experiment, pipeline
from .config import ExperimentConfig, apply_env, parse_config, serialize_config
from .embeddings import EmbeddingFormatError
from .metrics import emit_results
from .numerics import NumericError
from .pipeline import ConfigurationError, StageOrderError

log = logging.getLogger("zsseg")

SUBCOMMANDS = (
    "gen-data",
    "train-backbone",
    "train-generator",
    "train-classifier",
    "eval",
    "ablate",
    "sweep",
    "grad-check",
    "oracle-check",
)


def _out(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir)


def _load_data(cfg: ExperimentConfig) -> experiment.Dataset:
    return experiment.load_dataset(_out(cfg) / "data")


def _bundle(cfg: ExperimentConfig, data, stages: tuple[str, ...]) -> pipeline.ModelBundle:
    bundle = experiment.new_bundle(cfg, data)
    for stage in stages:
        experiment.load_stage(bundle, stage, _out(cfg))
    return bundle


def cmd_gen_data(cfg):
    data = experiment.build_dataset(cfg)
    experiment.save_dataset(data, _out(cfg) / "data")
    (_out(cfg) / "config.txt").write_text(serialize_config(cfg), encoding="utf-8")
    print(f"wrote {len(data.train)} train and {len(data.test)} test scenes to {_out(cfg) / 'data'}")


def cmd_train_backbone(cfg):
    data = _load_data(cfg)
    bundle = experiment.new_bundle(cfg, data)
    history = pipeline.train_backbone(bundle, data.train)
    path = experiment.save_stage(bundle, "backbone", _out(cfg))
    print(f"backbone loss {history[0] if history else float('nan'):.4f} -> {history[-1] if history else float('nan'):.4f}; wrote {path}")


def cmd_train_generator(cfg):
    data = _load_data(cfg)
    bundle = _bundle(cfg, data, ("backbone",))
    history = pipeline.train_generator(bundle, data.train)
    path = experiment.save_stage(bundle, "generator", _out(cfg))
    if history:
        print("final step losses: " + ", ".join(f"{k}={v:.4f}" for k, v in history[-1].items()))
    print(f"wrote {path}")


def cmd_train_classifier(cfg):
    data = _load_data(cfg)
    bundle = _bundle(cfg, data, ("backbone", "generator"))
    weight, gamma = cfg.unseen_weight, cfg.gamma
    if cfg.calibrate:
        calib = pipeline.calibrate(bundle, data.train, cfg.gamma_grid, cfg.weight_grid)
        weight, gamma = calib.unseen_weight, calib.gamma
        print(f"calibration: gamma={gamma} unseen_weight={weight} pseudo-split hmiou={calib.score:.4f}")
    experiment.train_classifier_stage(bundle, data, weight, gamma)
    print(f"wrote {experiment.save_stage(bundle, 'classifier', _out(cfg))}")


def cmd_eval(cfg):
    data = _load_data(cfg)
    bundle = _bundle(cfg, data, ("backbone", "generator", "classifier"))
    report = pipeline.evaluate(bundle, data.test)
    path = emit_results(report, _out(cfg) / "metrics.csv")
    print(f"miou seen {report.miou_seen:.4f} unseen {report.miou_unseen:.4f} all {report.miou_all:.4f} hmiou {report.hmiou:.4f}")
    print(f"wrote {path}")


def cmd_ablate(cfg):
    rows = experiment.run_ablation(cfg, _out(cfg) / "ablate")
    path = experiment.write_rows(_out(cfg) / "ablate.csv", experiment.ABLATION_COLUMNS, rows)
    for row in rows:
        print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    print(f"wrote {path}")


def cmd_sweep(cfg):
    rows = experiment.run_sweep(cfg)
    cols = ("param", "value", "miou_s", "miou_u", "miou_all", "hmiou")
    path = experiment.write_rows(_out(cfg) / "sweep.csv", cols, rows)
    print(f"wrote {path}")


def _report(results) -> int:
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def cmd_grad_check(cfg):
    return _report(checks.gradient_suite(seed=cfg.seed))


def cmd_oracle_check(cfg):
    return _report(checks.oracle_suite(seed=cfg.seed))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-backbone": cmd_train_backbone,
    "train-generator": cmd_train_generator,
    "train-classifier": cmd_train_classifier,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "grad-check": cmd_grad_check,
    "oracle-check": cmd_oracle_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zsseg", description="generative zero-shot point segmentation (toy scale)")
    parser.add_argument("command", choices=SUBCOMMANDS)
    parser.add_argument("-c", "--config", help="key = value config file (defaults when omitted)")
    parser.add_argument("-o", "--output-dir", help="override output_dir")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = parse_config(args.config) if args.config else ExperimentConfig().validate()
        cfg = apply_env(cfg)
        if args.output_dir:
            cfg.output_dir = args.output_dir
        _out(cfg).mkdir(parents=True, exist_ok=True)
        status = COMMANDS[args.command](cfg)
        return int(status or 0)
    except (ConfigurationError, EmbeddingFormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageOrderError as exc:
        print(f"stage-order error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
