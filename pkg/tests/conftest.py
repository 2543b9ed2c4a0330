import numpy as np
import pytest

from zsseg import experiment, pipeline
from zsseg.config import ExperimentConfig


def small_config(**overrides) -> ExperimentConfig:
    """A few-second toy configuration for behavioral tests."""
    values = dict(
        backbone_epochs=5,
        generator_epochs=2,
        classifier_epochs=5,
        lr_generator=2e-3,
        num_train_scenes=8,
        num_test_scenes=2,
        points_per_class=30,
        gamma_grid=(0.0, 2.0, 8.0),
        weight_grid=(1.0, 2.0),
    )
    values.update(overrides)
    return ExperimentConfig(**values).validate()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cfg():
    return small_config()


@pytest.fixture(scope="session")
def small_data(small_cfg):
    return experiment.build_dataset(small_cfg, 0)


@pytest.fixture(scope="session")
def trained_backbone(small_cfg, small_data):
    return experiment.train_backbone_stage(small_cfg, small_data, 0)


@pytest.fixture
def fresh_generator_bundle(small_cfg, trained_backbone):
    """Backbone-frozen bundle with initialized (untrained) G and sigma."""
    bundle = experiment.fork_after_backbone(trained_backbone, small_cfg.train_config())
    bundle.ensure("gen", bundle.gen_spec, 2)
    bundle.ensure("sigma", bundle.sigma_spec, 3)
    return bundle


def rngs(seed=0):
    return {"mask": pipeline.stream(seed, "mask"), "noise": pipeline.stream(seed, "noise")}


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
