"""
Shared fixtures: tiny configs, a tiny in-memory dataset and seeded generators
"""
from pathlib import Path

import pytest
import structlog
import torch

from sbrcnn.schemas import (
    DatasetConfig,
    ExperimentConfig,
    GeneratorConfig,
    HeadConfig,
    LoopConfig,
    ModelConfig,
    OptimConfig,
    RPNConfig,
    SamplerConfig,
)
from sbrcnn.synthdata import ShapesDataset, generate_dataset

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long training runs, skipped unless --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _reset_structlog():
    # configure_logging binds structlog to the per-test captured stream; undo it so later tests do not write to a closed file
    yield
    structlog.reset_defaults()


@pytest.fixture
def generator():
    g = torch.Generator()
    g.manual_seed(0)
    return g


@pytest.fixture
def tiny_generator_config() -> GeneratorConfig:
    return GeneratorConfig(n_images=4, image_size=64, instances_per_image=(1, 3), size_range=(12, 32), seed=0)


def make_tiny_model_config(**loop) -> ModelConfig:
    return ModelConfig(
        backbone_width=8,
        fpn_channels=16,
        rpn=RPNConfig(pre_nms_top_n=200, post_nms_top_n_train=64, post_nms_top_n_test=32),
        sampler=SamplerConfig(num_rois=32),
        head=HeadConfig(fc_channels=32),
        loop=LoopConfig(**(loop or {"train_loops": 2})),
    )


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return make_tiny_model_config()


@pytest.fixture
def tiny_dataset(tiny_generator_config) -> ShapesDataset:
    manifest, images = generate_dataset(tiny_generator_config)
    return ShapesDataset(manifest, images=images)


@pytest.fixture
def tiny_experiment(tmp_path, tiny_generator_config, tiny_model_config) -> ExperimentConfig:
    return ExperimentConfig(
        name="tiny",
        dataset=DatasetConfig(
            generator=tiny_generator_config,
            eval_generator=GeneratorConfig(n_images=2, image_size=64, instances_per_image=(1, 2), size_range=(12, 32), seed=1),
        ),
        model=tiny_model_config,
        optim=OptimConfig(epochs=1, batch_size=2, warmup_iters=2),
        output_dir=tmp_path / "run",
    )
