import copy
import sys
from pathlib import Path
from types import SimpleNamespace

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from common.config import config_from_dict  # noqa: E402
from data_collection.simulation.toy_factory import ToyDatasetSpec, make_toy_dataset  # noqa: E402
from models.architectures.unet import inflate_2d_to_3d  # noqa: E402
from models.training.generator import (  # noqa: E402
    clip_frames,
    finetune_sequence_ldm,
    pretrain_image_ldm,
    vae_train,
)

TINY = {
    "dataset": {"image_size": 16, "num_frames": 4, "train_counts": [4, 2, 2], "test_counts": [2, 2, 2]},
    "autoencoder": {"rate": 4, "latent_channels": 4, "base_channels": 8, "epochs": 1, "batch_size": 16},
    "diffusion": {"timesteps": 20},
    "unet": {"channels": [16, 16], "groups": 4, "emb_dim": 32, "context_dim": 16},
    "conditioning": {"motion_block": 4, "motion_radius": 2, "motion_channels": 2},
    "pretrain": {"batch_size": 8, "epochs": 1, "warmup": 1, "log_every": 1000},
    "finetune": {"batch_size": 4, "epochs": 1, "warmup": 1, "log_every": 1000},
    "sampler": {"steps": 4},
    "generation": {"clips_per_class": 2, "group_size": 2},
    "classifier": {"channels": [4, 8], "epochs": 2, "finetune_epochs": 1, "batch_size": 4},
    "experiment": {"seeds": [0]},
}


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow end-to-end tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end runs measured in minutes")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_cfg():
    return config_from_dict(TINY)


@pytest.fixture
def tiny_cfg_dict():
    return copy.deepcopy(TINY)


@pytest.fixture(scope="session")
def tiny_dataset():
    return make_toy_dataset(ToyDatasetSpec.from_config(config_from_dict(TINY)))


@pytest.fixture(scope="session")
def tiny_models(tiny_dataset):
    """Autoencoder, image-mode denoiser and finetuned sequence denoiser, trained once per session."""
    cfg = config_from_dict(TINY)
    autoencoder, _ = vae_train(clip_frames(tiny_dataset.train), cfg)
    image_model, _ = pretrain_image_ldm(tiny_dataset.train, autoencoder, cfg)
    sequence_model, _ = finetune_sequence_ldm(
        inflate_2d_to_3d(image_model, cfg.sam.variant), tiny_dataset.train, autoencoder, cfg
    )
    return SimpleNamespace(cfg=cfg, autoencoder=autoencoder, image=image_model, sequence=sequence_model)
