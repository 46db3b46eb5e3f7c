from pathlib import Path

import pytest

from common.config import Config, config_from_dict, config_hash, config_to_dict, dump_config, load_config
from common.errors import ConfigError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_defaults_are_valid():
    cfg = load_config(None)
    assert cfg.sampler.steps == 200 and cfg.sampler.guidance_scale == 7.5
    assert cfg.filter.kmeans_k == 4 and cfg.filter.theta_threshold == 98.0
    assert cfg.experiment.seeds == [0, 1, 2]


def test_partial_sections_keep_defaults(tiny_cfg):
    assert tiny_cfg.unet.channels == [16, 16]
    assert tiny_cfg.sampler.guidance_scale == 7.5
    assert tiny_cfg.finetune.batch_size == 4
    assert tiny_cfg.classifier.augment.color is True


def test_nested_override():
    cfg = config_from_dict({"classifier": {"augment": {"flip": True}}})
    assert cfg.classifier.augment.flip is True and cfg.classifier.augment.rotation is True


@pytest.mark.parametrize(
    "data",
    [
        {"sampler": {"stepz": 3}},
        {"bogus": {}},
        {"classifier": {"augment": {"sharpen": True}}},
        {"sampler": 5},
        {"sampler": {"steps": "a"}},
        {"sampler": {"steps": 2.5}},
        {"sampler": {"steps": True}},
        {"sampler": {"steps": None}},
        {"sampler": {"guidance_scale": "high"}},
        {"filter": {"semantic": "yes"}},
        {"sam": {"variant": 3}},
        {"dataset": {"train_counts": 5}},
    ],
)
def test_unknown_or_malformed_keys_rejected(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_scalar_values_are_coerced():
    cfg = config_from_dict({"sampler": {"steps": 4.0, "guidance_scale": 7}, "pretrain": {"lr": "1e-4"}})
    assert cfg.sampler.steps == 4 and isinstance(cfg.sampler.steps, int)
    assert cfg.sampler.guidance_scale == 7.0 and isinstance(cfg.sampler.guidance_scale, float)
    assert cfg.pretrain.lr == 1e-4


@pytest.mark.parametrize(
    "data",
    [
        {"sampler": {"steps": 2000}},
        {"sampler": {"eta": 0.5}},
        {"sampler": {"guidance_scale": -1.0}},
        {"sam": {"variant": "K"}},
        {"filter": {"kmeans_k": 2}},
        {"dataset": {"image_size": 30}},
        {"dataset": {"train_counts": [1, 2]}},
        {"generation": {"use_conditions": ["class", "audio"]}},
        {"conditioning": {"p_drop_text": 1.5}},
    ],
)
def test_validation_errors(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_hash_is_stable_and_ignores_out_dir(tiny_cfg_dict):
    a = config_from_dict(tiny_cfg_dict)
    b = config_from_dict(tiny_cfg_dict)
    assert config_hash(a) == config_hash(b)
    b.experiment.out_dir = "/elsewhere"
    assert config_hash(a) == config_hash(b)
    b.sampler.seed = 7
    assert config_hash(a) != config_hash(b)


def test_dump_and_reload(tiny_cfg, tmp_path):
    dump_config(tiny_cfg, tmp_path / "config.yaml")
    again = load_config(tmp_path / "config.yaml")
    assert config_hash(again) == config_hash(tiny_cfg)
    assert config_to_dict(again)["dataset"] == config_to_dict(tiny_cfg)["dataset"]


def test_shipped_presets_load():
    toy = load_config(CONFIGS / "toy.yaml")
    assert isinstance(toy, Config)
    assert toy.sampler.steps == 50 and toy.diffusion.timesteps == 1000
    full = load_config(CONFIGS / "full_scale.yaml")
    assert full.sam.variant == "SKM"
    assert (full.diffusion.beta_start, full.diffusion.beta_end) == (1e-4, 2e-2)


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("sampler: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(bad)
