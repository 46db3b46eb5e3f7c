"""
Experiment configuration.

One YAML file maps onto the nested dataclasses below. Every key is optional
(missing keys keep the toy defaults) but unknown keys are rejected, so a typo
never silently falls back to a default.

Usage:
    cfg = load_config("configs/toy.yaml")
    cfg = load_config(None)                 # pure defaults (toy scale)
    cfg = load_config("configs/full_scale.yaml")
"""

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml
from dotenv import load_dotenv

from common.errors import ConfigError

load_dotenv()

CONDITION_NAMES = ("class", "text", "image", "motion")
SAM_VARIANTS = ("S", "SK", "SKM")


@dataclass
class DatasetConfig:
    num_classes: int = 3
    image_size: int = 32
    channels: int = 1
    num_frames: int = 8
    train_counts: list = field(default_factory=lambda: [100, 25, 25])
    test_counts: list = field(default_factory=lambda: [20, 20, 20])


@dataclass
class AutoencoderConfig:
    rate: int = 4
    latent_channels: int = 4
    base_channels: int = 32
    kl_weight: float = 1e-6
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    recon_mse_threshold: float = 0.01


@dataclass
class DiffusionConfig:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2


@dataclass
class UNetConfig:
    channels: list = field(default_factory=lambda: [64, 128, 128])
    groups: int = 8
    emb_dim: int = 256
    context_dim: int = 64


@dataclass
class ConditioningConfig:
    text_max_len: int = 16
    p_drop_class: float = 0.1
    p_drop_text: float = 0.1
    p_drop_image: float = 0.1
    p_drop_motion: float = 0.1
    p_drop_all: float = 0.1
    motion_block: int = 4
    motion_radius: int = 3
    motion_channels: int = 4


@dataclass
class SamConfig:
    variant: str = "SKM"
    # pathways are re-drawn every forward pass from a step-derived seed
    resample_per_forward: bool = True


@dataclass
class OptimConfig:
    batch_size: int = 64
    epochs: int = 150
    lr: float = 5e-4
    warmup: int = 500
    weight_decay: float = 0.01
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    log_every: int = 100


@dataclass
class SamplerConfig:
    steps: int = 200
    guidance_scale: float = 7.5
    eta: float = 0.0
    seed: int = 0


@dataclass
class GenerationConfig:
    clips_per_class: int = 50
    group_size: int = 5
    use_conditions: list = field(default_factory=lambda: list(CONDITION_NAMES))


@dataclass
class FilterConfig:
    semantic: bool = True
    inner_sequence: bool = True
    inter_sequence: bool = True
    kmeans_k: int = 4
    theta_threshold: float = 98.0
    stage2_thresholds_from_s1: bool = False


@dataclass
class AugmentConfig:
    color: bool = True
    move: bool = True
    gaussian: bool = True
    rotation: bool = True
    flip: bool = False
    brightness: float = 0.1
    translate: int = 2
    noise_sigma: float = 0.02
    rotation_deg: float = 10.0


@dataclass
class ClassifierConfig:
    channels: list = field(default_factory=lambda: [16, 32, 64])
    epochs: int = 30
    finetune_epochs: int = 15
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-4
    augment: AugmentConfig = field(default_factory=AugmentConfig)


@dataclass
class ExperimentConfig:
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    threads: int = int(os.getenv("SEQAUG_THREADS", "1"))
    out_dir: str = os.getenv("SEQAUG_OUT_DIR", "runs/toy")
    unfiltered_comparison: bool = True
    augmentation_ablation: bool = False


@dataclass
class Config:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    conditioning: ConditioningConfig = field(default_factory=ConditioningConfig)
    sam: SamConfig = field(default_factory=SamConfig)
    pretrain: OptimConfig = field(default_factory=OptimConfig)
    finetune: OptimConfig = field(
        default_factory=lambda: OptimConfig(batch_size=8, epochs=60, warmup=200)
    )
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def validate(self):
        ds = self.dataset
        if ds.num_classes < 2:
            raise ConfigError("dataset.num_classes must be >= 2")
        for key in ("train_counts", "test_counts"):
            counts = getattr(ds, key)
            if len(counts) != ds.num_classes:
                raise ConfigError(f"dataset.{key} needs one entry per class")
        if ds.image_size % self.autoencoder.rate:
            raise ConfigError("dataset.image_size must be divisible by autoencoder.rate")
        if ds.image_size % self.conditioning.motion_block:
            raise ConfigError("dataset.image_size must be divisible by conditioning.motion_block")
        levels = len(self.unet.channels)
        latent = ds.image_size // self.autoencoder.rate
        if latent % (2 ** (levels - 1)):
            raise ConfigError("latent size must halve cleanly across unet levels")
        if not 1 <= self.sampler.steps <= self.diffusion.timesteps:
            raise ConfigError(
                f"sampler.steps={self.sampler.steps} outside [1, T={self.diffusion.timesteps}]"
            )
        if self.sampler.guidance_scale < 0:
            raise ConfigError("sampler.guidance_scale must be >= 0")
        if self.sampler.eta != 0.0:
            raise ConfigError("only deterministic DDIM (eta=0) is supported")
        if self.sam.variant not in SAM_VARIANTS:
            raise ConfigError(f"sam.variant must be one of {SAM_VARIANTS}")
        unknown = set(self.generation.use_conditions) - set(CONDITION_NAMES)
        if unknown:
            raise ConfigError(f"generation.use_conditions has unknown entries {sorted(unknown)}")
        if self.generation.group_size < 1:
            raise ConfigError("generation.group_size must be >= 1")
        if self.filter.kmeans_k < 3:
            raise ConfigError("filter.kmeans_k must be >= 3 so middle clusters exist")
        for name in ("p_drop_class", "p_drop_text", "p_drop_image", "p_drop_motion", "p_drop_all"):
            p = getattr(self.conditioning, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"conditioning.{name} must lie in [0, 1]")
        if self.experiment.threads < 1:
            raise ConfigError("experiment.threads must be >= 1")
        return self


def _coerce(hint, value, where):
    """Check a scalar against its field type. Ints widen to float; YAML strings like "1e-4" parse as floats."""
    if hint is bool:
        if isinstance(value, bool):
            return value
    elif hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
    elif hint is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
    elif hint is str:
        if isinstance(value, str):
            return value
    elif hint is list:
        if isinstance(value, list):
            return value
    else:
        return value
    raise ConfigError(f"{where} must be {hint.__name__}, got {value!r}")


def _build(cls, data, path):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config keys at {path or 'top level'}: {unknown}")

    defaults = cls()
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        where = f"{path}.{key}" if path else key
        if dataclasses.is_dataclass(hint):
            if value is not None and not isinstance(value, dict):
                raise ConfigError(f"{where} must be a mapping, got {type(value).__name__}")
            # nested sections start from the parent's default so per-field defaults survive
            base = dataclasses.asdict(getattr(defaults, key))
            base.update(value or {})
            kwargs[key] = _build(hint, base, where)
        else:
            kwargs[key] = _coerce(hint, value, where)
    return dataclasses.replace(defaults, **kwargs)


def config_from_dict(data):
    return _build(Config, data, "").validate()


def load_config(path=None):
    if path is None:
        return Config().validate()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"could not parse {path}: {e}") from e
    return config_from_dict(data or {})


def config_to_dict(cfg):
    return dataclasses.asdict(cfg)


def config_hash(cfg):
    """SHA-256 of the canonical JSON; the output location is not part of the content."""
    data = config_to_dict(cfg)
    data["experiment"].pop("out_dir", None)
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def dump_config(cfg, path):
    with open(path, "w") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=False)
