"""Builders shared by the model tests."""

import torch

from data_collection.simulation.toy_factory import ToyDatasetSpec, make_clip
from models.architectures.conditioning import bank_from_clip, collate_banks
from models.architectures.motion import extract_motion_field, stack_fields
from models.architectures.unet import DenoiserModel
from models.numerics import RngState, seeded_init


def make_banks(cfg, size=2, with_motion=True):
    ds, cc = cfg.dataset, cfg.conditioning
    spec = ToyDatasetSpec.from_config(cfg)
    banks = []
    for i in range(size):
        clip = make_clip(spec, "train", i % ds.num_classes, i)
        fields = stack_fields(extract_motion_field(clip, cc.motion_block, cc.motion_radius)) if with_motion else None
        banks.append(bank_from_clip(clip, fields))
    return banks


def make_batch(cfg, size=2, with_motion=True):
    ds = cfg.dataset
    return collate_banks(make_banks(cfg, size, with_motion), ds.num_frames, ds.num_classes, ds.channels, ds.image_size)


def make_image_model(cfg, seed=0):
    with seeded_init(RngState(seed)):
        return DenoiserModel(cfg).eval()


def random_inputs(cfg, model, seed, batch_size=2):
    g = torch.Generator().manual_seed(seed)
    shape = (batch_size, cfg.dataset.num_frames, model.latent_channels, model.latent_size, model.latent_size)
    z = torch.randn(shape, generator=g)
    t = torch.randint(1, cfg.diffusion.timesteps + 1, (batch_size,), generator=g)
    return z, t
