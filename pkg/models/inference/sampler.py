"""
Classifier-free guided, deterministic DDIM sampling of sequence clips.
"""

import math

import numpy as np
import torch
from tqdm import tqdm

from common.errors import ConfigError, DataError
from common.log import log
from data_collection.simulation.toy_factory import SequenceClip
from models.architectures.conditioning import bank_from_clip, collate_banks
from models.architectures.motion import extract_motion_field, stack_fields
from models.numerics import RngState, check_finite
from validation.filter import SyntheticGroup


def cfg_predict(model, z_t, t, batch, null_batch, s, pathway_seed=0):
    """eps_uncond + s * (eps_cond - eps_uncond); s = 1 and s = 0 return a single branch exactly."""
    if s < 0:
        raise ConfigError("guidance scale must be >= 0")
    if s == 1:
        return model(z_t, t, batch, pathway_seed=pathway_seed)
    uncond = model(z_t, t, null_batch, pathway_seed=pathway_seed)
    if s == 0:
        return uncond
    cond = model(z_t, t, batch, pathway_seed=pathway_seed)
    return uncond + s * (cond - uncond)


def ddim_timesteps(T, steps):
    """Descending sub-schedule of `steps` timesteps spread evenly over [1, T], starting at T and ending at 1."""
    if not 1 <= steps <= T:
        raise ConfigError(f"sampling steps {steps} outside [1, T={T}]")
    # spacing (T - 1) / (steps - 1) >= 1, so rounding never merges two steps
    return [int(t) for t in np.linspace(T, 1, steps).round()]


@torch.no_grad()
def ddim_sample(model, autoencoder, batch, sampler_cfg, schedule, seeds, num_frames, resample_pathways=True):
    """
    eta = 0 DDIM from seeded Gaussian latents, one seed per clip in the batch.
    Returns decoded pixels (B, F, C, H, W) clamped to [0, 1].
    """
    if sampler_cfg.eta != 0.0:
        raise ConfigError("only eta = 0 is supported")
    if len(seeds) != batch.batch_size:
        raise DataError(f"{len(seeds)} seeds for a batch of {batch.batch_size}")
    timesteps = ddim_timesteps(schedule.T, sampler_cfg.steps)
    shape = (num_frames, model.latent_channels, model.latent_size, model.latent_size)
    z = torch.stack([torch.randn(shape, generator=RngState(int(s)).torch()) for s in seeds])
    null_batch = batch.null_like(model.null_label)

    for i, t in enumerate(timesteps):
        t_prev = timesteps[i + 1] if i + 1 < len(timesteps) else 0
        tt = torch.full((z.shape[0],), t, dtype=torch.long)
        # per-clip pathway seeds: a clip depends on its own seed only
        pathway_seed = [int(s) * (schedule.T + 1) + t if resample_pathways else int(s) for s in seeds]
        eps = cfg_predict(model, z, tt, batch, null_batch, sampler_cfg.guidance_scale, pathway_seed)
        ab_t = float(schedule.alpha_bar(t))
        ab_prev = float(schedule.alpha_bar(t_prev))
        x0 = (z - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
        z = math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps
    check_finite(z, "sampled latents")
    return autoencoder.decode(z).clamp(0.0, 1.0)


def build_banks(real_clips, cfg):
    """
    One bank per synthetic group, each derived from a real training clip.
    Source clips are cycled per class until the class quota is met.
    Returns [(bank, source clip id)].
    """
    gen, cc = cfg.generation, cfg.conditioning
    groups_per_class = math.ceil(gen.clips_per_class / gen.group_size)
    by_class = {}
    for clip in real_clips:
        by_class.setdefault(clip.class_id, []).append(clip)

    banks = []
    for class_id in sorted(by_class):
        pool = by_class[class_id]
        for g in range(groups_per_class):
            src = pool[g % len(pool)]
            fields = None
            if src.num_frames >= 2:
                fields = stack_fields(extract_motion_field(src, cc.motion_block, cc.motion_radius))
            banks.append((bank_from_clip(src, fields), src.clip_id))
    return banks


def generate_groups(model, autoencoder, banks, clips_per_group, seed, cfg, schedule, source_ids=None):
    """
    Group g holds M clips sampled under banks[g]; clip j of group g uses seed
    seed + g * M + j. Conditions outside generation.use_conditions are nulled
    before sampling; the group's class always comes from its bank.
    """
    if clips_per_group < 1:
        raise DataError("clips per group must be >= 1")
    ds = cfg.dataset
    groups = []
    for g, bank in enumerate(tqdm(banks, desc="Sampling groups")):
        seeds = [seed + g * clips_per_group + j for j in range(clips_per_group)]
        used = bank.restrict(cfg.generation.use_conditions)
        batch = collate_banks([used] * clips_per_group, ds.num_frames, ds.num_classes, ds.channels, ds.image_size)
        pixels = ddim_sample(
            model, autoencoder, batch, cfg.sampler, schedule, seeds, ds.num_frames, cfg.sam.resample_per_forward
        )
        clips = [
            SequenceClip(
                pixels=pixels[j].contiguous(),
                class_id=int(bank.class_label),
                tokens=list(bank.text or []),
                source="synthetic",
                clip_id=f"syn_g{g:04d}_{j:02d}",
                meta={"seed": seeds[j]},
            )
            for j in range(clips_per_group)
        ]
        groups.append(
            SyntheticGroup(
                group_id=g,
                bank=bank,
                clips=clips,
                source_clip=source_ids[g] if source_ids else None,
            )
        )
    log(f"generated {len(groups)} groups | {sum(len(gr.clips) for gr in groups)} clips")
    return groups
