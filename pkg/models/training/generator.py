"""
Two-stage generator training.

    vae_train               frame autoencoder from scratch
    pretrain_image_ldm      image-mode denoiser on individual frames
    finetune_sequence_ldm   inflated denoiser on clips; only SAM, SA, the motion
                            group and the cross-attention query projections move
"""

import math

import torch
import torch.nn.functional as F
from tqdm import tqdm

from common.config import OptimConfig, config_from_dict, config_to_dict
from common.errors import StateError
from common.log import log
from data_collection.processing.clip_store import load_checkpoint, save_checkpoint
from models.architectures.autoencoder import Autoencoder
from models.architectures.conditioning import bank_from_clip, collate_banks, drop_conditions
from models.architectures.motion import extract_motion_field, stack_fields
from models.architectures.unet import DenoiserModel, finetune_parameter_names, inflate_2d_to_3d
from models.numerics import (
    RngState,
    adamw_cosine_step,
    build_optimizer,
    check_finite,
    parameter_hash,
    seeded_init,
)
from models.training.schedule import NoiseSchedule, training_loss


# --- AUTOENCODER ---


def clip_frames(clips):
    return torch.cat([clip.pixels for clip in clips], dim=0)


def vae_loss(autoencoder, x, generator, kl_weight):
    mean, logvar = autoencoder.posterior(x)
    noise = torch.randn(mean.shape, generator=generator)
    z = mean + torch.exp(0.5 * logvar) * noise
    recon = torch.sigmoid(autoencoder.reconstruct_logits(z))
    kl = -0.5 * torch.mean(1.0 + logvar - mean.pow(2) - logvar.exp())
    return F.mse_loss(recon, x) + kl_weight * kl


@torch.no_grad()
def reconstruction_mse(autoencoder, frames, batch_size=256):
    total, count = 0.0, 0
    for start in range(0, frames.shape[0], batch_size):
        x = frames[start : start + batch_size]
        recon = autoencoder.decode(autoencoder.encode(x))
        total += F.mse_loss(recon, x, reduction="sum").item()
        count += x.numel()
    return total / max(count, 1)


def vae_train(frames, cfg, seed=0):
    """Returns (fitted Autoencoder, loss curve rows)."""
    ae_cfg = cfg.autoencoder
    with seeded_init(RngState.named(seed, "vae:init")):
        autoencoder = Autoencoder.from_config(cfg)
    opt_cfg = OptimConfig(batch_size=ae_cfg.batch_size, epochs=ae_cfg.epochs, lr=ae_cfg.lr, warmup=0, weight_decay=0.0)
    optimizer = build_optimizer(autoencoder.parameters(), opt_cfg)
    order_rng = RngState.named(seed, "vae:order").numpy()
    noise_gen = RngState.named(seed, "vae:noise").torch()

    n = frames.shape[0]
    total_steps = ae_cfg.epochs * math.ceil(n / ae_cfg.batch_size)
    curve, step = [], 0
    autoencoder.train()
    for epoch in tqdm(range(ae_cfg.epochs), desc="VAE"):
        order = order_rng.permutation(n)
        for start in range(0, n, ae_cfg.batch_size):
            x = frames[torch.as_tensor(order[start : start + ae_cfg.batch_size])]
            step += 1
            loss = check_finite(vae_loss(autoencoder, x, noise_gen, ae_cfg.kl_weight), "VAE loss")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            lr = adamw_cosine_step(optimizer, step, opt_cfg, total_steps)
            curve.append({"stage": "vae", "step": step, "epoch": epoch, "loss": loss.item(), "lr": lr})
        log(f"VAE epoch {epoch + 1}/{ae_cfg.epochs} | loss {curve[-1]['loss']:.5f}", "DEBUG")
    autoencoder.eval()

    with torch.no_grad():
        means = torch.cat(
            [autoencoder.posterior(frames[s : s + 256])[0] for s in range(0, n, 256)], dim=0
        )
        std = means.std().item()
    autoencoder.latent_scale.fill_(1.0 / std if std > 0 else 1.0)
    autoencoder.fitted.fill_(1.0)
    log(f"VAE fitted | latent_scale {autoencoder.latent_scale.item():.4f}")
    return autoencoder, curve


# --- DENOISER LOOPS ---


@torch.no_grad()
def encode_clips(autoencoder, clips):
    """(N, F, c, h, w) scaled latents."""
    autoencoder.require_fitted()
    return torch.stack([autoencoder.encode(clip.pixels) for clip in clips])


def _denoiser_loop(model, trainable, num_items, make_batch, opt_cfg, cfg, schedule, seed, stream):
    optimizer = build_optimizer(list(trainable), opt_cfg)
    order_rng = RngState.named(seed, f"{stream}:order").numpy()
    drop_rng = RngState.named(seed, f"{stream}:drop").numpy()
    noise_gen = RngState.named(seed, f"{stream}:noise").torch()
    ds = cfg.dataset

    total_steps = opt_cfg.epochs * math.ceil(num_items / opt_cfg.batch_size)
    curve, step = [], 0
    model.train()
    for epoch in tqdm(range(opt_cfg.epochs), desc=stream):
        order = order_rng.permutation(num_items)
        for start in range(0, num_items, opt_cfg.batch_size):
            z0, banks, num_frames = make_batch(order[start : start + opt_cfg.batch_size])
            banks = [drop_conditions(bank, drop_rng, cfg.conditioning) for bank in banks]
            batch = collate_banks(banks, num_frames, ds.num_classes, ds.channels, ds.image_size)
            t = schedule.sample_timesteps(z0.shape[0], noise_gen)
            eps = torch.randn(z0.shape, generator=noise_gen)
            step += 1
            pathway_seed = step if cfg.sam.resample_per_forward else seed
            loss = check_finite(
                training_loss(model, z0, batch, t, eps, schedule, pathway_seed=pathway_seed),
                f"{stream} loss",
            )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            lr = adamw_cosine_step(optimizer, step, opt_cfg, total_steps)
            curve.append({"stage": stream, "step": step, "epoch": epoch, "loss": loss.item(), "lr": lr})
            if step % opt_cfg.log_every == 0:
                log(f"{stream} step {step}/{total_steps} | loss {loss.item():.5f} | lr {lr:.2e}")
    model.eval()
    return curve


def pretrain_image_ldm(clips, autoencoder, cfg, seed=0):
    """
    Image-mode denoiser on individual frames. Each frame is conditioned on its
    clip's class, attribute tokens and first frame. Returns (model, curve).
    """
    if not autoencoder.is_fitted:
        raise StateError("pretraining needs a fitted autoencoder")
    latents = encode_clips(autoencoder, clips)
    num_frames = latents.shape[1]
    banks = [bank_from_clip(clip) for clip in clips]
    schedule = NoiseSchedule.from_config(cfg)

    with seeded_init(RngState.named(seed, "ldm:init")):
        model = DenoiserModel(cfg)

    def make_batch(idx):
        idx = torch.as_tensor(idx, dtype=torch.long)
        clip_idx, frame_idx = idx // num_frames, idx % num_frames
        z0 = latents[clip_idx, frame_idx].unsqueeze(1)
        return z0, [banks[int(i)] for i in clip_idx], 1

    curve = _denoiser_loop(
        model, model.parameters(), len(clips) * num_frames, make_batch, cfg.pretrain, cfg, schedule, seed, "pretrain"
    )
    return model, curve


def clip_motion_fields(clips, cfg):
    cc = cfg.conditioning
    return [stack_fields(extract_motion_field(clip, cc.motion_block, cc.motion_radius)) for clip in clips]


def freeze_for_finetune(model):
    """Enable gradients only on the finetuned groups; returns (trainable, frozen) dicts by name."""
    names = finetune_parameter_names(model)
    trainable, frozen = {}, {}
    for name, p in model.named_parameters():
        p.requires_grad_(name in names)
        (trainable if name in names else frozen)[name] = p
    return trainable, frozen


def finetune_sequence_ldm(model, clips, autoencoder, cfg, seed=0, fields=None):
    """
    Sequence finetuning of an inflated model (in place). Every frozen
    parameter is hashed before and after; a changed hash is an error.
    Returns (model, curve).
    """
    if model.mode != "sequence":
        raise StateError("finetuning needs an inflated (sequence-mode) model")
    latents = encode_clips(autoencoder, clips)
    fields = fields if fields is not None else clip_motion_fields(clips, cfg)
    banks = [bank_from_clip(clip, f) for clip, f in zip(clips, fields)]
    schedule = NoiseSchedule.from_config(cfg)

    trainable, frozen = freeze_for_finetune(model)
    before = parameter_hash(frozen)
    log(
        f"finetune: {sum(p.numel() for p in trainable.values()):,} trainable | "
        f"{sum(p.numel() for p in frozen.values()):,} frozen parameters"
    )

    def make_batch(idx):
        idx = torch.as_tensor(idx, dtype=torch.long)
        return latents[idx], [banks[int(i)] for i in idx], latents.shape[1]

    curve = _denoiser_loop(
        model, trainable.values(), len(clips), make_batch, cfg.finetune, cfg, schedule, seed, "finetune"
    )
    if parameter_hash(frozen) != before:
        raise StateError("frozen parameters changed during finetuning")
    return model, curve


# --- CHECKPOINTS ---


def save_model(path, model, cfg, **meta):
    meta.setdefault("mode", getattr(model, "mode", None))
    meta.setdefault("variant", getattr(model, "variant", None))
    save_checkpoint(path, model.state_dict(), config=config_to_dict(cfg), meta=meta)


def load_autoencoder(path):
    state, config, _ = load_checkpoint(path)
    autoencoder = Autoencoder.from_config(config_from_dict(config))
    autoencoder.load_state_dict(state)
    autoencoder.eval()
    return autoencoder


def load_denoiser(path):
    """Rebuilds the image or inflated sequence model recorded in the checkpoint."""
    state, config, meta = load_checkpoint(path)
    cfg = config_from_dict(config)
    model = DenoiserModel(cfg)
    if meta.get("mode") == "sequence":
        model = inflate_2d_to_3d(model, meta["variant"])
    model.load_state_dict(state)
    model.eval()
    return model
