"""
Downstream sequence classifier and the three training paradigms.

    baseline        real clips only
    real_finetune   pretrain on synthetic clips, then finetune on real clips
    joint_train     real clips oversampled to the synthetic count, then mixed

Traditional augmentations (color, move, gaussian, rotation, flip) are drawn
once per clip and applied identically to every frame.
"""

import math
from enum import Enum

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from torchvision.transforms import InterpolationMode
from tqdm import tqdm

from common.config import OptimConfig, config_from_dict
from common.errors import DataError
from common.log import log
from data_collection.processing.clip_store import load_checkpoint
from data_collection.processing.split_and_merge import merge_real_synthetic
from models.architectures.classifier import SequenceClassifier
from models.numerics import RngState, adamw_cosine_step, build_optimizer, check_finite, seeded_init


class TrainingParadigm(str, Enum):
    BASELINE = "baseline"
    REAL_FINETUNE = "real_finetune"
    JOINT_TRAIN = "joint_train"


# --- AUGMENTATION ---


def augment_clip(pixels, aug, rng):
    """
    One random draw per augmentation, shared by all frames.
    Draws are taken for every augmentation whether enabled or not, so toggling
    one does not shift the randomness of the others.
    """
    shift = rng.uniform(-aug.brightness, aug.brightness)
    dx, dy = (int(v) for v in rng.integers(-aug.translate, aug.translate + 1, size=2))
    angle = float(rng.uniform(-aug.rotation_deg, aug.rotation_deg))
    flip = bool(rng.random() < 0.5)
    noise_seed = int(rng.integers(0, 2**63 - 1))

    x = pixels
    if aug.color:
        x = x + float(shift)
    if aug.move and (dx or dy):
        x = TF.affine(x, angle=0.0, translate=[dx, dy], scale=1.0, shear=[0.0])
    if aug.rotation and angle != 0.0:
        x = TF.rotate(x, angle, interpolation=InterpolationMode.BILINEAR)
    if aug.flip and flip:
        x = TF.hflip(x)
    if aug.gaussian and aug.noise_sigma > 0:
        g = torch.Generator().manual_seed(noise_seed)
        x = x + aug.noise_sigma * torch.randn(x.shape, generator=g)
    return x.clamp(0.0, 1.0)


# --- TRAINING ---


def _stack(clips):
    x = torch.stack([clip.pixels for clip in clips])
    y = torch.tensor([clip.class_id for clip in clips], dtype=torch.long)
    return x, y


def _fit(model, clips, epochs, cc, aug, seed, stage):
    if not clips:
        raise DataError(f"{stage}: cannot train a classifier on an empty set")
    opt_cfg = OptimConfig(batch_size=cc.batch_size, epochs=epochs, lr=cc.lr, warmup=0, weight_decay=cc.weight_decay)
    optimizer = build_optimizer(model.parameters(), opt_cfg)
    order_rng = RngState.named(seed, f"{stage}:order").numpy()
    aug_rng = RngState.named(seed, f"{stage}:augment").numpy()
    x_all, y_all = _stack(clips)

    n = len(clips)
    total_steps = epochs * math.ceil(n / cc.batch_size)
    curve, step = [], 0
    model.train()
    for epoch in tqdm(range(epochs), desc=stage, leave=False):
        order = order_rng.permutation(n)
        for start in range(0, n, cc.batch_size):
            idx = torch.as_tensor(order[start : start + cc.batch_size])
            x = torch.stack([augment_clip(clip, aug, aug_rng) for clip in x_all[idx]])
            step += 1
            loss = check_finite(F.cross_entropy(model(x), y_all[idx]), f"{stage} loss")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            lr = adamw_cosine_step(optimizer, step, opt_cfg, total_steps)
            curve.append({"stage": stage, "step": step, "epoch": epoch, "loss": loss.item(), "lr": lr})
        log(f"{stage} epoch {epoch + 1}/{epochs} | loss {curve[-1]['loss']:.4f}", "DEBUG")
    model.eval()
    return curve


def new_classifier(cfg, seed=0):
    with seeded_init(RngState.named(seed, "classifier:init")):
        return SequenceClassifier(cfg.dataset.channels, cfg.dataset.num_classes, tuple(cfg.classifier.channels))


def train_classifier(real, synthetic, paradigm, cfg, seed=0, augment=None):
    """
    Returns (classifier, curve rows). An empty synthetic set makes every
    paradigm train exactly like baseline.
    """
    paradigm = TrainingParadigm(paradigm)
    cc = cfg.classifier
    aug = augment if augment is not None else cc.augment
    real = list(real)
    if paradigm is not TrainingParadigm.BASELINE and synthetic is None:
        raise DataError(f"{paradigm.value} needs a synthetic set")
    synthetic = list(synthetic or [])
    if not real:
        raise DataError("train_classifier needs at least one real clip")

    model = new_classifier(cfg, seed)
    if paradigm is TrainingParadigm.BASELINE or not synthetic:
        curve = _fit(model, real, cc.epochs, cc, aug, seed, "classifier")
    elif paradigm is TrainingParadigm.JOINT_TRAIN:
        merged = merge_real_synthetic(real, synthetic, RngState.named(seed, "classifier:oversample").numpy())
        log(f"joint_train: {len(merged) - len(synthetic)} real (oversampled) + {len(synthetic)} synthetic")
        curve = _fit(model, merged, cc.epochs, cc, aug, seed, "classifier")
    else:
        curve = _fit(model, synthetic, cc.epochs, cc, aug, seed, "classifier:synthetic")
        curve += _fit(model, real, cc.finetune_epochs, cc, aug, seed, "classifier:real")
    return model, curve


# --- SCORING ---


@torch.no_grad()
def predict_scores(model, clips, batch_size=64):
    """(N, K) float64 softmax probabilities."""
    if not clips:
        raise DataError("nothing to score")
    model.eval()
    out = []
    for start in range(0, len(clips), batch_size):
        x = torch.stack([clip.pixels for clip in clips[start : start + batch_size]])
        out.append(torch.softmax(model(x).to(torch.float64), dim=1))
    return torch.cat(out).numpy()


def classifier_loss_fn(model):
    """(clip, class_id) -> cross-entropy of the clip under `model`."""
    model.eval()

    @torch.no_grad()
    def loss_fn(clip, class_id):
        logits = model(clip.pixels.unsqueeze(0)).to(torch.float64)
        return F.cross_entropy(logits, torch.tensor([int(class_id)])).item()

    return loss_fn


def predicted_labels(scores):
    return np.asarray(scores).argmax(axis=1)


def load_classifier(path):
    state, config, _ = load_checkpoint(path)
    cfg = config_from_dict(config)
    model = SequenceClassifier(cfg.dataset.channels, cfg.dataset.num_classes, tuple(cfg.classifier.channels))
    model.load_state_dict(state)
    model.eval()
    return model
