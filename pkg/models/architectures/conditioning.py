"""
Multimodal conditions: class label, attribute text, image prior and motion
fields, plus decoupled cross-attention and condition dropping.

Null forms are additive identities: the null class row starts at zero, a
missing image prior yields zero tokens, a missing motion condition is the zero
field. The text stream has a learned null token.
"""

import dataclasses
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from common.config import CONDITION_NAMES
from common.errors import DataError, DimensionError
from models.numerics import scaled_dot_product_attention


@dataclass
class ConditionsBank:
    """Optional control signals for one generation group. Any subset may be present."""

    class_label: Optional[int] = None
    text: Optional[list] = None
    image_prior: Optional[torch.Tensor] = None
    motion_fields: Optional[torch.Tensor] = None

    @classmethod
    def null(cls):
        return cls()

    @property
    def is_null(self):
        return (
            self.class_label is None
            and not self.text
            and self.image_prior is None
            and self.motion_fields is None
        )

    def present(self):
        names = []
        if self.class_label is not None:
            names.append("class")
        if self.text:
            names.append("text")
        if self.image_prior is not None:
            names.append("image")
        if self.motion_fields is not None:
            names.append("motion")
        return names

    def restrict(self, use_conditions):
        """Keep only the listed conditions; the rest take their null form."""
        unknown = set(use_conditions) - set(CONDITION_NAMES)
        if unknown:
            raise DataError(f"unknown conditions {sorted(unknown)}")
        return ConditionsBank(
            class_label=self.class_label if "class" in use_conditions else None,
            text=self.text if "text" in use_conditions else None,
            image_prior=self.image_prior if "image" in use_conditions else None,
            motion_fields=self.motion_fields if "motion" in use_conditions else None,
        )

    def check(self, num_frames):
        if self.motion_fields is not None and self.motion_fields.shape[0] != num_frames - 1:
            raise DataError(
                f"motion_fields has {self.motion_fields.shape[0]} entries, "
                f"expected {num_frames - 1} for a {num_frames}-frame clip"
            )
        return self


def bank_from_clip(clip, fields=None):
    """Class, attribute tokens, first frame as image prior and (optionally) extracted motion."""
    return ConditionsBank(
        class_label=int(clip.class_id),
        text=list(clip.tokens),
        image_prior=clip.pixels[0].clone(),
        motion_fields=fields,
    )


def drop_conditions(bank, rng, cond_cfg):
    """
    Joint-training condition dropout.

    One draw decides whether everything is dropped, then one draw per
    condition in (class, text, image, motion) order. All five draws are always
    consumed so the stream position does not depend on which conditions exist.
    """
    probs = (cond_cfg.p_drop_class, cond_cfg.p_drop_text, cond_cfg.p_drop_image, cond_cfg.p_drop_motion)
    for p in (cond_cfg.p_drop_all, *probs):
        if not 0.0 <= p <= 1.0:
            raise DataError(f"p_drop {p} outside [0, 1]")
    draws = rng.random(5)
    if draws[0] < cond_cfg.p_drop_all:
        return ConditionsBank.null()
    return dataclasses.replace(
        bank,
        class_label=None if draws[1] < probs[0] else bank.class_label,
        text=None if draws[2] < probs[1] else bank.text,
        image_prior=None if draws[3] < probs[2] else bank.image_prior,
        motion_fields=None if draws[4] < probs[3] else bank.motion_fields,
    )


@dataclass
class ConditioningBatch:
    """Collated conditions for a batch of B clips of F frames."""

    labels: torch.Tensor  # (B,) long, null id where absent
    text: list  # B token lists, [] where absent
    priors: torch.Tensor  # (B, C, H, W), zeros where absent
    prior_mask: torch.Tensor  # (B,) bool
    motion: torch.Tensor  # (B, F-1, 2, H, W), zeros where absent
    motion_mask: torch.Tensor  # (B,) bool

    @property
    def batch_size(self):
        return self.labels.shape[0]

    def null_like(self, null_label):
        b = self.batch_size
        return ConditioningBatch(
            labels=torch.full((b,), null_label, dtype=torch.long),
            text=[[] for _ in range(b)],
            priors=torch.zeros_like(self.priors),
            prior_mask=torch.zeros(b, dtype=torch.bool),
            motion=torch.zeros_like(self.motion),
            motion_mask=torch.zeros(b, dtype=torch.bool),
        )

    def repeat_frames(self, num_frames):
        """One entry per frame, for driving an image-mode model frame by frame."""
        rep = lambda t: t.repeat_interleave(num_frames, dim=0)  # noqa: E731
        return ConditioningBatch(
            labels=rep(self.labels),
            text=[tokens for tokens in self.text for _ in range(num_frames)],
            priors=rep(self.priors),
            prior_mask=rep(self.prior_mask),
            motion=self.motion.new_zeros((self.batch_size * num_frames, 0) + tuple(self.motion.shape[2:])),
            motion_mask=torch.zeros(self.batch_size * num_frames, dtype=torch.bool),
        )


def collate_banks(banks, num_frames, num_classes, channels, image_size):
    b = len(banks)
    labels = torch.full((b,), num_classes, dtype=torch.long)
    priors = torch.zeros(b, channels, image_size, image_size)
    prior_mask = torch.zeros(b, dtype=torch.bool)
    motion = torch.zeros(b, max(num_frames - 1, 0), 2, image_size, image_size)
    motion_mask = torch.zeros(b, dtype=torch.bool)
    text = []
    for i, bank in enumerate(banks):
        bank.check(num_frames)
        if bank.class_label is not None:
            labels[i] = int(bank.class_label)
        text.append(list(bank.text or []))
        if bank.image_prior is not None:
            if tuple(bank.image_prior.shape) != (channels, image_size, image_size):
                raise DataError(f"image prior shape {tuple(bank.image_prior.shape)} does not match the frames")
            priors[i] = bank.image_prior
            prior_mask[i] = True
        if bank.motion_fields is not None:
            motion[i] = bank.motion_fields
            motion_mask[i] = True
    return ConditioningBatch(labels, text, priors, prior_mask, motion, motion_mask)


# --- ENCODERS ---


class ClassLabelEncoder(nn.Module):
    """Adds E[label] to the timestep embedding; id `num_classes` is the null label."""

    def __init__(self, num_classes, emb_dim):
        super().__init__()
        self.num_classes = num_classes
        self.embedding = nn.Embedding(num_classes + 1, emb_dim)
        with torch.no_grad():
            self.embedding.weight[num_classes].zero_()

    @property
    def null_id(self):
        return self.num_classes

    def forward(self, labels, t_emb):
        labels = torch.as_tensor(labels, dtype=torch.long)
        if labels.numel() and (labels.min() < 0 or labels.max() > self.num_classes):
            raise DataError(f"class label outside [0, {self.num_classes}]")
        return t_emb + self.embedding(labels)


def encode_class_label(encoder, label, t_emb):
    return encoder(torch.as_tensor([label]), t_emb.unsqueeze(0))[0]


class TextEncoder(nn.Module):
    def __init__(self, vocab_size, dim, max_len=16):
        super().__init__()
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.token = nn.Embedding(vocab_size, dim)
        self.position = nn.Parameter(torch.randn(max_len, dim) * 0.02)
        self.null = nn.Parameter(torch.randn(1, dim) * 0.02)

    def encode(self, tokens):
        """L x d embedding of one token list; an empty list gives the 1 x d null embedding."""
        tokens = list(tokens or [])
        if not tokens:
            return self.null
        if len(tokens) > self.max_len:
            raise DataError(f"{len(tokens)} text tokens exceeds max length {self.max_len}")
        if min(tokens) < 0 or max(tokens) >= self.vocab_size:
            raise DataError(f"unknown token id in {tokens}")
        ids = torch.as_tensor(tokens, dtype=torch.long)
        return self.token(ids) + self.position[: len(tokens)]

    def forward(self, batch_tokens):
        """Pads to the longest entry; returns (B, L, d) and a (B, L) key mask."""
        encoded = [self.encode(t) for t in batch_tokens]
        longest = max(e.shape[0] for e in encoded)
        out = encoded[0].new_zeros(len(encoded), longest, encoded[0].shape[1])
        mask = torch.zeros(len(encoded), longest, dtype=torch.bool)
        for i, e in enumerate(encoded):
            out[i, : e.shape[0]] = e
            mask[i, : e.shape[0]] = True
        return out, mask


def encode_text(encoder, tokens):
    return encoder.encode(tokens)


class ImagePriorEncoder(nn.Module):
    """Three stride-2 convolutions; each output pixel becomes one d-dim token."""

    def __init__(self, channels, dim, hidden=32, image_size=None):
        super().__init__()
        self.channels = channels
        self.image_size = image_size
        self.net = nn.Sequential(
            nn.Conv2d(channels, hidden, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, hidden, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(hidden, dim, 3, stride=2, padding=1),
        )

    def forward(self, frames):
        if frames.dim() != 4 or frames.shape[1] != self.channels:
            raise DataError(f"image prior must be B x {self.channels} x H x W, got {tuple(frames.shape)}")
        if self.image_size is not None and tuple(frames.shape[-2:]) != (self.image_size, self.image_size):
            raise DataError(f"image prior must be {self.image_size}x{self.image_size}")
        feats = self.net(frames)
        return feats.flatten(2).transpose(1, 2)


def encode_image_prior(encoder, frame):
    """C x H x W frame -> N x d tokens, N = ceil(H/8) * ceil(W/8)."""
    return encoder(frame.unsqueeze(0))[0]


class MotionEncoder(nn.Module):
    """
    (B, F-1, 2, H, W) pixel displacements -> (B, F, c_m, h, w) latent-resolution
    features. The last temporal slot is zero: the final frame has no successor.
    """

    def __init__(self, out_channels, rate, hidden=16, scale=1.0):
        super().__init__()
        self.scale = scale
        layers, ch = [], 2
        for _ in range(int(rate).bit_length() - 1):
            layers += [nn.Conv2d(ch, hidden, 3, stride=2, padding=1), nn.SiLU()]
            ch = hidden
        layers.append(nn.Conv2d(ch, out_channels, 3, padding=1))
        self.net = nn.Sequential(*layers)
        self.out_channels = out_channels
        self.rate = rate

    def forward(self, fields):
        b, steps, two, h, w = fields.shape
        if two != 2:
            raise DimensionError(f"motion fields need 2 channels (dy, dx), got {two}")
        lh, lw = h // self.rate, w // self.rate
        last = fields.new_zeros(b, 1, self.out_channels, lh, lw)
        if steps == 0:
            return last
        feats = self.net(fields.reshape(b * steps, 2, h, w) / self.scale)
        feats = feats.reshape(b, steps, self.out_channels, lh, lw)
        return torch.cat([feats, last], dim=1)


def encode_motion(encoder, fields):
    return encoder(fields.unsqueeze(0))[0]


# --- DECOUPLED CROSS-ATTENTION ---


class DecoupledCrossAttention(nn.Module):
    """
    Attention(Q_t, K_t, V_t) + Attention(Q_i, K_i, V_i).

    Text and image-prior streams have their own projections; both queries
    come from z. Projections carry no bias, and the image-stream value
    projection starts at zero so the module initially reduces to text-only
    cross-attention.
    """

    def __init__(self, query_dim, context_dim):
        super().__init__()
        self.to_q_t = nn.Linear(query_dim, query_dim, bias=False)
        self.to_k_t = nn.Linear(context_dim, query_dim, bias=False)
        self.to_v_t = nn.Linear(context_dim, query_dim, bias=False)
        self.to_q_i = nn.Linear(query_dim, query_dim, bias=False)
        self.to_k_i = nn.Linear(context_dim, query_dim, bias=False)
        self.to_v_i = nn.Linear(context_dim, query_dim, bias=False)
        nn.init.zeros_(self.to_v_i.weight)

    def forward(self, z, f_t, f_i, t_mask=None, i_mask=None):
        if f_t.shape[-1] != self.to_k_t.in_features or f_i.shape[-1] != self.to_k_i.in_features:
            raise DimensionError("context dimension does not match the cross-attention projections")
        text = scaled_dot_product_attention(self.to_q_t(z), self.to_k_t(f_t), self.to_v_t(f_t), t_mask)
        image = scaled_dot_product_attention(self.to_q_i(z), self.to_k_i(f_i), self.to_v_i(f_i), i_mask)
        return text + image


def decoupled_cross_attention(module, z, f_t, f_i):
    return module(z.unsqueeze(0), f_t.unsqueeze(0), f_i.unsqueeze(0))[0]


# --- ALL CONDITIONS ---


@dataclass
class EncodedConditions:
    emb: torch.Tensor  # (B, emb_dim) timestep + class
    text: torch.Tensor  # (B, L_t, d)
    text_mask: torch.Tensor  # (B, L_t)
    image: torch.Tensor  # (B, L_i, d)
    motion: Optional[torch.Tensor] = None  # (B, F, c_m, h, w)
    fields: Optional[torch.Tensor] = None  # (B, F-1, 2, H, W) pixel fields for pathway sampling


class ConditionEncoder(nn.Module):
    def __init__(self, num_classes, vocab_size, channels, image_size, emb_dim, context_dim, text_max_len):
        super().__init__()
        self.class_encoder = ClassLabelEncoder(num_classes, emb_dim)
        self.text_encoder = TextEncoder(vocab_size, context_dim, text_max_len)
        self.image_encoder = ImagePriorEncoder(channels, context_dim, image_size=image_size)
        # attached by inflation
        self.motion_encoder = None

    def forward(self, batch, t_emb):
        emb = self.class_encoder(batch.labels, t_emb)
        f_t, t_mask = self.text_encoder(batch.text)
        f_i = self.image_encoder(batch.priors)
        # absent priors become zero tokens, which bias-free projections map to zero
        f_i = f_i * batch.prior_mask.to(f_i.dtype)[:, None, None]
        motion = None
        if self.motion_encoder is not None:
            motion = self.motion_encoder(batch.motion)
        return EncodedConditions(emb, f_t, t_mask, f_i, motion, batch.motion)
