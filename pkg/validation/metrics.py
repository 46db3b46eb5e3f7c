"""
Sequence quality metrics, all in percent.

    VAE-Seq              mean cosine similarity of consecutive frame latents
    inter-clip similarity (Theta)
                         mean cosine similarity of index-aligned frame latents
    Dynamic Smoothness   100 * (1 - MAE) of midpoint-interpolated interior frames
"""

import torch

from common.errors import DataError
from models.numerics import cosine_similarity


def _pixels(clip):
    return getattr(clip, "pixels", clip)


@torch.no_grad()
def clip_latents(clip, autoencoder):
    """F x D float64 flattened latents, one row per frame."""
    z = autoencoder.encode(_pixels(clip))
    return z.reshape(z.shape[0], -1).to(torch.float64)


def vae_seq_from_latents(latents):
    if latents.shape[0] < 2:
        raise DataError("VAE-Seq needs at least 2 frames")
    sims = [cosine_similarity(latents[i], latents[i + 1]) for i in range(latents.shape[0] - 1)]
    return 100.0 * sum(sims) / len(sims)


def theta_from_latents(latents_a, latents_b):
    if latents_a.shape[0] != latents_b.shape[0]:
        raise DataError(f"clips have {latents_a.shape[0]} and {latents_b.shape[0]} frames")
    sims = [cosine_similarity(latents_a[i], latents_b[i]) for i in range(latents_a.shape[0])]
    return 100.0 * sum(sims) / len(sims)


def compute_vae_seq(clip, autoencoder):
    if _pixels(clip).shape[0] < 2:
        raise DataError("VAE-Seq needs at least 2 frames")
    return vae_seq_from_latents(clip_latents(clip, autoencoder))


def inter_clip_similarity(clip_a, clip_b, autoencoder):
    if _pixels(clip_a).shape[0] != _pixels(clip_b).shape[0]:
        raise DataError("inter-clip similarity needs equal frame counts")
    return theta_from_latents(clip_latents(clip_a, autoencoder), clip_latents(clip_b, autoencoder))


def dynamic_smoothness(clip):
    x = torch.as_tensor(_pixels(clip)).to(torch.float64)
    if x.shape[0] < 3:
        raise DataError("Dynamic Smoothness needs at least 3 frames")
    midpoint = 0.5 * (x[:-2] + x[2:])
    mae = (midpoint - x[1:-1]).abs().mean().item()
    return 100.0 * (1.0 - mae)


class LatentCache:
    """Encodes each clip once; keyed by clip id."""

    def __init__(self, autoencoder):
        self.autoencoder = autoencoder
        self._latents = {}

    def __call__(self, clip):
        if clip.clip_id not in self._latents:
            self._latents[clip.clip_id] = clip_latents(clip, self.autoencoder)
        return self._latents[clip.clip_id]

    def vae_seq(self, clip):
        return vae_seq_from_latents(self(clip))

    def theta(self, clip_a, clip_b):
        return theta_from_latents(self(clip_a), self(clip_b))
