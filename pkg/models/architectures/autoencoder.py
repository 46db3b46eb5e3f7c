"""
Small convolutional VAE for frames. Spatial downsampling by `rate`
(a power of two), `latent_channels` latent channels.

At inference the posterior mean is used, multiplied by `latent_scale`
(1 / std of the training latents) so diffusion sees unit-variance latents.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from common.errors import DimensionError, StateError


def _groups(channels, preferred=8):
    g = min(preferred, channels)
    while channels % g:
        g -= 1
    return g


class ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Autoencoder(nn.Module):
    def __init__(self, channels=1, image_size=32, rate=4, latent_channels=4, base_channels=32):
        super().__init__()
        if rate < 1 or rate & (rate - 1):
            raise DimensionError(f"downsampling rate must be a power of two, got {rate}")
        self.channels = channels
        self.image_size = image_size
        self.rate = rate
        self.latent_channels = latent_channels
        levels = rate.bit_length() - 1

        enc = [nn.Conv2d(channels, base_channels, 3, padding=1)]
        for _ in range(levels):
            enc += [ConvBlock(base_channels, base_channels), nn.Conv2d(base_channels, base_channels, 3, stride=2, padding=1)]
        enc += [ConvBlock(base_channels, base_channels), nn.GroupNorm(_groups(base_channels), base_channels), nn.SiLU()]
        enc.append(nn.Conv2d(base_channels, 2 * latent_channels, 3, padding=1))
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv2d(latent_channels, base_channels, 3, padding=1), ConvBlock(base_channels, base_channels)]
        for _ in range(levels):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(base_channels, base_channels, 3, padding=1), ConvBlock(base_channels, base_channels)]
        dec += [nn.GroupNorm(_groups(base_channels), base_channels), nn.SiLU(), nn.Conv2d(base_channels, channels, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)

        self.register_buffer("latent_scale", torch.tensor(1.0))
        self.register_buffer("fitted", torch.tensor(0.0))

    @classmethod
    def from_config(cls, cfg):
        ae = cfg.autoencoder
        return cls(cfg.dataset.channels, cfg.dataset.image_size, ae.rate, ae.latent_channels, ae.base_channels)

    @property
    def latent_size(self):
        return self.image_size // self.rate

    @property
    def is_fitted(self):
        return bool(self.fitted.item() > 0)

    def require_fitted(self):
        if not self.is_fitted:
            raise StateError("autoencoder has not been trained")

    def _check_frames(self, x):
        if tuple(x.shape[-3:]) != (self.channels, self.image_size, self.image_size):
            raise DimensionError(
                f"frames must be {self.channels}x{self.image_size}x{self.image_size}, got {tuple(x.shape[-3:])}"
            )

    def posterior(self, x):
        """(mean, logvar) of q(z|x) for B x C x H x W frames."""
        self._check_frames(x)
        mean, logvar = self.encoder(x * 2.0 - 1.0).chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)

    def reconstruct_logits(self, z):
        return self.decoder(z)

    def encode(self, x):
        """Deterministic scaled latents for frames of any leading shape (..., C, H, W)."""
        lead = x.shape[:-3]
        mean, _ = self.posterior(x.reshape(-1, *x.shape[-3:]))
        z = mean * self.latent_scale
        return z.reshape(*lead, *z.shape[1:])

    def decode(self, z):
        lead = z.shape[:-3]
        if z.shape[-3] != self.latent_channels:
            raise DimensionError(f"latents need {self.latent_channels} channels, got {z.shape[-3]}")
        x = torch.sigmoid(self.decoder(z.reshape(-1, *z.shape[-3:]) / self.latent_scale))
        return x.reshape(*lead, *x.shape[1:])


def vae_encode(autoencoder, x):
    autoencoder.require_fitted()
    return autoencoder.encode(x)


def vae_decode(autoencoder, z):
    autoencoder.require_fitted()
    return autoencoder.decode(z)
