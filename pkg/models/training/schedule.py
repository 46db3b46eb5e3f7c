"""
Linear beta schedule, closed-form forward diffusion and the epsilon objective.
"""

import torch
import torch.nn.functional as F

from common.errors import ConfigError, DataError, DimensionError


class NoiseSchedule:
    """
    betas[t-1] for t = 1..T; alpha_bar(0) = 1 by convention.
    Kept in float64; values are cast at the point of use.
    """

    def __init__(self, timesteps=1000, beta_start=1e-4, beta_end=2e-2):
        if timesteps < 1:
            raise ConfigError("diffusion.timesteps must be >= 1")
        if not 0.0 < beta_start <= beta_end < 1.0:
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        self.T = timesteps
        self.betas = torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64)
        alphas_cumprod = torch.cumprod(1.0 - self.betas, dim=0)
        self.alphas_cumprod = alphas_cumprod
        self._alpha_bar = torch.cat([torch.ones(1, dtype=torch.float64), alphas_cumprod])

    @classmethod
    def from_config(cls, cfg):
        d = cfg.diffusion
        return cls(d.timesteps, d.beta_start, d.beta_end)

    def alpha_bar(self, t):
        t = torch.as_tensor(t, dtype=torch.long)
        if t.numel() and (t.min() < 0 or t.max() > self.T):
            raise DataError(f"timestep outside [0, {self.T}]")
        return self._alpha_bar[t]

    def sample_timesteps(self, n, generator):
        return torch.randint(1, self.T + 1, (n,), generator=generator)


def _broadcast(values, like):
    return values.to(like.dtype).reshape(-1, *([1] * (like.dim() - 1)))


def forward_diffuse(z0, t, eps, schedule):
    """z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps, t in [1, T] per batch row."""
    if eps.shape != z0.shape:
        raise DimensionError(f"eps {tuple(eps.shape)} does not match z0 {tuple(z0.shape)}")
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if t.min() < 1 or t.max() > schedule.T:
        raise DataError(f"t must lie in [1, {schedule.T}]")
    ab = schedule.alpha_bar(t)
    if ab.numel() == 1 and z0.shape[0] != 1:
        ab = ab.expand(z0.shape[0])
    return _broadcast(ab.sqrt(), z0) * z0 + _broadcast((1.0 - ab).sqrt(), z0) * eps


def training_loss(model, z0, batch, t, eps, schedule, pathway_seed=0):
    """|| eps - eps_theta(z_t, c, t) ||^2, averaged. `batch` has already been through condition dropping."""
    z_t = forward_diffuse(z0, t, eps, schedule)
    pred = model(z_t, t, batch, pathway_seed=pathway_seed)
    return F.mse_loss(pred, eps)
