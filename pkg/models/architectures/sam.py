"""
Temporal attention for sequence latents.

Latent tokens are laid out as (B, F, N, C): batch, frame, spatial site
(row-major over an h x w grid), channel.

    SequentialAttention   each site attends across the F frames at that site
    KeyFrameAttention     frame l attends to every patch of frames 1 and l-1
    motion_field_attention
                          projection-free attention along motion-traced
                          patch pathways
    SAMBlock              KA then MFA in cascade, as a zero-init residual branch
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from common.errors import DataError, DimensionError
from models.numerics import RngState, scaled_dot_product_attention


def _identity(x):
    return x


def _zero_linear(dim):
    layer = nn.Linear(dim, dim)
    nn.init.zeros_(layer.weight)
    nn.init.zeros_(layer.bias)
    return layer


# --- SEQUENTIAL ATTENTION ---


def sequential_attention(z, to_q=_identity, to_k=_identity, to_v=_identity):
    """Same-site attention over frames. z: (B, F, N, C) -> (B, F, N, C)."""
    site_major = z.transpose(1, 2)
    out = scaled_dot_product_attention(to_q(site_major), to_k(site_major), to_v(site_major))
    return out.transpose(1, 2)


class SequentialAttention(nn.Module):
    """Residual same-site temporal attention; the output projection starts at zero."""

    def __init__(self, dim):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_out = _zero_linear(dim)

    def forward(self, z):
        h = sequential_attention(self.norm(z), self.to_q, self.to_k, self.to_v)
        return z + self.to_out(h)


# --- KEY-FRAME ATTENTION ---


def key_frame_attention(z, to_q=_identity, to_k=_identity, to_v=_identity):
    """
    Frame l queries the patches of frames {1, l-1}; frame 1 uses {1, 1}.
    z: (B, F, N, C) -> (B, F, N, C).
    """
    if z.dim() != 4:
        raise DimensionError(f"expected (B, F, N, C) latents, got {tuple(z.shape)}")
    num_frames = z.shape[1]
    q, k, v = to_q(z), to_k(z), to_v(z)
    prev = torch.clamp(torch.arange(num_frames) - 1, min=0)
    first = torch.zeros(num_frames, dtype=torch.long)
    k_ref = torch.cat([k[:, first], k[:, prev]], dim=2)
    v_ref = torch.cat([v[:, first], v[:, prev]], dim=2)
    return scaled_dot_product_attention(q, k_ref, v_ref)


class KeyFrameAttention(nn.Module):
    """KA with projections copied from a pretrained spatial self-attention; returns the
    projected attention output (no residual)."""

    def __init__(self, dim):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_out = _zero_linear(dim)

    @classmethod
    def from_spatial(cls, spatial):
        ka = cls(spatial.to_q.in_features)
        ka.norm.load_state_dict(spatial.norm.state_dict())
        ka.to_q.load_state_dict(spatial.to_q.state_dict())
        ka.to_k.load_state_dict(spatial.to_k.state_dict())
        ka.to_v.load_state_dict(spatial.to_v.state_dict())
        return ka

    def forward(self, z):
        return self.to_out(key_frame_attention(self.norm(z), self.to_q, self.to_k, self.to_v))


# --- PATCH PATHWAYS ---


@dataclass
class PatchPathwaySet:
    """
    index[k, l] is the flat (row-major) grid cell of pathway k at frame l.
    Each column is a permutation of the grid cells, so every (frame, cell)
    slot belongs to exactly one pathway.
    """

    index: np.ndarray
    grid: tuple
    m: int

    @property
    def num_pathways(self):
        return self.index.shape[0]

    @property
    def num_frames(self):
        return self.index.shape[1]

    @property
    def num_slots(self):
        return self.index.size

    def pathways(self):
        gw = self.grid[1]
        return [
            [(l, int(cell) // gw, int(cell) % gw) for l, cell in enumerate(row)]
            for row in self.index
        ]

    def is_partition(self):
        cells = self.grid[0] * self.grid[1]
        return all(
            np.array_equal(np.sort(self.index[:, l]), np.arange(cells)) for l in range(self.num_frames)
        )


def downsample_fields(fields, m):
    """Mean displacement per m x m cell, in cell units, rounded half away from zero."""
    steps, _, h, w = fields.shape
    cells = fields.reshape(steps, 2, h // m, m, w // m, m).mean(axis=(3, 5)) / m
    return (np.sign(cells) * np.floor(np.abs(cells) + 0.5)).astype(np.int64)


def sample_patch_pathways(fields, m, rng):
    """
    Trace one pathway from every frame-1 cell through the m-downsampled motion
    fields. Where pathways collide on a cell, one claimant (uniform, seeded)
    keeps it; the others, in pathway order, move to the nearest unclaimed cell
    (Euclidean, row-major on ties).

    fields: (f-1) x 2 x H x W pixel displacements (dy, dx); f = 1 is (0, 2, H, W).
    """
    fields = np.asarray(torch.as_tensor(fields).detach().cpu(), dtype=np.float64)
    if fields.ndim != 4 or fields.shape[1] != 2:
        raise DataError(f"motion fields must be (f-1) x 2 x H x W, got {fields.shape}")
    steps, _, h, w = fields.shape
    if m < 1 or h % m or w % m:
        raise DataError(f"patch scale m={m} must divide {h}x{w}")

    gh, gw = h // m, w // m
    cells = gh * gw
    disp = downsample_fields(fields, m) if steps else np.zeros((0, 2, gh, gw), dtype=np.int64)
    rows_of = np.arange(cells) // gw
    cols_of = np.arange(cells) % gw

    index = np.empty((cells, steps + 1), dtype=np.int64)
    index[:, 0] = np.arange(cells)
    for l in range(1, steps + 1):
        r, c = rows_of[index[:, l - 1]], cols_of[index[:, l - 1]]
        r_new = np.clip(r + disp[l - 1, 0, r, c], 0, gh - 1)
        c_new = np.clip(c + disp[l - 1, 1, r, c], 0, gw - 1)
        proposed = r_new * gw + c_new

        owner = np.full(cells, -1, dtype=np.int64)
        losers = []
        claimants = [[] for _ in range(cells)]
        for k in range(cells):
            claimants[proposed[k]].append(k)
        for cell in range(cells):
            group = claimants[cell]
            if not group:
                continue
            winner = group[int(rng.integers(len(group)))] if len(group) > 1 else group[0]
            owner[cell] = winner
            losers.extend(k for k in group if k != winner)

        resolved = proposed.copy()
        for k in sorted(losers):
            free = owner < 0
            d2 = (rows_of - r_new[k]) ** 2 + (cols_of - c_new[k]) ** 2
            d2 = np.where(free, d2, np.iinfo(np.int64).max)
            target = int(np.argmin(d2))
            owner[target] = k
            resolved[k] = target
        index[:, l] = resolved

    return PatchPathwaySet(index=index, grid=(gh, gw), m=m)


# --- MOTION-FIELD ATTENTION ---


def motion_field_attention(z, index):
    """
    Every patch attends to the f patches of its own pathway (itself included)
    with no learned projections.

    z: (B, F, N, C). index: (P, F) or (B, P, F) flat cell per pathway and frame.
    """
    index = torch.as_tensor(index, dtype=torch.long)
    b, num_frames, n, _ = z.shape
    if index.dim() == 2:
        index = index.unsqueeze(0).expand(b, -1, -1)
    if index.shape[0] != b or index.shape[2] != num_frames:
        raise DimensionError(f"pathways {tuple(index.shape)} do not match latents {tuple(z.shape)}")
    if index.shape[1] != n or int(index.max()) >= n:
        raise DimensionError(f"pathway grid does not match the {n}-site latent grid")

    batch = torch.arange(b)[:, None, None]
    frames = torch.arange(num_frames)[None, None, :]
    paths = z[batch, frames, index]  # (B, P, F, C)
    out_paths = scaled_dot_product_attention(paths, paths, paths)
    out = torch.zeros_like(z)
    out = out.index_put((batch.expand_as(index), frames.expand_as(index), index), out_paths)
    return out


def sam_forward(z, fields, m, rng, ka=None, grid=None):
    """
    MFA(KA(z)) with one pathway draw per call. z: (B, F, N, C) latents on a
    grid of H/m x W/m sites; fields: (B, F-1, 2, H, W), or None for the zero
    field, in which case `grid` = (H/m, W/m) gives the site layout.
    """
    b, num_frames, n, _ = z.shape
    if fields is None:
        if grid is None:
            raise DataError("the zero field needs an explicit grid (rows, cols)")
        gh, gw = grid
        if gh * gw != n:
            raise DimensionError(f"grid {gh}x{gw} does not hold {n} tokens")
        fields = torch.zeros(b, num_frames - 1, 2, gh * m, gw * m)
    index = np.stack([sample_patch_pathways(fields[i], m, rng).index for i in range(b)])
    h = ka(z) if ka is not None else key_frame_attention(z)
    return motion_field_attention(h, index)


class SAMBlock(nn.Module):
    """
    z + MFA(KA(z)) (variant SKM) or z + KA(z) (variant SK).

    KA's output projection starts at zero and MFA(0) = 0, so the block is the
    identity until training moves KA. MFA adds no parameters.
    """

    def __init__(self, ka, use_mfa=True):
        super().__init__()
        self.ka = ka
        self.use_mfa = use_mfa

    def forward(self, z, pathways=None):
        h = self.ka(z)
        if self.use_mfa:
            if pathways is None:
                raise DataError("motion-field attention needs pathways")
            h = motion_field_attention(h, pathways)
        return z + h


def pathways_for_batch(fields, m, seed, stream):
    """
    Per-sample pathway index (B, P, F) from pixel fields (B, F-1, 2, H, W).

    `seed` is either one int for the batch (sample i draws from child i) or a
    sequence of B ints, in which case sample i depends on seed[i] alone.
    """
    fields = fields.detach().cpu()
    if isinstance(seed, (int, np.integer)):
        states = [RngState(int(seed), stream).child(i) for i in range(fields.shape[0])]
    else:
        if len(seed) != fields.shape[0]:
            raise DataError(f"{len(seed)} pathway seeds for a batch of {fields.shape[0]}")
        states = [RngState(int(s), stream) for s in seed]
    return np.stack([sample_patch_pathways(fields[i], m, rng.numpy()).index for i, rng in enumerate(states)])
