"""
Exhaustive block-matching motion fields between adjacent frames.
"""

from dataclasses import dataclass

import numpy as np
import torch

from common.errors import DataError


@dataclass
class MotionField:
    """Per-pixel displacement (pixels per frame step) from frame f to frame f+1."""

    dy: np.ndarray
    dx: np.ndarray

    @property
    def shape(self):
        return self.dy.shape


def candidate_offsets(radius):
    """All (dy, dx) in [-radius, radius]^2, in tie-break order: smallest norm, then lexicographic."""
    offsets = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    return sorted(offsets, key=lambda o: (o[0] ** 2 + o[1] ** 2, o[0], o[1]))


def _match_pair(cur, nxt, block, radius, offsets):
    c, h, w = cur.shape
    nby, nbx = h // block, w // block
    padded = np.pad(nxt, ((0, 0), (radius, radius), (radius, radius)), constant_values=np.nan)

    best_cost = np.full((nby, nbx), np.inf)
    best = np.zeros((nby, nbx, 2))
    for dy, dx in offsets:
        shifted = padded[:, radius + dy : radius + dy + h, radius + dx : radius + dx + w]
        cost = np.abs(cur - shifted).reshape(c, nby, block, nbx, block).sum(axis=(0, 2, 4))
        # displaced blocks leaving the frame are never candidates
        cost = np.where(np.isnan(cost), np.inf, cost)
        # strict comparison keeps the earlier (preferred) offset on ties
        better = cost < best_cost
        best_cost = np.where(better, cost, best_cost)
        best[better] = (dy, dx)

    dy = np.repeat(np.repeat(best[..., 0], block, axis=0), block, axis=1)
    dx = np.repeat(np.repeat(best[..., 1], block, axis=0), block, axis=1)
    return MotionField(dy=dy.astype(np.float32), dx=dx.astype(np.float32))


def extract_motion_field(clip, block=4, radius=3):
    """
    Block matching between every pair of adjacent frames.

    For each block of frame f the integer displacement in [-radius, radius]^2
    minimizing the sum of absolute differences against frame f+1 is chosen and
    broadcast to the block's pixels. Accepts a SequenceClip or an FxCxHxW tensor.
    """
    pixels = getattr(clip, "pixels", clip)
    arr = np.asarray(torch.as_tensor(pixels).detach().cpu(), dtype=np.float64)
    if arr.ndim != 4:
        raise DataError(f"expected FxCxHxW pixels, got shape {arr.shape}")
    num_frames, _, h, w = arr.shape
    if num_frames < 2:
        raise DataError("motion extraction needs at least 2 frames")
    if block < 1 or h % block or w % block:
        raise DataError(f"block {block} must divide frame size {h}x{w}")
    if radius < 0:
        raise DataError("search radius must be >= 0")

    offsets = candidate_offsets(radius)
    return [_match_pair(arr[f], arr[f + 1], block, radius, offsets) for f in range(num_frames - 1)]


def stack_fields(fields):
    """list of MotionField -> (F-1) x 2 x H x W float32 tensor, channels (dy, dx)."""
    if not fields:
        raise DataError("no motion fields to stack")
    return torch.from_numpy(np.stack([np.stack([f.dy, f.dx]) for f in fields]).astype(np.float32))


def unstack_fields(tensor):
    arr = torch.as_tensor(tensor).detach().cpu().numpy()
    return [MotionField(dy=a[0], dx=a[1]) for a in arr]
