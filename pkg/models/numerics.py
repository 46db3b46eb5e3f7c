"""
Numerical primitives shared by the generator, the filter and the classifier.

Tensors are torch float32 tensors; gradients come from torch autograd.
Integer / discrete work (k-means, seeded draws) runs on numpy.
"""

import hashlib
import math
import zlib
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from common.errors import DataError, DimensionError, NumericError, UndefinedSimilarityError


# --- RANDOMNESS ---


@dataclass(frozen=True)
class RngState:
    """
    Explicit random state: (seed, stream) fully determines every draw.

    Both generators are derived from numpy's SeedSequence so the same
    (seed, stream) pair yields the same draws on every platform.
    """

    seed: int
    stream: int = 0

    @classmethod
    def named(cls, seed, name):
        return cls(int(seed), zlib.crc32(name.encode()))

    def child(self, index):
        return RngState(self.seed, (self.stream * 1_000_003 + int(index) + 1) % 2**64)

    def _seed_sequence(self):
        return np.random.SeedSequence([int(self.seed) % 2**64, int(self.stream) % 2**64])

    def numpy(self):
        return np.random.default_rng(self._seed_sequence())

    def torch(self):
        state = int(self._seed_sequence().generate_state(1, dtype=np.uint64)[0]) >> 1
        g = torch.Generator()
        g.manual_seed(state)
        return g


def check_finite(t, what="tensor"):
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {what}")
    return t


# --- ATTENTION ---


def scaled_dot_product_attention(q, k, v, mask=None):
    """
    softmax(Q K^T / sqrt(d)) V over the last two dimensions.

    Leading dimensions are treated as batch dimensions. `mask` (..., m) marks
    the keys that may be attended to; every query must keep at least one key.
    """
    if q.dim() < 2 or k.dim() < 2 or v.dim() < 2:
        raise DimensionError("attention inputs must be at least 2-D")
    d = q.shape[-1]
    if d < 1:
        raise DimensionError("attention needs d >= 1")
    if k.shape[-1] != d:
        raise DimensionError(f"query dim {d} does not match key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    if k.shape[-2] < 1:
        raise DimensionError("attention needs at least one key")

    logits = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(d)
    if mask is not None:
        logits = logits.masked_fill(~mask.unsqueeze(-2), float("-inf"))
    # torch.softmax subtracts the row max before exponentiating
    weights = torch.softmax(logits, dim=-1)
    return torch.matmul(weights, v)


# --- CONVOLUTION ---


def conv_pseudo3d(x, kernel, bias=None, stride=1, padding=1):
    """
    Pseudo-3D convolution with a C'xCx1xkxk kernel.

    x is FxCxHxW (one clip) or BxFxCxHxW. The temporal extent of the kernel is
    1, so frames never mix: each output frame is the 2-D convolution of the
    matching input frame.
    """
    if kernel.dim() != 5 or kernel.shape[2] != 1:
        raise DimensionError(f"pseudo-3D kernel must be C'xCx1xkxk, got {tuple(kernel.shape)}")
    single = x.dim() == 4
    if single:
        x = x.unsqueeze(0)
    if x.dim() != 5:
        raise DimensionError(f"expected FxCxHxW or BxFxCxHxW input, got {tuple(x.shape)}")
    if x.shape[2] != kernel.shape[1]:
        raise DimensionError(f"input has {x.shape[2]} channels, kernel expects {kernel.shape[1]}")

    out = F.conv3d(
        x.transpose(1, 2),
        kernel,
        bias,
        stride=(1, stride, stride),
        padding=(0, padding, padding),
    )
    out = out.transpose(1, 2).contiguous()
    return out[0] if single else out


# --- GRADIENT CHECK ---


def grad_check(f, x, eps=1e-4):
    """
    Max relative error between autograd and central differences.

    The check runs in float64: `f` must accept a float64 tensor (convert any
    module it closes over with `.double()`). Non-smooth functions such as a
    hard max are not supported inputs.
    """
    if not 1e-5 <= eps <= 1e-3:
        raise DataError(f"eps={eps} outside [1e-5, 1e-3]")

    x64 = x.detach().to(torch.float64).clone().requires_grad_(True)
    y = f(x64)
    if y.numel() != 1:
        raise DataError("grad_check needs a scalar function")
    (analytic,) = torch.autograd.grad(y, x64)

    flat = x64.detach().clone().reshape(-1)
    numeric = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            f_plus = f(flat.view_as(x64)).item()
            flat[i] = orig - eps
            f_minus = f(flat.view_as(x64)).item()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2 * eps)

    analytic = analytic.reshape(-1)
    if not (torch.isfinite(analytic).all() and torch.isfinite(numeric).all()):
        raise NumericError("non-finite value during gradient check")
    rel = (analytic - numeric).abs() / numeric.abs().clamp(min=1.0)
    return rel.max().item()


# --- OPTIMIZER ---


def effective_lr(step_index, lr, warmup, total_steps):
    """Linear warmup 0 -> lr over `warmup` steps, then cosine decay to 0 at `total_steps`."""
    if step_index < 1:
        raise DataError("step_index starts at 1")
    if warmup > 0 and step_index <= warmup:
        return lr * step_index / warmup
    if total_steps <= warmup:
        return 0.0
    progress = min(1.0, (step_index - warmup) / (total_steps - warmup))
    return lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def build_optimizer(params, cfg):
    """AdamW with decoupled weight decay, configured from an OptimConfig."""
    return torch.optim.AdamW(
        params,
        lr=cfg.lr,
        betas=tuple(cfg.betas),
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
    )


def adamw_cosine_step(optimizer, step_index, cfg, total_steps):
    """Set the scheduled learning rate for `step_index` and apply one AdamW update."""
    lr = effective_lr(step_index, cfg.lr, cfg.warmup, total_steps)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    return lr


# --- CLUSTERING ---


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    iterations: int

    @property
    def k(self):
        return len(self.centroids)

    def members(self, j, values):
        return np.asarray(values, dtype=np.float64)[self.assignments == j]


def kmeans_1d(values, k, rng=None, max_iter=100):
    """
    Lloyd's algorithm on a 1-D sample.

    Centroids start at the (i + 0.5) / k quantiles of the sorted values, so the
    result is deterministic and independent of input order; `rng` (an RngState)
    is accepted but never drawn from. Ties in assignment go to the lower cluster
    index. Centroids stay sorted ascending (1-D Lloyd preserves the order of its
    initialization).
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if k < 1:
        raise DataError("k-means needs k >= 1")
    if values.size < k:
        raise DataError(f"k-means needs at least k={k} values, got {values.size}")

    order = np.argsort(values, kind="stable")
    ordered = values[order]
    centroids = np.quantile(ordered, (np.arange(k) + 0.5) / k)

    assign = None
    iterations = 0
    for iterations in range(1, max_iter + 1):
        new_assign = np.argmin(np.abs(ordered[:, None] - centroids[None, :]), axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = ordered[assign == j]
            if members.size:
                centroids[j] = members.mean()

    assignments = np.empty_like(assign)
    assignments[order] = assign
    return KMeansResult(centroids=centroids, assignments=assignments, iterations=iterations)


# --- SIMILARITY ---


def cosine_similarity(a, b):
    a = torch.as_tensor(a).reshape(-1).to(torch.float64)
    b = torch.as_tensor(b).reshape(-1).to(torch.float64)
    if a.numel() != b.numel():
        raise DimensionError(f"cosine of vectors with {a.numel()} and {b.numel()} entries")
    na = torch.linalg.vector_norm(a)
    nb = torch.linalg.vector_norm(b)
    if na == 0 or nb == 0:
        raise UndefinedSimilarityError("cosine similarity of a zero vector")
    value = (torch.dot(a, b) / (na * nb)).item()
    return max(-1.0, min(1.0, value))


# --- DETERMINISM ---


@contextmanager
def seeded_init(state):
    """Run module construction under a seed derived from `state` without touching the global RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(state.torch().initial_seed())
        yield


def configure_threads(threads):
    """threads == 1 gives bit-exact replay; anything else trades it for speed."""
    torch.set_num_threads(int(threads))
    torch.use_deterministic_algorithms(threads == 1)
    return threads == 1


def parameter_hash(params):
    h = hashlib.sha256()
    for name, p in sorted(params.items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
