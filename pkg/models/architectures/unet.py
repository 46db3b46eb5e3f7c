"""
Conditional latent UNet in image mode and, after inflation, sequence mode.

Frames are always folded into the batch axis for convolutions:
(B, F, c, h, w) -> (B*F, c, h, w). In image mode every frame is denoised
independently with 2-D kernels; inflation reinterprets each kernel as 1x3x3,
inserts sequential attention (SA) and the SAM block into every attention
block, and attaches the motion encoder. All inserted output paths start at
zero, so the inflated model initially reproduces the image model per frame.
"""

import copy
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from common.errors import DimensionError
from data_collection.simulation.toy_factory import VOCAB
from models.architectures.conditioning import ConditionEncoder, DecoupledCrossAttention, MotionEncoder
from models.architectures.sam import KeyFrameAttention, SAMBlock, SequentialAttention, pathways_for_batch
from models.numerics import conv_pseudo3d, scaled_dot_product_attention


def _groups(channels, preferred):
    g = min(preferred, channels)
    while channels % g:
        g -= 1
    return g


def timestep_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class InflatableConv(nn.Module):
    """2-D convolution whose kernel can be reinterpreted as a 1 x k x k pseudo-3D kernel."""

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=1, bias=True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_ch, in_ch, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch)) if bias else None
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        if self.bias is not None:
            bound = 1.0 / math.sqrt(in_ch * kernel * kernel)
            nn.init.uniform_(self.bias, -bound, bound)
        self.stride = stride
        self.padding = padding

    @property
    def inflated(self):
        return self.weight.dim() == 5

    def inflate(self):
        if not self.inflated:
            self.weight = nn.Parameter(self.weight.data.unsqueeze(2).clone())

    def forward(self, x, num_frames=1):
        if not self.inflated:
            return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)
        bf, c, h, w = x.shape
        seq = x.reshape(bf // num_frames, num_frames, c, h, w)
        out = conv_pseudo3d(seq, self.weight, self.bias, self.stride, self.padding)
        return out.reshape(bf, *out.shape[2:])


class ResBlock(nn.Module):
    """Spatial conv path; the timestep + class embedding is added after the first conv."""

    def __init__(self, in_ch, out_ch, emb_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch, groups), in_ch)
        self.conv1 = InflatableConv(in_ch, out_ch)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch, groups), out_ch)
        self.conv2 = InflatableConv(out_ch, out_ch)
        self.skip = InflatableConv(in_ch, out_ch, kernel=1, padding=0) if in_ch != out_ch else None

    def forward(self, x, emb, num_frames=1):
        h = self.conv1(F.silu(self.norm1(x)), num_frames)
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)), num_frames)
        skip = x if self.skip is None else self.skip(x, num_frames)
        return skip + h


class SpatialSelfAttention(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, tokens):
        h = self.norm(tokens)
        return tokens + self.to_out(scaled_dot_product_attention(self.to_q(h), self.to_k(h), self.to_v(h)))


class AttnBlock(nn.Module):
    """
    spatial self-attn -> [SAM] -> decoupled cross-attn -> [SA] -> feed-forward,
    each a residual update on (B*F, h*w, C) tokens. Bracketed layers exist only
    after inflation.
    """

    def __init__(self, dim, context_dim):
        super().__init__()
        self.self_attn = SpatialSelfAttention(dim)
        self.cross_norm = nn.LayerNorm(dim)
        self.cross = DecoupledCrossAttention(dim, context_dim)
        self.ff_norm = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        self.sam = None
        self.sa = None

    def forward(self, x, cond, num_frames=1, pathways=None):
        bf, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        tokens = self.self_attn(tokens)
        if self.sam is not None:
            seq = tokens.reshape(bf // num_frames, num_frames, h * w, c)
            tokens = self.sam(seq, pathways).reshape(bf, h * w, c)
        f_t = cond.text.repeat_interleave(num_frames, dim=0)
        t_mask = cond.text_mask.repeat_interleave(num_frames, dim=0)
        f_i = cond.image.repeat_interleave(num_frames, dim=0)
        tokens = tokens + self.cross(self.cross_norm(tokens), f_t, f_i, t_mask)
        if self.sa is not None:
            seq = tokens.reshape(bf // num_frames, num_frames, h * w, c)
            tokens = self.sa(seq).reshape(bf, h * w, c)
        tokens = tokens + self.ff(self.ff_norm(tokens))
        return tokens.transpose(1, 2).reshape(bf, c, h, w)


class Downsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = InflatableConv(ch, ch, stride=2)

    def forward(self, x, num_frames=1):
        return self.conv(x, num_frames)


class Upsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = InflatableConv(ch, ch)

    def forward(self, x, num_frames=1):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"), num_frames)


class DenoiserModel(nn.Module):
    """
    eps_theta(z_t, conditions, t). Input and output are (B, F, c, h, w) latents.
    """

    def __init__(self, cfg):
        super().__init__()
        ds, un = cfg.dataset, cfg.unet
        self.num_classes = ds.num_classes
        self.image_size = ds.image_size
        self.latent_channels = cfg.autoencoder.latent_channels
        self.latent_size = ds.image_size // cfg.autoencoder.rate
        self.emb_dim = un.emb_dim
        self.mode = "image"
        self.variant = None
        self.resample_pathways = cfg.sam.resample_per_forward

        self.time_mlp = nn.Sequential(nn.Linear(un.emb_dim, un.emb_dim), nn.SiLU(), nn.Linear(un.emb_dim, un.emb_dim))
        self.conditions = ConditionEncoder(
            ds.num_classes, len(VOCAB), ds.channels, ds.image_size, un.emb_dim, un.context_dim,
            cfg.conditioning.text_max_len,
        )
        self._motion_cfg = (
            cfg.conditioning.motion_channels,
            cfg.autoencoder.rate,
            float(cfg.conditioning.motion_radius),
        )

        chans = list(un.channels)
        self.conv_in = InflatableConv(self.latent_channels, chans[0])
        self.conv_in_motion = None

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        prev = chans[0]
        for i, ch in enumerate(chans):
            self.down_res.append(ResBlock(prev, ch, un.emb_dim, un.groups))
            self.down_attn.append(AttnBlock(ch, un.context_dim))
            self.downsamplers.append(Downsample(ch) if i < len(chans) - 1 else nn.Identity())
            prev = ch

        self.mid1 = ResBlock(prev, prev, un.emb_dim, un.groups)
        self.mid2 = ResBlock(prev, prev, un.emb_dim, un.groups)

        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for i in reversed(range(len(chans))):
            ch = chans[i]
            self.up_res.append(ResBlock(prev + ch, ch, un.emb_dim, un.groups))
            self.up_attn.append(AttnBlock(ch, un.context_dim))
            self.upsamplers.append(Upsample(ch) if i > 0 else nn.Identity())
            prev = ch

        self.norm_out = nn.GroupNorm(_groups(chans[0], un.groups), chans[0])
        self.conv_out = InflatableConv(chans[0], self.latent_channels)

    @property
    def null_label(self):
        return self.num_classes

    def attn_blocks(self):
        return list(self.down_attn) + list(self.up_attn)

    def _level_pathways(self, cond, res, pathway_seed):
        if self.mode != "sequence" or self.variant != "SKM":
            return None
        m = self.image_size // res
        return torch.as_tensor(pathways_for_batch(cond.fields, m, pathway_seed, res))

    def forward(self, z_t, t, batch, pathway_seed=0):
        if z_t.dim() != 5:
            raise DimensionError(f"expected (B, F, c, h, w) latents, got {tuple(z_t.shape)}")
        b, num_frames, c, h, w = z_t.shape
        if (c, h, w) != (self.latent_channels, self.latent_size, self.latent_size):
            raise DimensionError(f"latents must be {self.latent_channels}x{self.latent_size}x{self.latent_size}")

        if self.mode == "image" and num_frames > 1:
            # image mode: frames are independent samples sharing the clip's conditions
            out = self.forward(
                z_t.reshape(b * num_frames, 1, c, h, w),
                t.repeat_interleave(num_frames),
                batch.repeat_frames(num_frames),
                pathway_seed,
            )
            return out.reshape(b, num_frames, c, h, w)

        t_emb = self.time_mlp(timestep_embedding(t, self.emb_dim))
        cond = self.conditions(batch, t_emb)
        emb = cond.emb.repeat_interleave(num_frames, dim=0)

        x = z_t.reshape(b * num_frames, c, h, w)
        hidden = self.conv_in(x, num_frames)
        if self.conv_in_motion is not None:
            # a separate kernel on the motion channels == one conv on [z, motion] concatenated
            motion = cond.motion.reshape(b * num_frames, *cond.motion.shape[2:])
            hidden = hidden + self.conv_in_motion(motion, num_frames)

        pathways = {}
        skips = []
        for res_block, attn, down in zip(self.down_res, self.down_attn, self.downsamplers):
            hidden = res_block(hidden, emb, num_frames)
            res = hidden.shape[-1]
            if res not in pathways:
                pathways[res] = self._level_pathways(cond, res, pathway_seed)
            hidden = attn(hidden, cond, num_frames, pathways[res])
            skips.append(hidden)
            if isinstance(down, Downsample):
                hidden = down(hidden, num_frames)

        hidden = self.mid1(hidden, emb, num_frames)
        hidden = self.mid2(hidden, emb, num_frames)

        for res_block, attn, up in zip(self.up_res, self.up_attn, self.upsamplers):
            hidden = res_block(torch.cat([hidden, skips.pop()], dim=1), emb, num_frames)
            hidden = attn(hidden, cond, num_frames, pathways[hidden.shape[-1]])
            if isinstance(up, Upsample):
                hidden = up(hidden, num_frames)

        out = self.conv_out(F.silu(self.norm_out(hidden)), num_frames)
        return out.reshape(b, num_frames, c, h, w)


def inflate_2d_to_3d(image_model, variant="SKM"):
    """
    Deep copy of an image-mode denoiser turned into a sequence denoiser.

    Variant S inserts SA; SK adds key-frame attention; SKM adds motion-field
    attention after KA. KA projections start from each block's spatial
    self-attention weights.
    """
    if image_model.mode != "image":
        raise DimensionError("model is already in sequence mode")
    model = copy.deepcopy(image_model)
    for module in model.modules():
        if isinstance(module, InflatableConv):
            module.inflate()
    for block in model.attn_blocks():
        dim = block.self_attn.to_q.in_features
        block.sa = SequentialAttention(dim)
        if variant in ("SK", "SKM"):
            block.sam = SAMBlock(KeyFrameAttention.from_spatial(block.self_attn), use_mfa=variant == "SKM")

    motion_channels, rate, radius = model._motion_cfg
    model.conditions.motion_encoder = MotionEncoder(motion_channels, rate, scale=radius)
    model.conv_in_motion = InflatableConv(motion_channels, model.conv_in.weight.shape[0], bias=False)
    nn.init.zeros_(model.conv_in_motion.weight)
    model.conv_in_motion.inflate()

    model.mode = "sequence"
    model.variant = variant
    return model


# --- PARAMETER GROUPS ---


def _named_group(model, predicate):
    return {name: p for name, p in model.named_parameters() if predicate(name)}


def sa_parameters(model):
    return _named_group(model, lambda n: ".sa." in n)


def sam_parameters(model):
    return _named_group(model, lambda n: ".sam." in n)


def motion_parameters(model):
    return _named_group(model, lambda n: n.startswith("conditions.motion_encoder.") or n.startswith("conv_in_motion."))


def query_parameters(model):
    return _named_group(model, lambda n: ".cross.to_q_" in n)


def finetune_parameter_names(model):
    """SAM, SA, the motion group and the cross-attention query projections."""
    names = set()
    for group in (sa_parameters, sam_parameters, motion_parameters, query_parameters):
        names |= set(group(model))
    return names


def count_parameters(params):
    return sum(p.numel() for p in params)
