import pytest
import torch

from common.errors import DataError, UndefinedSimilarityError
from data_collection.simulation.toy_factory import SequenceClip
from validation.metrics import (
    LatentCache,
    compute_vae_seq,
    dynamic_smoothness,
    inter_clip_similarity,
    theta_from_latents,
    vae_seq_from_latents,
)


class _PixelEncoder:
    """Latents are the pixels themselves."""

    def encode(self, pixels):
        return pixels.clone()


def _clip(pixels, clip_id="c"):
    return SequenceClip(pixels=pixels, class_id=0, clip_id=clip_id)


def test_static_clip_has_full_vae_seq():
    frame = torch.rand(1, 8, 8) + 0.1
    clip = _clip(frame.clamp(max=1.0).expand(5, 1, 8, 8).clone())
    assert compute_vae_seq(clip, _PixelEncoder()) == pytest.approx(100.0)


def test_vae_seq_of_orthogonal_frames_is_zero():
    latents = torch.eye(3, dtype=torch.float64)
    assert vae_seq_from_latents(latents) == pytest.approx(0.0)


def test_vae_seq_averages_consecutive_pairs():
    latents = torch.tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    assert vae_seq_from_latents(latents) == pytest.approx(50.0)


def test_linear_clip_is_perfectly_smooth():
    pixels = torch.stack([torch.full((1, 4, 4), 0.125 * f) for f in range(6)])
    assert dynamic_smoothness(_clip(pixels)) == pytest.approx(100.0, abs=1e-6)


def test_alternating_clip_smoothness():
    pixels = torch.stack([torch.full((1, 4, 4), 0.5 * (f % 2)) for f in range(6)])
    assert dynamic_smoothness(_clip(pixels)) == pytest.approx(50.0, abs=1e-6)


def test_theta_self_similarity_and_symmetry():
    g = torch.Generator().manual_seed(0)
    for _ in range(50):
        a = torch.randn(4, 12, generator=g, dtype=torch.float64)
        b = torch.randn(4, 12, generator=g, dtype=torch.float64)
        assert theta_from_latents(a, a) == pytest.approx(100.0)
        assert theta_from_latents(a, b) == pytest.approx(theta_from_latents(b, a), abs=1e-12)
        assert -100.0 <= theta_from_latents(a, b) <= 100.0


def test_inter_clip_similarity_through_encoder():
    pixels = torch.rand(3, 1, 4, 4) * 0.5 + 0.25
    assert inter_clip_similarity(_clip(pixels, "a"), _clip(pixels.clone(), "b"), _PixelEncoder()) == pytest.approx(100.0)


def test_metrics_reject_short_or_mismatched_clips():
    ae = _PixelEncoder()
    with pytest.raises(DataError):
        compute_vae_seq(_clip(torch.rand(1, 1, 4, 4)), ae)
    with pytest.raises(DataError):
        dynamic_smoothness(_clip(torch.rand(2, 1, 4, 4)))
    with pytest.raises(DataError):
        inter_clip_similarity(_clip(torch.rand(3, 1, 4, 4)), _clip(torch.rand(4, 1, 4, 4)), ae)


def test_blank_frame_has_undefined_similarity():
    pixels = torch.zeros(3, 1, 4, 4)
    with pytest.raises(UndefinedSimilarityError):
        compute_vae_seq(_clip(pixels), _PixelEncoder())


def test_latent_cache_encodes_each_clip_once():
    calls = []

    class _Counting(_PixelEncoder):
        def encode(self, pixels):
            calls.append(1)
            return super().encode(pixels)

    cache = LatentCache(_Counting())
    a = _clip(torch.rand(3, 1, 4, 4) * 0.5 + 0.25, "a")
    b = _clip(torch.rand(3, 1, 4, 4) * 0.5 + 0.25, "b")
    cache.vae_seq(a)
    cache.theta(a, b)
    cache.theta(b, a)
    assert len(calls) == 2
    assert cache.theta(a, a) == pytest.approx(100.0)
