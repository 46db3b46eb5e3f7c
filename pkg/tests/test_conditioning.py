import numpy as np
import pytest
import torch
import torch.nn as nn

from common.config import ConditioningConfig
from common.errors import DataError, DimensionError
from data_collection.simulation.toy_factory import ToyDatasetSpec, make_clip
from models.architectures.conditioning import (
    ClassLabelEncoder,
    ConditionsBank,
    DecoupledCrossAttention,
    ImagePriorEncoder,
    MotionEncoder,
    TextEncoder,
    bank_from_clip,
    collate_banks,
    decoupled_cross_attention,
    drop_conditions,
    encode_class_label,
    encode_image_prior,
    encode_motion,
    encode_text,
)
from models.numerics import scaled_dot_product_attention


def _bank(num_frames=4, size=8):
    return ConditionsBank(
        class_label=1,
        text=[1, 2, 3],
        image_prior=torch.rand(1, size, size),
        motion_fields=torch.zeros(num_frames - 1, 2, size, size),
    )


# --- class label ---


def test_null_label_is_additive_identity():
    enc = ClassLabelEncoder(3, 8)
    t_emb = torch.randn(8)
    assert torch.equal(encode_class_label(enc, enc.null_id, t_emb), t_emb)


def test_class_label_table_lookup():
    enc = ClassLabelEncoder(3, 5)
    with torch.no_grad():
        enc.embedding.weight.copy_(torch.eye(4, 5) * 0.1)
    out = encode_class_label(enc, 2, torch.zeros(5))
    assert out.tolist() == pytest.approx([0.0, 0.0, 0.1, 0.0, 0.0])


def test_class_labels_differ():
    enc = ClassLabelEncoder(3, 8)
    t_emb = torch.zeros(8)
    assert not torch.equal(encode_class_label(enc, 0, t_emb), encode_class_label(enc, 1, t_emb))


def test_class_label_out_of_range():
    enc = ClassLabelEncoder(3, 4)
    with pytest.raises(DataError):
        encode_class_label(enc, 4, torch.zeros(4))


# --- text ---


def test_empty_text_is_null_embedding():
    enc = TextEncoder(10, 6)
    out = enc.encode([])
    assert out.shape == (1, 6)
    assert torch.equal(out, enc.null)


def test_repeated_token_differs_by_position_only():
    enc = TextEncoder(10, 6)
    out = enc.encode([4, 4])
    assert torch.allclose(out[1] - out[0], enc.position[1] - enc.position[0], atol=1e-6)


def test_text_lookup_oracle():
    enc = TextEncoder(10, 2, max_len=4)
    with torch.no_grad():
        enc.token.weight.copy_(torch.arange(20.0).reshape(10, 2))
        enc.position.copy_(torch.tensor([[100.0, 0.0], [0.0, 100.0], [0.0, 0.0], [0.0, 0.0]]))
    out = encode_text(enc, [3, 7])
    assert out.tolist() == [[106.0, 7.0], [14.0, 115.0]]


def test_text_errors_and_padding():
    enc = TextEncoder(10, 4, max_len=3)
    with pytest.raises(DataError):
        enc.encode([10])
    with pytest.raises(DataError):
        enc.encode([1, 2, 3, 4])
    out, mask = enc([[1, 2], []])
    assert out.shape == (2, 2, 4)
    assert mask.tolist() == [[True, True], [True, False]]


# --- image prior ---


def test_zero_frame_zero_bias_gives_zero_tokens():
    enc = ImagePriorEncoder(1, 6, hidden=4)
    for layer in enc.net:
        if isinstance(layer, nn.Conv2d):
            nn.init.zeros_(layer.bias)
    tokens = enc(torch.zeros(1, 1, 8, 8))
    assert tokens.shape == (1, 1, 6)
    assert not tokens.any()


def test_delta_kernel_encoder_samples_with_stride():
    enc = ImagePriorEncoder(1, 1, hidden=1)
    for layer in enc.net:
        if isinstance(layer, nn.Conv2d):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)
            with torch.no_grad():
                layer.weight[0, 0, 1, 1] = 1.0
    frame = torch.rand(1, 8, 8)
    tokens = encode_image_prior(enc, frame)
    assert tokens.shape == (1, 1)
    assert tokens[0, 0].item() == pytest.approx(frame[0, 0, 0].item())


def test_image_prior_shape_checked():
    enc = ImagePriorEncoder(1, 4, image_size=8)
    with pytest.raises(DataError):
        enc(torch.zeros(1, 2, 8, 8))
    with pytest.raises(DataError):
        enc(torch.zeros(1, 1, 16, 16))


# --- decoupled cross-attention ---


def test_null_image_stream_reduces_to_text_attention():
    dca = DecoupledCrossAttention(4, 6)
    z, f_t, f_i = torch.randn(5, 4), torch.randn(3, 6), torch.zeros(2, 6)
    out = decoupled_cross_attention(dca, z, f_t, f_i)
    text_only = scaled_dot_product_attention(dca.to_q_t(z), dca.to_k_t(f_t), dca.to_v_t(f_t))
    assert (out - text_only).abs().max() < 1e-6


def test_both_streams_null_gives_zero():
    dca = DecoupledCrossAttention(4, 6)
    nn.init.zeros_(dca.to_v_t.weight)
    out = decoupled_cross_attention(dca, torch.randn(5, 4), torch.randn(1, 6), torch.randn(1, 6))
    assert not out.any()


def test_single_token_streams_sum_their_values():
    dca = DecoupledCrossAttention(2, 2)
    with torch.no_grad():
        for layer in (dca.to_q_t, dca.to_k_t, dca.to_v_t, dca.to_q_i, dca.to_k_i, dca.to_v_i):
            layer.weight.copy_(torch.eye(2))
        dca.to_v_i.weight.mul_(2.0)
    f_t, f_i = torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 1.0]])
    out = decoupled_cross_attention(dca, torch.randn(3, 2), f_t, f_i)
    assert torch.allclose(out, torch.tensor([[1.0, 2.0]]).expand(3, 2))


def test_cross_attention_dimension_mismatch():
    dca = DecoupledCrossAttention(4, 6)
    with pytest.raises(DimensionError):
        decoupled_cross_attention(dca, torch.randn(2, 4), torch.randn(1, 5), torch.randn(1, 6))


# --- motion encoder ---


def test_motion_features_length_and_zero_last_slot():
    enc = MotionEncoder(3, rate=4, hidden=4)
    fields = torch.randn(3, 2, 16, 16)
    feats = encode_motion(enc, fields)
    assert feats.shape == (4, 3, 4, 4)
    assert not feats[-1].any()


def test_zero_fields_zero_bias_gives_zero_features():
    enc = MotionEncoder(2, rate=2, hidden=4)
    for layer in enc.net:
        if isinstance(layer, nn.Conv2d):
            nn.init.zeros_(layer.bias)
    assert not encode_motion(enc, torch.zeros(2, 2, 8, 8)).any()


def test_motion_encoder_full_rate_downsamples_by_eight():
    feats = encode_motion(MotionEncoder(4, rate=8, hidden=4), torch.zeros(1, 2, 64, 64))
    assert feats.shape == (2, 4, 8, 8)


# --- condition dropping ---


def test_drop_nothing_and_everything():
    bank = _bank()
    rng = np.random.default_rng(0)
    keep = ConditioningConfig(p_drop_class=0, p_drop_text=0, p_drop_image=0, p_drop_motion=0, p_drop_all=0)
    kept = drop_conditions(bank, rng, keep)
    assert kept.present() == ["class", "text", "image", "motion"]
    assert kept.image_prior is bank.image_prior
    drop = ConditioningConfig(p_drop_class=1, p_drop_text=1, p_drop_image=1, p_drop_motion=1, p_drop_all=0)
    assert drop_conditions(bank, rng, drop).is_null


def test_drop_mask_replays_with_seed():
    bank = _bank()
    cfg = ConditioningConfig(p_drop_class=0.5, p_drop_text=0.5, p_drop_image=0.5, p_drop_motion=0.5, p_drop_all=0)
    rng_a, rng_b = np.random.default_rng(3), np.random.default_rng(3)
    a = [drop_conditions(bank, rng_a, cfg).present() for _ in range(8)]
    b = [drop_conditions(bank, rng_b, cfg).present() for _ in range(8)]
    assert a == b


def test_drop_rejects_bad_probability():
    with pytest.raises(DataError):
        drop_conditions(_bank(), np.random.default_rng(0), ConditioningConfig(p_drop_all=0, p_drop_text=1.5))
    # checked even when the drop-all draw would short-circuit
    with pytest.raises(DataError):
        drop_conditions(_bank(), np.random.default_rng(0), ConditioningConfig(p_drop_all=1.0, p_drop_text=1.5))
    with pytest.raises(DataError):
        drop_conditions(_bank(), np.random.default_rng(0), ConditioningConfig(p_drop_all=-0.1))


def test_drop_leaves_clip_payload_alone():
    clip = make_clip(ToyDatasetSpec(image_size=16, num_frames=4), "train", 0, 0)
    before = clip.pixels.clone()
    bank = bank_from_clip(clip)
    drop_conditions(bank, np.random.default_rng(0), ConditioningConfig(p_drop_all=1.0))
    assert torch.equal(clip.pixels, before)
    assert bank.class_label == 0 and torch.equal(bank.image_prior, before[0])


# --- banks ---


def test_restrict_and_collate():
    bank = _bank()
    only_class = bank.restrict(["class"])
    assert only_class.present() == ["class"]
    with pytest.raises(DataError):
        bank.restrict(["colour"])

    batch = collate_banks([bank, ConditionsBank.null()], num_frames=4, num_classes=3, channels=1, image_size=8)
    assert batch.labels.tolist() == [1, 3]
    assert batch.text == [[1, 2, 3], []]
    assert batch.prior_mask.tolist() == [True, False]
    assert batch.motion.shape == (2, 3, 2, 8, 8)
    null = batch.null_like(3)
    assert null.labels.tolist() == [3, 3] and not null.prior_mask.any()


def test_motion_fields_must_match_clip_length():
    with pytest.raises(DataError):
        _bank(num_frames=4).check(5)
