import numpy as np
import pytest
import torch

from common.errors import DataError
from data_collection.simulation.toy_factory import (
    CLASS_RULES,
    VOCAB,
    ToyDatasetSpec,
    make_clip,
    make_toy_dataset,
    motion_offsets,
    shape_mask,
)
from models.architectures.motion import extract_motion_field


def _spec(**overrides):
    base = dict(num_classes=3, train_counts=[6, 2, 3], test_counts=[2, 2, 2], image_size=32, num_frames=4)
    base.update(overrides)
    return ToyDatasetSpec(**base)


def test_dataset_is_deterministic():
    a = make_toy_dataset(_spec())
    b = make_toy_dataset(_spec())
    assert [c.clip_id for c in a.train] == [c.clip_id for c in b.train]
    for x, y in zip(a.train + a.test, b.train + b.test):
        assert torch.equal(x.pixels, y.pixels)
        assert x.tokens == y.tokens


def test_seed_changes_clips():
    a = make_clip(_spec(seed=0), "train", 0, 0)
    b = make_clip(_spec(seed=1), "train", 0, 0)
    assert not torch.equal(a.pixels, b.pixels)


def test_splits_do_not_share_clips():
    spec = _spec()
    assert not torch.equal(make_clip(spec, "train", 1, 0).pixels, make_clip(spec, "test", 1, 0).pixels)


def test_imbalanced_counts_are_exact():
    dataset = make_toy_dataset(_spec())
    assert dataset.class_counts("train") == {0: 6, 1: 2, 2: 3}
    assert dataset.class_counts("test") == {0: 2, 1: 2, 2: 2}
    assert len({c.clip_id for c in dataset.train + dataset.test}) == 17


def test_clip_layout_and_tokens():
    clip = make_clip(_spec(channels=2), "train", 2, 1)
    assert clip.pixels.shape == (4, 2, 32, 32)
    assert clip.pixels.dtype == torch.float32
    assert 0.0 <= clip.pixels.min() and clip.pixels.max() <= 1.0
    assert clip.source == "real" and clip.clip_id == "real_train_c2_0001"
    words = [VOCAB[t] for t in clip.tokens]
    assert words[0] == CLASS_RULES[2][0] and words[-1] == CLASS_RULES[2][1]


def test_motion_laws():
    assert motion_offsets("right", 3) == [(0, 0), (0, 2), (0, 4)]
    assert motion_offsets("up", 2) == [(0, 0), (-2, 0)]
    assert [dx for _, dx in motion_offsets("oscillate", 9)] == [0, 2, 4, 2, 0, -2, -4, -2, 0]
    with pytest.raises(DataError):
        motion_offsets("sideways", 2)


@pytest.mark.parametrize("class_id, expected", [(1, (2, 0)), (3, (-2, 0))])
def test_block_matching_recovers_shape_motion(class_id, expected):
    spec = _spec(num_classes=4, train_counts=[1, 1, 1, 1], test_counts=[1, 1, 1, 1])
    block = 4
    checked = 0
    for index in range(3):
        clip = make_clip(spec, "train", class_id, index)
        fields = extract_motion_field(clip, block=block, radius=3)
        r = clip.meta["radius"]
        for f, field in enumerate(fields):
            mask = shape_mask(clip.meta["shape"], clip.meta["centers"][f], r, spec.image_size)
            for by in range(0, spec.image_size, block):
                for bx in range(0, spec.image_size, block):
                    if mask[by : by + block, bx : bx + block].all():
                        assert (field.dy[by, bx], field.dx[by, bx]) == expected
                        checked += 1
    assert checked > 0


def test_trajectory_stays_inside_frame():
    clip = make_clip(_spec(), "train", 0, 3)
    cy, cx = clip.meta["centers"][-1]
    r = clip.meta["radius"]
    assert r + 1 <= cx <= 32 - r - 2 and r + 1 <= cy <= 32 - r - 2
    assert np.array(clip.meta["centers"])[:, 1].tolist() == [clip.meta["centers"][0][1] + 2 * f for f in range(4)]


def test_spec_errors():
    with pytest.raises(DataError):
        make_toy_dataset(_spec(num_classes=5, train_counts=[1] * 5, test_counts=[1] * 5))
    with pytest.raises(DataError):
        make_toy_dataset(_spec(train_counts=[1, 1]))
    with pytest.raises(DataError):
        make_toy_dataset(_spec(test_counts=[1, 0, 1]))
    with pytest.raises(DataError):
        make_toy_dataset(_spec(image_size=8))
    with pytest.raises(DataError):
        make_clip(_spec(image_size=16, num_frames=8), "train", 0, 0)


def test_from_config(tiny_cfg):
    spec = ToyDatasetSpec.from_config(tiny_cfg, seed=5)
    assert spec.seed == 5
    assert spec.train_counts == [4, 2, 2] and spec.image_size == 16
