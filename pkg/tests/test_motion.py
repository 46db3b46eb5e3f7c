import numpy as np
import pytest
import torch

from common.errors import DataError
from models.architectures.motion import candidate_offsets, extract_motion_field, stack_fields, unstack_fields


def _textured(seed=0, size=16):
    return torch.from_numpy(np.random.default_rng(seed).random((1, size, size)).astype(np.float32))


def test_static_clip_has_zero_motion():
    frame = _textured()
    fields = extract_motion_field(torch.stack([frame, frame, frame]), block=4, radius=3)
    assert len(fields) == 2
    for f in fields:
        assert not f.dy.any() and not f.dx.any()


@pytest.mark.parametrize("dy, dx", [(0, 2), (2, 0), (-1, 3), (0, -2)])
def test_translation_recovered_on_interior_blocks(dy, dx):
    size, block = 16, 4
    base = _textured(1, size + 8)
    cur = base[:, 4 : 4 + size, 4 : 4 + size]
    nxt = base[:, 4 - dy : 4 - dy + size, 4 - dx : 4 - dx + size]
    (field,) = extract_motion_field(torch.stack([cur, nxt]), block=block, radius=3)
    # blocks whose displaced footprint stays inside the frame
    rows = [r for r in range(0, size, block) if 0 <= r + dy and r + dy + block <= size]
    cols = [c for c in range(0, size, block) if 0 <= c + dx and c + dx + block <= size]
    for r in rows:
        for c in cols:
            assert field.dy[r, c] == dy and field.dx[r, c] == dx
            assert np.all(field.dy[r : r + block, c : c + block] == dy)


def test_noise_fields_bounded_by_radius():
    rng = np.random.default_rng(2)
    clip = torch.from_numpy(rng.random((4, 1, 16, 16)).astype(np.float32))
    fields = extract_motion_field(clip, block=4, radius=2)
    for f in fields:
        assert f.shape == (16, 16)
        assert np.abs(f.dy).max() <= 2 and np.abs(f.dx).max() <= 2


def test_tie_break_prefers_small_displacement():
    offsets = candidate_offsets(1)
    assert offsets[0] == (0, 0)
    assert offsets[1:5] == [(-1, 0), (0, -1), (0, 1), (1, 0)]
    flat = torch.full((2, 1, 8, 8), 0.5)
    (field,) = extract_motion_field(flat, block=4, radius=2)
    assert not field.dy.any() and not field.dx.any()


def test_input_errors():
    with pytest.raises(DataError):
        extract_motion_field(torch.zeros(1, 1, 8, 8))
    with pytest.raises(DataError):
        extract_motion_field(torch.zeros(2, 1, 10, 10), block=4)
    with pytest.raises(DataError):
        extract_motion_field(torch.zeros(2, 1, 8, 8), radius=-1)


def test_stack_layout():
    clip = torch.stack([_textured(3)] * 3)
    fields = extract_motion_field(clip, block=4, radius=1)
    stacked = stack_fields(fields)
    assert stacked.shape == (2, 2, 16, 16)
    assert stacked.dtype == torch.float32
    assert np.array_equal(unstack_fields(stacked)[1].dx, fields[1].dx)
