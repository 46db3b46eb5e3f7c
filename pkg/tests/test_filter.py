import numpy as np
import polars as pl
import pytest
import torch

from common.config import FilterConfig
from common.errors import ConfigError, DataError
from data_collection.simulation.toy_factory import SequenceClip
from validation.filter import (
    SyntheticGroup,
    flatten_groups,
    run_filter_pipeline,
    stage1_semantic_filter,
    stage2_inner_sequence_filter,
    stage2_thresholds,
    stage3_inter_sequence_filter,
)


def _clip(clip_id, class_id=0):
    return SequenceClip(pixels=torch.zeros(2, 1, 2, 2), class_id=class_id, source="synthetic", clip_id=clip_id)


def _group(group_id, clip_ids, class_id=0):
    return SyntheticGroup(group_id=group_id, bank=None, clips=[_clip(c, class_id) for c in clip_ids], class_label=class_id)


def _ids(groups):
    return [clip.clip_id for clip in flatten_groups(groups)]


def _pinned_theta(table, default=50.0):
    def theta(a, b):
        return table.get(frozenset((a.clip_id, b.clip_id)), default)

    return theta


# --- stage 1 ---


def test_stage1_drops_clips_above_group_mean():
    group = _group(0, ["a", "b", "c"])
    losses = {"a": 0.2, "b": 0.4, "c": 0.9}
    kept, frag = stage1_semantic_filter([group], lambda clip, _: losses[clip.clip_id])
    assert _ids(kept) == ["a", "b"]
    assert frag["group_thresholds"][0] == pytest.approx(0.5)


def test_stage1_keeps_equal_losses_and_skips_empty_groups():
    groups = [_group(0, ["a", "b"]), _group(1, [])]
    kept, frag = stage1_semantic_filter(groups, lambda clip, _: 0.3)
    assert _ids(kept) == ["a", "b"]
    assert len(kept) == 1
    assert frag["notices"]


def test_stage1_passes_group_class_to_scorer():
    seen = []
    stage1_semantic_filter([_group(0, ["a"], class_id=2)], lambda clip, c: seen.append(c) or 0.0)
    assert seen == [2]


# --- stage 2 ---


def test_stage2_thresholds_from_middle_clusters():
    values = [10, 12, 40, 45, 60, 61, 90, 95]
    t_l, t_h, result = stage2_thresholds(values, 4)
    assert (t_l, t_h) == (40.0, 61.0)
    assert list(result.centroids) == pytest.approx([11.0, 42.5, 60.5, 92.5])


def test_stage2_keeps_closed_range():
    values = {"a": 10.0, "b": 40.0, "c": 50.0, "d": 61.0, "e": 90.0, "f": 12.0, "g": 45.0, "h": 95.0}
    group = _group(0, list(values))
    kept, frag = stage2_inner_sequence_filter([group], values, 4)
    assert _ids(kept) == ["b", "c", "d", "g"]
    assert (frag["t_l"], frag["t_h"]) == (40.0, 61.0)


def test_stage2_configuration_errors():
    with pytest.raises(ConfigError):
        stage2_thresholds([1, 2, 3, 4, 5], 2)
    with pytest.raises(ConfigError):
        stage2_thresholds([1, 2, 3], 4)


# --- stage 3 ---


def test_stage3_greedy_with_group_first_rule():
    groups = [_group(0, ["a0", "a1"]), _group(1, ["b0", "b1"])]
    theta = _pinned_theta({frozenset(("a1", "a0")): 99.0, frozenset(("b0", "a0")): 99.0})
    kept, frag = stage3_inter_sequence_filter(groups, theta, 98.0)
    assert _ids(kept) == ["a0", "b0", "b1"]
    assert [d[:2] for d in frag["duplicate_firsts"]] == [("b0", "a0")]


def test_stage3_threshold_is_inclusive():
    theta = _pinned_theta({frozenset(("x1", "x0")): 98.0})
    kept, _ = stage3_inter_sequence_filter([_group(0, ["x0", "x1"])], theta, 98.0)
    assert _ids(kept) == ["x0"]


# --- pipeline ---

LOSSES = [0.1, 0.2, 0.3, 1.0]
VAE_SEQ = {
    0: [10.0, 40.0, 59.0, 90.0],
    1: [41.0, 60.0, 95.0, 92.0],
    2: [45.0, 61.0, 11.0, 12.0],
}


def _pinned_fixture():
    groups = [_group(g, [f"g{g}_{j}" for j in range(4)]) for g in range(3)]
    losses = {f"g{g}_{j}": LOSSES[j] for g in range(3) for j in range(4)}
    vae = {f"g{g}_{j}": VAE_SEQ[g][j] for g in range(3) for j in range(4)}
    theta = _pinned_theta({frozenset(("g0_2", "g0_1")): 99.0})
    return groups, losses, vae, theta


def test_pipeline_on_pinned_fixture():
    groups, losses, vae, theta = _pinned_fixture()
    out, report = run_filter_pipeline(
        groups,
        loss_fn=lambda clip, _: losses[clip.clip_id],
        vae_seq_fn=lambda clip: vae[clip.clip_id],
        theta_fn=theta,
    )
    assert report.counts == {"n": 3, "N": 12, "n1": 3, "N1": 9, "n2": 3, "N2": 6, "N3": 5}
    assert report.dropped["stage1"] == ["g0_3", "g1_3", "g2_3"]
    assert (report.t_l, report.t_h) == (40.0, 61.0)
    assert _ids(out) == ["g0_1", "g1_0", "g1_1", "g2_0", "g2_1"]
    assert report.dropped["stage3"] == ["g0_2"]
    assert len(report.vae_seq) == 12


def test_pipeline_report_saves(tmp_path):
    groups, losses, vae, theta = _pinned_fixture()
    _, report = run_filter_pipeline(
        groups,
        loss_fn=lambda clip, _: losses[clip.clip_id],
        vae_seq_fn=lambda clip: vae[clip.clip_id],
        theta_fn=theta,
    )
    report.save(tmp_path)
    decisions = pl.read_parquet(tmp_path / "filter_decisions.parquet")
    assert decisions.height == 12
    assert decisions.filter(pl.col("kept_stage3")).height == 5
    assert (tmp_path / "filter_report.json").exists()
    assert "Stage 3" in (tmp_path / "filter_report.txt").read_text()


def test_disabled_stages_are_identity():
    groups, _, _, _ = _pinned_fixture()
    cfg = FilterConfig(semantic=False, inner_sequence=False, inter_sequence=False)
    out, report = run_filter_pipeline(groups, cfg=cfg)
    assert _ids(out) == _ids(groups)
    assert report.N == report.N1 == report.N2 == report.N3 == 12


def test_pipeline_needs_scorers():
    groups, _, _, _ = _pinned_fixture()
    with pytest.raises(DataError):
        run_filter_pipeline(groups)
    with pytest.raises(DataError):
        run_filter_pipeline(groups, cfg=FilterConfig(inner_sequence=False, inter_sequence=False))


def test_small_sets_disable_stage2_with_notice():
    groups = [_group(0, ["a", "b"])]
    _, report = run_filter_pipeline(
        groups, loss_fn=lambda clip, _: 0.0, vae_seq_fn=lambda clip: 50.0, theta_fn=_pinned_theta({})
    )
    assert report.N2 == report.N1 == 2
    assert any("stage 2 disabled" in n for n in report.notices)


def test_counts_are_monotone_on_random_fixtures():
    rng = np.random.default_rng(0)
    for trial in range(100):
        sizes = rng.integers(1, 5, size=rng.integers(2, 6))
        groups = [_group(g, [f"t{trial}_{g}_{j}" for j in range(n)]) for g, n in enumerate(sizes)]
        clips = flatten_groups(groups)
        losses = {c.clip_id: float(rng.uniform(0, 3)) for c in clips}
        vae = {c.clip_id: float(rng.uniform(0, 100)) for c in clips}
        theta_table = {}

        def theta(a, b):
            key = frozenset((a.clip_id, b.clip_id))
            if key not in theta_table:
                theta_table[key] = float(rng.uniform(90, 100))
            return theta_table[key]

        out, report = run_filter_pipeline(
            groups, loss_fn=lambda c, _: losses[c.clip_id], vae_seq_fn=lambda c: vae[c.clip_id], theta_fn=theta
        )
        assert report.N >= report.N1 >= report.N2 >= report.N3
        assert report.n1 == len(groups)
        assert set(report.kept["stage3"]) <= set(report.kept["stage2"]) <= set(report.kept["stage1"])
        assert _ids(out) == report.kept["stage3"]


def test_group_rejects_foreign_class():
    with pytest.raises(DataError):
        SyntheticGroup(group_id=0, bank=None, clips=[_clip("a", class_id=1)], class_label=0)
