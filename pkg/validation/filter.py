"""
Three-stage noisy synthetic data filter.

    Stage 1 (semantic)        per group, drop clips whose classifier loss
                              exceeds the group's mean loss
    Stage 2 (inner-sequence)  keep clips whose VAE-Seq lies between the two
                              middle clusters of a 1-D k-means over all VAE-Seq
                              values
    Stage 3 (inter-sequence)  greedy diversity: a clip joins the kept set only
                              if its similarity to every kept clip is below
                              the threshold; each group's first clip is
                              admitted unconditionally

Every stage takes its scorer as a callable so fixtures can pin losses, VAE-Seq
and similarity values. The report records every threshold and every value
that drove a decision.
"""

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import polars as pl
from tabulate import tabulate

from common.config import FilterConfig
from common.errors import ConfigError, DataError
from common.log import log
from data_collection.processing.clip_store import atomic_write_json
from models.numerics import kmeans_1d
from models.training.classifier import classifier_loss_fn
from validation.metrics import LatentCache


@dataclass
class SyntheticGroup:
    """One conditions bank and the clips sampled under it."""

    group_id: int
    bank: object
    clips: list
    source_clip: Optional[str] = None
    class_label: Optional[int] = None

    def __post_init__(self):
        if self.class_label is None:
            self.class_label = getattr(self.bank, "class_label", None)
        for clip in self.clips:
            if self.class_label is not None and clip.class_id != self.class_label:
                raise DataError(f"clip {clip.clip_id} has class {clip.class_id}, group {self.group_id} is {self.class_label}")

    @property
    def class_id(self):
        return self.class_label

    def with_clips(self, clips):
        return dataclasses.replace(self, clips=list(clips))


def flatten_groups(groups):
    return [clip for group in groups for clip in group.clips]


@dataclass
class FilterReport:
    enabled: dict = field(default_factory=dict)
    n: int = 0
    N: int = 0
    n1: int = 0
    N1: int = 0
    n2: int = 0
    N2: int = 0
    N3: int = 0
    kept: dict = field(default_factory=dict)
    dropped: dict = field(default_factory=dict)
    losses: dict = field(default_factory=dict)
    group_thresholds: dict = field(default_factory=dict)
    t_l: Optional[float] = None
    t_h: Optional[float] = None
    centroids: list = field(default_factory=list)
    vae_seq: dict = field(default_factory=dict)
    theta: list = field(default_factory=list)
    duplicate_firsts: list = field(default_factory=list)
    notices: list = field(default_factory=list)
    clip_groups: dict = field(default_factory=dict)

    @property
    def counts(self):
        return {k: getattr(self, k) for k in ("n", "N", "n1", "N1", "n2", "N2", "N3")}

    def to_dict(self):
        return dataclasses.asdict(self)

    def decisions_table(self):
        """One row per synthetic clip with every value that drove its fate."""
        rows = []
        s1 = set(self.kept.get("stage1", []))
        s2 = set(self.kept.get("stage2", []))
        s3 = set(self.kept.get("stage3", []))
        for clip_id, group_id in self.clip_groups.items():
            rows.append(
                {
                    "clip_id": clip_id,
                    "group_id": group_id,
                    "loss": self.losses.get(clip_id),
                    "group_threshold": self.group_thresholds.get(group_id),
                    "vae_seq": self.vae_seq.get(clip_id),
                    "kept_stage1": clip_id in s1,
                    "kept_stage2": clip_id in s2,
                    "kept_stage3": clip_id in s3,
                }
            )
        schema = {
            "clip_id": pl.Utf8,
            "group_id": pl.Int64,
            "loss": pl.Float64,
            "group_threshold": pl.Float64,
            "vae_seq": pl.Float64,
            "kept_stage1": pl.Boolean,
            "kept_stage2": pl.Boolean,
            "kept_stage3": pl.Boolean,
        }
        return pl.DataFrame(rows, schema=schema)

    def summary(self):
        rows = [
            ["Input", self.n, self.N],
            ["Stage 1 (semantic)", self.n1, self.N1],
            ["Stage 2 (inner-sequence)", self.n2, self.N2],
            ["Stage 3 (inter-sequence)", "-", self.N3],
        ]
        text = tabulate(rows, headers=["Stage", "Groups", "Clips"], tablefmt="grid")
        if self.t_l is not None:
            text += f"\nVAE-Seq range kept: [{self.t_l:.3f}, {self.t_h:.3f}]"
        for notice in self.notices:
            text += f"\n⚠️  {notice}"
        return text

    def save(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        atomic_write_json(out_dir / "filter_report.json", json.loads(json.dumps(self.to_dict(), default=str)))
        self.decisions_table().write_parquet(out_dir / "filter_decisions.parquet")
        with open(out_dir / "filter_report.txt", "w") as f:
            f.write(self.summary() + "\n")


# --- STAGE 1 ---


def stage1_semantic_filter(groups, loss_fn):
    """
    loss_fn(clip, class_id) -> cross-entropy of a classifier trained on real data.
    A clip is dropped iff its loss is strictly above its group's mean loss.
    """
    kept_groups = []
    losses, thresholds, notices = {}, {}, []
    for group in groups:
        if not group.clips:
            notices.append(f"stage 1: group {group.group_id} is empty, skipped")
            continue
        group_losses = [float(loss_fn(clip, group.class_id)) for clip in group.clips]
        threshold = math.fsum(group_losses) / len(group_losses)
        # the mean lies in [min, max]; clamp away rounding so the minimum always survives
        threshold = min(max(threshold, min(group_losses)), max(group_losses))
        thresholds[group.group_id] = threshold
        kept = []
        for clip, loss in zip(group.clips, group_losses):
            losses[clip.clip_id] = loss
            if not loss > threshold:
                kept.append(clip)
        kept_groups.append(group.with_clips(kept))
    return kept_groups, {"losses": losses, "group_thresholds": thresholds, "notices": notices}


# --- STAGE 2 ---


def stage2_thresholds(values, k=4):
    """(t_l, t_h, KMeansResult): smallest value of the second cluster, largest of the second-to-last."""
    values = list(values)
    if k < 3:
        raise ConfigError("stage 2 needs k >= 3 to keep the middle clusters")
    if len(values) < max(k, 4):
        raise ConfigError(f"stage 2 needs at least {max(k, 4)} VAE-Seq values, got {len(values)}")
    result = kmeans_1d(values, k)
    low, high = 1, k - 2
    low_members = result.members(low, values)
    high_members = result.members(high, values)
    t_l = float(low_members.min()) if low_members.size else float(result.centroids[low])
    t_h = float(high_members.max()) if high_members.size else float(result.centroids[high])
    return t_l, t_h, result


def stage2_inner_sequence_filter(groups, all_values, k=4):
    """
    all_values: clip id -> VAE-Seq for the set the thresholds come from (set A).
    The clips of `groups` (set B) are looked up in the same mapping.
    """
    t_l, t_h, result = stage2_thresholds(all_values.values(), k)
    kept_groups = []
    for group in groups:
        kept = [clip for clip in group.clips if t_l <= all_values[clip.clip_id] <= t_h]
        kept_groups.append(group.with_clips(kept))
    return kept_groups, {"t_l": t_l, "t_h": t_h, "centroids": [float(c) for c in result.centroids]}


# --- STAGE 3 ---


def stage3_inter_sequence_filter(groups, theta_fn, threshold=98.0):
    """
    theta_fn(clip_a, clip_b) -> inter-clip similarity in percent. Group order
    and clip order are significant: the kept set grows greedily.
    """
    kept_all = []
    kept_groups = []
    theta_log, duplicates = [], []
    for group in groups:
        kept = []
        for q, clip in enumerate(group.clips):
            admit = True
            for other in kept_all:
                value = float(theta_fn(clip, other))
                theta_log.append((clip.clip_id, other.clip_id, value))
                if value >= threshold:
                    if q == 0:
                        # group-first clips are admitted anyway; flag the near-duplicate
                        duplicates.append((clip.clip_id, other.clip_id, value))
                    else:
                        admit = False
                    break
            if admit:
                kept.append(clip)
                kept_all.append(clip)
        kept_groups.append(group.with_clips(kept))
    return kept_groups, {"theta": theta_log, "duplicate_firsts": duplicates}


# --- PIPELINE ---


def run_filter_pipeline(groups, classifier=None, autoencoder=None, cfg=None, loss_fn=None, vae_seq_fn=None, theta_fn=None):
    """
    Stages 1 -> 2 -> 3, each skippable through the filter config. Scorers default
    to the classifier's cross-entropy and the autoencoder's latent metrics.
    Returns (filtered groups, FilterReport).
    """
    cfg = cfg or FilterConfig()
    if (cfg.inner_sequence or cfg.inter_sequence) and (vae_seq_fn is None or theta_fn is None):
        if autoencoder is None:
            raise DataError("sequence filtering needs an autoencoder or explicit scorers")
        cache = LatentCache(autoencoder)
        vae_seq_fn = vae_seq_fn or cache.vae_seq
        theta_fn = theta_fn or cache.theta
    if cfg.semantic and loss_fn is None:
        if classifier is None:
            raise DataError("semantic filtering needs a classifier or an explicit loss function")
        loss_fn = classifier_loss_fn(classifier)

    report = FilterReport(
        enabled={"semantic": cfg.semantic, "inner_sequence": cfg.inner_sequence, "inter_sequence": cfg.inter_sequence}
    )
    report.n = len(groups)
    report.N = sum(len(g.clips) for g in groups)
    report.clip_groups = {clip.clip_id: g.group_id for g in groups for clip in g.clips}

    current = list(groups)
    if cfg.semantic:
        current, frag = stage1_semantic_filter(current, loss_fn)
        report.losses = frag["losses"]
        report.group_thresholds = frag["group_thresholds"]
        report.notices += frag["notices"]
    _record(report, "stage1", groups, current)
    report.n1 = sum(1 for g in current if g.clips)
    report.N1 = len(flatten_groups(current))

    if cfg.inner_sequence:
        # set A is all of S unless thresholds are taken from S1; B (S1) is always inside A
        scored = current if cfg.stage2_thresholds_from_s1 else groups
        report.vae_seq = {clip.clip_id: float(vae_seq_fn(clip)) for clip in flatten_groups(scored)}
        try:
            before = current
            current, frag = stage2_inner_sequence_filter(current, report.vae_seq, cfg.kmeans_k)
            report.t_l, report.t_h, report.centroids = frag["t_l"], frag["t_h"], frag["centroids"]
            _record(report, "stage2", before, current)
        except ConfigError as e:
            report.notices.append(f"stage 2 disabled: {e}")
            log(f"stage 2 disabled: {e}", "WARN")
            _record(report, "stage2", current, current)
    else:
        _record(report, "stage2", current, current)
    report.n2 = sum(1 for g in current if g.clips)
    report.N2 = len(flatten_groups(current))

    if cfg.inter_sequence:
        before = current
        current, frag = stage3_inter_sequence_filter(current, theta_fn, cfg.theta_threshold)
        report.theta = frag["theta"]
        report.duplicate_firsts = frag["duplicate_firsts"]
        if report.duplicate_firsts:
            report.notices.append(
                f"stage 3: {len(report.duplicate_firsts)} group-first clips admitted despite near-duplicates"
            )
        _record(report, "stage3", before, current)
    else:
        _record(report, "stage3", current, current)
    report.N3 = len(flatten_groups(current))

    if not report.N >= report.N1 >= report.N2 >= report.N3:
        raise DataError(f"filter counts are not monotone: {report.counts}")
    return current, report


def _record(report, stage, before, after):
    kept = [clip.clip_id for clip in flatten_groups(after)]
    kept_set = set(kept)
    report.kept[stage] = kept
    report.dropped[stage] = [clip.clip_id for clip in flatten_groups(before) if clip.clip_id not in kept_set]
