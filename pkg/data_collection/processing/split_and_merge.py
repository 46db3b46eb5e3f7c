"""
Stratified oversampling of the real set and merging with synthetic clips.

JointTrain over-samples real clips to the synthetic count before mixing.
Oversampling is stratified by class: each class gets a share of the target
proportional to its real count (largest remainder, ties to the lower class
id), made of whole copies plus a seeded draw without replacement for the rest.

Usage:
    python data_collection/processing/split_and_merge.py --real runs/toy/dataset --synthetic runs/toy/filtered
"""

import argparse
from collections import defaultdict

import numpy as np

from common.errors import DataError
from common.log import banner, log
from data_collection.processing.clip_store import load_clips
from models.numerics import RngState


def class_distribution(clips):
    counts = defaultdict(int)
    for clip in clips:
        counts[clip.class_id] += 1
    return dict(sorted(counts.items()))


def stratified_quotas(counts, target):
    """Split `target` across classes proportionally to `counts` (dict class -> n)."""
    total = sum(counts.values())
    exact = {c: target * n / total for c, n in counts.items()}
    quotas = {c: int(np.floor(v)) for c, v in exact.items()}
    remaining = target - sum(quotas.values())
    order = sorted(counts, key=lambda c: (-(exact[c] - quotas[c]), c))
    for c in order[:remaining]:
        quotas[c] += 1
    return quotas


def oversample_real(real_clips, target, rng):
    """
    Real clips resampled to `target` clips with class proportions preserved.
    Returns the input unchanged when target <= len(real_clips).
    """
    if not real_clips:
        raise DataError("cannot oversample an empty real set")
    if target <= len(real_clips):
        return list(real_clips)

    by_class = defaultdict(list)
    for clip in real_clips:
        by_class[clip.class_id].append(clip)
    quotas = stratified_quotas({c: len(v) for c, v in by_class.items()}, target)

    out = []
    for class_id in sorted(by_class):
        pool = by_class[class_id]
        copies, extra = divmod(quotas[class_id], len(pool))
        out.extend(pool * copies)
        out.extend(pool[i] for i in sorted(rng.choice(len(pool), size=extra, replace=False)))
    return out


def merge_real_synthetic(real_clips, synthetic_clips, rng):
    """JointTrain training set: oversampled real + synthetic."""
    real_ids = {clip.clip_id for clip in real_clips}
    syn_ids = {clip.clip_id for clip in synthetic_clips}
    assert len(real_ids & syn_ids) == 0, "Real/Synthetic id overlap!"

    real_part = oversample_real(real_clips, len(synthetic_clips), rng)
    merged = real_part + list(synthetic_clips)
    assert len(merged) == len(real_part) + len(synthetic_clips), "Merge doesn't add up!"
    return merged


def print_distribution(name, clips):
    dist = class_distribution(clips)
    for class_id, count in dist.items():
        log(f"  {name:10s} class {class_id}: {count:5d} clips")
    log(f"  {name:10s} TOTAL  : {len(clips):5d} clips")


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--real", required=True, help="Dataset directory with real clips")
    parser.add_argument("--synthetic", required=True, help="Directory with (filtered) synthetic clips")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    real = load_clips(args.real, split="train")
    synthetic = load_clips(args.synthetic)

    banner("JOINT-TRAIN MERGE")
    print_distribution("real", real)
    print_distribution("synthetic", synthetic)
    merged = merge_real_synthetic(real, synthetic, RngState.named(args.seed, "oversample").numpy())
    print_distribution("merged", merged)
    log("✅ Merge validation passed (no overlaps)")
