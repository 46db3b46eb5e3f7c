"""
Synthetic Sequence Quality Validation

Compares the real training set, the raw synthetic set and the filtered set on:
1. Cross-frame consistency (VAE-Seq)
2. Motion smoothness (Dynamic Smoothness)
3. Class coverage of every set
4. Filter effect (raw vs filtered spread, filtered vs real smoothness)

Usage:
    python validation/validate_data_quality.py --run runs/toy
    python validation/validate_data_quality.py --run runs/toy --out runs/toy/quality
"""

import argparse
from pathlib import Path

import numpy as np
import polars as pl
from tabulate import tabulate

from common.errors import DataError
from common.log import banner, log
from data_collection.processing.clip_store import load_clips
from models.training.generator import load_autoencoder
from validation.metrics import LatentCache, dynamic_smoothness

METRICS = ("vae_seq", "dynamic_smoothness")


class SyntheticQualityValidator:
    def __init__(self, sets, autoencoder):
        """sets: ordered mapping name -> list of SequenceClip (e.g. real, synthetic, filtered)."""
        self.sets = dict(sets)
        self.cache = LatentCache(autoencoder)
        self.df = None
        self.stats = None
        self.warnings = []
        self.passed_checks = []

    def compute_metrics(self):
        """One row per clip and set."""
        rows = []
        for name, clips in self.sets.items():
            for clip in clips:
                try:
                    smooth = dynamic_smoothness(clip)
                except DataError:
                    smooth = None
                rows.append(
                    {
                        "set": name,
                        "clip_id": clip.clip_id,
                        "class_id": int(clip.class_id),
                        "vae_seq": self.cache.vae_seq(clip),
                        "dynamic_smoothness": smooth,
                    }
                )
        schema = {
            "set": pl.Utf8,
            "clip_id": pl.Utf8,
            "class_id": pl.Int64,
            "vae_seq": pl.Float64,
            "dynamic_smoothness": pl.Float64,
        }
        self.df = pl.DataFrame(rows, schema=schema)
        log(f"scored {self.df.height:,} clips across {len(self.sets)} sets")
        return self.df

    def summarize(self):
        banner("📊 VALIDATION 1-2: VAE-Seq & Dynamic Smoothness")
        parts = []
        for metric in METRICS:
            parts.append(
                self.df.group_by("set", maintain_order=True)
                .agg(
                    pl.col(metric).count().alias("n"),
                    pl.col(metric).mean().alias("mean"),
                    pl.col(metric).median().alias("median"),
                    pl.col(metric).std().alias("std"),
                    pl.col(metric).quantile(0.05, interpolation="linear").alias("p5"),
                    pl.col(metric).quantile(0.95, interpolation="linear").alias("p95"),
                )
                .with_columns(pl.lit(metric).alias("metric"))
                .select(["set", "metric", "n", "mean", "median", "std", "p5", "p95"])
            )
        self.stats = pl.concat(parts)
        table = [
            [r["set"], r["metric"], r["n"]] + [_fmt(r[k]) for k in ("mean", "median", "std", "p5", "p95")]
            for r in self.stats.iter_rows(named=True)
        ]
        print(tabulate(table, headers=["Set", "Metric", "N", "Mean", "Median", "Std", "P5", "P95"], tablefmt="grid"))
        print()
        return self.stats

    def validate_class_coverage(self):
        banner("🏷️  VALIDATION 3: Class Coverage")
        counts = self.df.group_by(["set", "class_id"], maintain_order=True).agg(pl.col("clip_id").count().alias("clips"))
        print(tabulate(counts.rows(), headers=["Set", "Class", "Clips"], tablefmt="grid"))

        expected = set(self.df.filter(pl.col("set") == next(iter(self.sets)))["class_id"].to_list())
        for name in self.sets:
            present = set(self.df.filter(pl.col("set") == name)["class_id"].to_list())
            missing = sorted(expected - present)
            if missing:
                self.warnings.append(f"⚠️  {name}: no clips for classes {missing}")
            else:
                self.passed_checks.append(f"✅ {name}: every class represented")
        print()

    def validate_filter_effect(self):
        banner("🔍 VALIDATION 4: Filter Effect")
        if "synthetic" not in self.sets or "filtered" not in self.sets:
            log("raw or filtered set missing, skipping", "WARN")
            return
        stat = {(r["set"], r["metric"]): r for r in self.stats.iter_rows(named=True)}
        raw, kept = stat.get(("synthetic", "vae_seq")), stat.get(("filtered", "vae_seq"))
        if raw and kept and raw["std"] is not None and kept["std"] is not None:
            if kept["std"] <= raw["std"]:
                self.passed_checks.append(f"✅ VAE-Seq spread narrowed ({raw['std']:.2f} -> {kept['std']:.2f})")
            else:
                self.warnings.append(f"⚠️  VAE-Seq spread widened ({raw['std']:.2f} -> {kept['std']:.2f})")

        real = stat.get(("real", "dynamic_smoothness"))
        kept_smooth = stat.get(("filtered", "dynamic_smoothness"))
        if real and kept_smooth and real["mean"] is not None and kept_smooth["mean"] is not None:
            gap = abs(real["mean"] - kept_smooth["mean"])
            if gap <= 5.0:
                self.passed_checks.append(f"✅ smoothness within {gap:.2f} points of real clips")
            else:
                self.warnings.append(f"⚠️  smoothness {gap:.2f} points away from real clips")

    def print_summary(self):
        banner("📋 VALIDATION SUMMARY")
        print(f"\n✅ Passed Checks ({len(self.passed_checks)}):")
        for check in self.passed_checks:
            print(f"   {check}")
        if self.warnings:
            print(f"\n⚠️  Warnings ({len(self.warnings)}):")
            for warning in self.warnings:
                print(f"   {warning}")
        print()

    def save(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.df.write_parquet(out_dir / "quality_metrics.parquet")
        self.stats.write_parquet(out_dir / "quality_stats.parquet")
        log(f"quality tables written to {out_dir}")

    def run_all_validations(self, out_dir=None):
        self.compute_metrics()
        self.summarize()
        self.validate_class_coverage()
        self.validate_filter_effect()
        self.print_summary()
        if out_dir is not None:
            self.save(out_dir)
        return self.stats


def _fmt(value):
    return "—" if value is None or (isinstance(value, float) and np.isnan(value)) else f"{value:.2f}"


def main():
    parser = argparse.ArgumentParser(description="Validate synthetic sequence quality")
    parser.add_argument("--run", type=str, required=True, help="Experiment output directory")
    parser.add_argument("--out", type=str, default=None, help="Where to write the parquet tables")
    args = parser.parse_args()

    run = Path(args.run)
    sets = {"real": load_clips(run / "dataset", split="train")}
    for name, sub in (("synthetic", "synthetic"), ("filtered", "filtered")):
        if (run / sub / "manifest.json").exists():
            sets[name] = load_clips(run / sub)
    validator = SyntheticQualityValidator(sets, load_autoencoder(run / "checkpoints" / "vae.ckpt"))
    validator.run_all_validations(args.out or run / "quality")


if __name__ == "__main__":
    main()
