"""
Result tables and training curves for a finished run.

Every table lists the per-seed values and the median over seeds; the median is
the headline number. Minority classes are the classes with fewer training
clips than the largest class.

Usage:
    python benchmarking/report.py --run runs/toy
"""

import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import polars as pl  # noqa: E402
from tabulate import tabulate  # noqa: E402

from benchmarking.evaluate import EvalReport  # noqa: E402
from common.errors import DataError  # noqa: E402
from common.log import banner, log  # noqa: E402
from data_collection.processing.clip_store import read_json  # noqa: E402


def load_reports(run_dir):
    paths = sorted((Path(run_dir) / "eval").glob("*.json"))
    if not paths:
        raise DataError(f"no evaluation reports under {run_dir}/eval")
    return [EvalReport.from_dict(read_json(p)) for p in paths]


def results_frame(reports):
    return pl.DataFrame(
        [
            {"run": r.run, "paradigm": r.paradigm, "seed": r.seed, "accuracy": r.accuracy, "auroc": r.auroc}
            for r in reports
        ]
    ).sort(["run", "seed"])


def per_class_frame(reports):
    rows = []
    for r in reports:
        for m in r.per_class:
            rows.append({"run": r.run, "seed": r.seed, **m})
    return pl.DataFrame(rows).sort(["run", "class_id", "seed"])


def median_table(results):
    return (
        results.group_by("run", maintain_order=True)
        .agg(
            pl.col("seed").alias("seeds"),
            pl.col("accuracy").alias("accuracy_per_seed"),
            pl.col("auroc").alias("auroc_per_seed"),
            pl.col("accuracy").median().alias("accuracy_median"),
            pl.col("auroc").median().alias("auroc_median"),
        )
        .sort("run")
    )


def minority_classes(run_dir):
    manifest = read_json(Path(run_dir) / "dataset" / "manifest.json")
    counts = {}
    for entry in manifest["clips"]:
        if entry["split"] == "train":
            counts[entry["class_id"]] = counts.get(entry["class_id"], 0) + 1
    top = max(counts.values())
    return sorted(c for c, n in counts.items() if n < top), counts


def directional_checks(medians):
    acc = dict(zip(medians["run"].to_list(), medians["accuracy_median"].to_list()))
    lines = []
    if "joint_train" in acc and "baseline" in acc:
        ok = acc["joint_train"] > acc["baseline"]
        lines.append(
            f"{'✅' if ok else '⚠️ '} joint_train median {acc['joint_train']:.2f}% vs baseline {acc['baseline']:.2f}%"
        )
    if "joint_train" in acc and "joint_train_unfiltered" in acc:
        ok = acc["joint_train"] >= acc["joint_train_unfiltered"]
        lines.append(
            f"{'✅' if ok else '⚠️ '} filtered {acc['joint_train']:.2f}% vs unfiltered {acc['joint_train_unfiltered']:.2f}%"
        )
    return lines


def plot_curves(run_dir, out_dir):
    """One PNG per curve file: loss and learning rate against step."""
    written = []
    for path in sorted((Path(run_dir) / "curves").glob("*.parquet")):
        df = pl.read_parquet(path)
        if df.height == 0:
            continue
        fig, (ax_loss, ax_lr) = plt.subplots(1, 2, figsize=(12, 4))
        for stage in df["stage"].unique(maintain_order=True).to_list():
            part = df.filter(pl.col("stage") == stage)
            ax_loss.plot(part["step"].to_numpy(), part["loss"].to_numpy(), label=stage, linewidth=0.8)
            ax_lr.plot(part["step"].to_numpy(), part["lr"].to_numpy(), label=stage, linewidth=0.8)
        ax_loss.set_title(f"{path.stem} loss")
        ax_loss.set_xlabel("step")
        ax_loss.set_yscale("log")
        ax_loss.legend()
        ax_lr.set_title("learning rate")
        ax_lr.set_xlabel("step")
        plt.tight_layout()
        target = out_dir / f"curve_{path.stem}.png"
        fig.savefig(target, dpi=100, metadata={"Software": None})
        plt.close(fig)
        written.append(target)
    return written


def build_report(run_dir):
    """Writes report/{results.parquet, per_class.parquet, results.txt, curve_*.png}; returns the paths."""
    run_dir = Path(run_dir)
    out_dir = run_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)

    reports = load_reports(run_dir)
    results = results_frame(reports)
    per_class = per_class_frame(reports)
    medians = median_table(results)
    minority, train_counts = minority_classes(run_dir)

    sections = []
    rows = [
        [
            r["run"],
            ", ".join(f"{a:.2f}" for a in r["accuracy_per_seed"]),
            f"{r['accuracy_median']:.2f}",
            ", ".join(f"{a:.4f}" for a in r["auroc_per_seed"]),
            f"{r['auroc_median']:.4f}",
        ]
        for r in medians.iter_rows(named=True)
    ]
    seeds = sorted(set(results["seed"].to_list()))
    sections.append(f"ACCURACY (%) AND MACRO AUROC | seeds {seeds} | headline = median over seeds")
    sections.append(
        tabulate(
            rows,
            headers=["Run", "Accuracy per seed", "Accuracy median", "AUROC per seed", "AUROC median"],
            tablefmt="grid",
        )
    )

    class_rows = (
        per_class.group_by(["run", "class_id"], maintain_order=True)
        .agg(
            pl.col("sensitivity").median(),
            pl.col("specificity").median(),
            pl.col("precision").median(),
            pl.col("f1").median(),
        )
        .sort(["run", "class_id"])
    )
    table = [
        [
            r["run"],
            f"{r['class_id']}{' *' if r['class_id'] in minority else ''}",
            train_counts.get(r["class_id"], 0),
            f"{r['sensitivity']:.3f}",
            f"{r['specificity']:.3f}",
            f"{r['precision']:.3f}",
            f"{r['f1']:.3f}",
        ]
        for r in class_rows.iter_rows(named=True)
    ]
    sections.append(f"\nCLASS-LEVEL (median over seeds) | * = minority class {minority}")
    sections.append(
        tabulate(
            table,
            headers=["Run", "Class", "Train clips", "Sensitivity", "Specificity", "Precision", "F1"],
            tablefmt="grid",
        )
    )

    filter_report = run_dir / "filter" / "filter_report.txt"
    if filter_report.exists():
        sections.append("\nSYNTHETIC FILTER")
        sections.append(filter_report.read_text().rstrip())

    checks = directional_checks(medians)
    if checks:
        sections.append("\nDIRECTIONAL CHECKS (median accuracy)")
        sections += checks

    text = "\n".join(sections) + "\n"
    banner("RESULTS")
    print(text)

    results.write_parquet(out_dir / "results.parquet")
    per_class.write_parquet(out_dir / "per_class.parquet")
    (out_dir / "results.txt").write_text(text)
    written = [out_dir / "results.parquet", out_dir / "per_class.parquet", out_dir / "results.txt"]
    written += plot_curves(run_dir, out_dir)
    log(f"report written to {out_dir}")
    return written


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--run", type=str, required=True, help="Experiment output directory")
    args = parser.parse_args()
    build_report(args.run)
