"""
End-to-end augmentation experiment.

    dataset -> vae -> pretrain -> inflate -> finetune -> sample
            -> filter_classifier -> filter -> classifiers -> evaluate
            -> quality -> report

Every stage writes its outputs under the run directory and records their
SHA-256 in manifest.json. A stage whose recorded outputs are all present and
unchanged is skipped, so an interrupted run resumes from the first stage that
did not finish. The manifest is bound to one config hash.

Usage:
    python benchmarking/experiment.py --config configs/toy.yaml --out runs/toy
"""

import argparse
import json
from pathlib import Path

import polars as pl

from benchmarking.evaluate import evaluate
from benchmarking.report import build_report
from common.config import AugmentConfig, config_hash, dump_config, load_config
from common.errors import ConfigError, StateError
from common.log import banner, log
from data_collection.processing.clip_store import (
    atomic_write_json,
    file_sha256,
    load_clips,
    read_json,
    save_clips,
)
from data_collection.simulation.toy_factory import ToyDatasetSpec, make_toy_dataset
from models.architectures.unet import count_parameters, finetune_parameter_names, inflate_2d_to_3d
from models.inference.sampler import build_banks, generate_groups
from models.numerics import configure_threads
from models.training.classifier import TrainingParadigm, load_classifier, train_classifier
from models.training.generator import (
    clip_frames,
    finetune_sequence_ldm,
    load_autoencoder,
    load_denoiser,
    pretrain_image_ldm,
    reconstruction_mse,
    save_model,
    vae_train,
)
from models.training.schedule import NoiseSchedule
from validation.filter import SyntheticGroup, flatten_groups, run_filter_pipeline
from validation.validate_data_quality import SyntheticQualityValidator

STAGES = (
    "dataset",
    "vae",
    "pretrain",
    "inflate",
    "finetune",
    "sample",
    "filter_classifier",
    "filter",
    "classifiers",
    "evaluate",
    "quality",
    "report",
)

REQUIRES = {
    "dataset": (),
    "vae": ("dataset",),
    "pretrain": ("vae",),
    "inflate": ("pretrain",),
    "finetune": ("inflate",),
    "sample": ("finetune",),
    "filter_classifier": ("dataset",),
    "filter": ("sample", "filter_classifier"),
    "classifiers": ("filter",),
    "evaluate": ("classifiers",),
    "quality": ("filter",),
    "report": ("evaluate",),
}

NO_AUGMENT = AugmentConfig(color=False, move=False, gaussian=False, rotation=False, flip=False)


def write_curve(rows, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    pl.DataFrame(rows).write_parquet(path)


class ExperimentRunner:
    def __init__(self, cfg, out_dir=None):
        self.cfg = cfg
        self.out = Path(out_dir or cfg.experiment.out_dir)
        self.seed = cfg.experiment.seed
        self.manifest_path = self.out / "manifest.json"
        self._cache = {}
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = self._open_manifest()

    # --- MANIFEST ---

    def _open_manifest(self):
        digest = config_hash(self.cfg)
        if self.manifest_path.exists():
            manifest = read_json(self.manifest_path)
            if manifest["config_hash"] != digest:
                raise ConfigError(
                    f"{self.out} belongs to config {manifest['config_hash'][:12]}, "
                    f"not {digest[:12]}; use a fresh --out"
                )
            return manifest
        dump_config(self.cfg, self.out / "config.yaml")
        manifest = {
            "config_hash": digest,
            "seed": self.seed,
            "seeds": list(self.cfg.experiment.seeds),
            "sampler_seed": self.cfg.sampler.seed,
            "threads": self.cfg.experiment.threads,
            "bit_exact": self.cfg.experiment.threads == 1,
            "stages": {},
        }
        atomic_write_json(self.manifest_path, manifest)
        return manifest

    def _flush(self):
        atomic_write_json(self.manifest_path, self.manifest)

    def is_done(self, name):
        entry = self.manifest["stages"].get(name)
        if not entry or entry["status"] != "done":
            return False
        for rel, digest in entry["outputs"].items():
            path = self.out / rel
            if not path.exists() or file_sha256(path) != digest:
                return False
        return True

    def stage(self, name, fn, force=False):
        """Run `fn` (returning its output paths relative to the run dir) unless already done."""
        if not force and self.is_done(name):
            log(f"⏭️  {name}: outputs verified, skipping")
            return self.manifest["stages"][name]["outputs"]
        self.manifest["stages"][name] = {"status": "running"}
        self._flush()
        try:
            outputs = fn()
        except Exception as e:
            self.manifest["stages"][name] = {"status": "failed", "error": f"{type(e).__name__}: {e}"}
            self._flush()
            log(f"❌ {name} failed: {e}", "ERROR")
            raise
        hashes = {str(rel): file_sha256(self.out / rel) for rel in outputs}
        self.manifest["stages"][name] = {"status": "done", "outputs": hashes}
        self._flush()
        log(f"✅ {name}: {len(hashes)} outputs")
        return hashes

    def run_stage(self, name, force=False):
        if name not in REQUIRES:
            raise ConfigError(f"unknown stage '{name}', expected one of {STAGES}")
        for dep in REQUIRES[name]:
            if not self.is_done(dep):
                raise StateError(f"stage '{name}' needs '{dep}' to be completed first")
        banner(f"STAGE: {name.upper()}")
        return self.stage(name, getattr(self, f"_stage_{name}"), force=force)

    def run_all(self):
        for name in STAGES:
            self.run_stage(name)

    # --- ARTIFACT ACCESS ---

    def _cached(self, key, load):
        if key not in self._cache:
            self._cache[key] = load()
        return self._cache[key]

    def real_train(self):
        return self._cached("train", lambda: load_clips(self.out / "dataset", split="train"))

    def real_test(self):
        return self._cached("test", lambda: load_clips(self.out / "dataset", split="test"))

    def autoencoder(self):
        return self._cached("vae", lambda: load_autoencoder(self.out / "checkpoints" / "vae.ckpt"))

    def _load_groups(self, sub):
        index = read_json(self.out / sub / "groups.json")
        by_id = {clip.clip_id: clip for clip in load_clips(self.out / sub)}
        banks = build_banks(self.real_train(), self.cfg)
        groups = []
        for entry in index["groups"]:
            bank, source = banks[entry["group_id"]]
            groups.append(
                SyntheticGroup(
                    group_id=entry["group_id"],
                    bank=bank,
                    clips=[by_id[c] for c in entry["clip_ids"]],
                    source_clip=source,
                )
            )
        return groups

    def synthetic_groups(self):
        return self._cached("synthetic", lambda: self._load_groups("synthetic"))

    def filtered_groups(self):
        return self._cached("filtered", lambda: self._load_groups("filtered"))

    def _save_groups(self, groups, sub):
        clips = flatten_groups(groups)
        save_clips(clips, self.out / sub, "synthetic")
        index = {
            "groups": [
                {
                    "group_id": g.group_id,
                    "class_label": g.class_label,
                    "source_clip": g.source_clip,
                    "clip_ids": [c.clip_id for c in g.clips],
                }
                for g in groups
            ]
        }
        atomic_write_json(self.out / sub / "groups.json", index)
        return [f"{sub}/manifest.json", f"{sub}/groups.json"] + [f"{sub}/clips/{c.clip_id}.cga" for c in clips]

    def classifier_runs(self):
        """(run name, paradigm, synthetic source, augmentation)."""
        aug = self.cfg.classifier.augment
        runs = [
            ("baseline", TrainingParadigm.BASELINE, None, aug),
            ("real_finetune", TrainingParadigm.REAL_FINETUNE, "filtered", aug),
            ("joint_train", TrainingParadigm.JOINT_TRAIN, "filtered", aug),
        ]
        if self.cfg.experiment.unfiltered_comparison:
            runs.append(("joint_train_unfiltered", TrainingParadigm.JOINT_TRAIN, "synthetic", aug))
        if self.cfg.experiment.augmentation_ablation:
            runs.append(("baseline_noaug", TrainingParadigm.BASELINE, None, NO_AUGMENT))
            runs.append(("joint_train_noaug", TrainingParadigm.JOINT_TRAIN, "filtered", NO_AUGMENT))
        return runs

    # --- STAGES ---

    def _stage_dataset(self):
        spec = ToyDatasetSpec.from_config(self.cfg, seed=self.seed)
        dataset = make_toy_dataset(spec)
        outputs = []
        for split in ("train", "test"):
            entries = save_clips(getattr(dataset, split), self.out / "dataset", split)
            outputs += [f"dataset/{e['path']}" for e in entries]
            log(f"{split}: per class {dataset.class_counts(split)}")
        return ["dataset/manifest.json"] + outputs

    def _stage_vae(self):
        frames = clip_frames(self.real_train())
        autoencoder, curve = vae_train(frames, self.cfg, self.seed)
        mse = reconstruction_mse(autoencoder, frames)
        threshold = self.cfg.autoencoder.recon_mse_threshold
        marker = "✅" if mse <= threshold else "⚠️ "
        log(f"{marker} reconstruction MSE {mse:.5f} (threshold {threshold})")
        save_model(self.out / "checkpoints" / "vae.ckpt", autoencoder, self.cfg, recon_mse=mse)
        write_curve(curve, self.out / "curves" / "vae.parquet")
        self._cache["vae"] = autoencoder
        return ["checkpoints/vae.ckpt", "curves/vae.parquet"]

    def _stage_pretrain(self):
        model, curve = pretrain_image_ldm(self.real_train(), self.autoencoder(), self.cfg, self.seed)
        save_model(self.out / "checkpoints" / "image_ldm.ckpt", model, self.cfg)
        write_curve(curve, self.out / "curves" / "pretrain.parquet")
        return ["checkpoints/image_ldm.ckpt", "curves/pretrain.parquet"]

    def _stage_inflate(self):
        image_model = load_denoiser(self.out / "checkpoints" / "image_ldm.ckpt")
        model = inflate_2d_to_3d(image_model, self.cfg.sam.variant)
        names = finetune_parameter_names(model)
        params = dict(model.named_parameters())
        log(
            f"inflated ({self.cfg.sam.variant}) | image {count_parameters(image_model.parameters()):,} "
            f"| sequence {count_parameters(model.parameters()):,} "
            f"| finetuned {count_parameters(params[n] for n in names):,}"
        )
        save_model(self.out / "checkpoints" / "seq_init.ckpt", model, self.cfg)
        return ["checkpoints/seq_init.ckpt"]

    def _stage_finetune(self):
        model = load_denoiser(self.out / "checkpoints" / "seq_init.ckpt")
        model, curve = finetune_sequence_ldm(model, self.real_train(), self.autoencoder(), self.cfg, self.seed)
        save_model(self.out / "checkpoints" / "seq_ldm.ckpt", model, self.cfg)
        write_curve(curve, self.out / "curves" / "finetune.parquet")
        return ["checkpoints/seq_ldm.ckpt", "curves/finetune.parquet"]

    def _stage_sample(self):
        model = load_denoiser(self.out / "checkpoints" / "seq_ldm.ckpt")
        banks = build_banks(self.real_train(), self.cfg)
        groups = generate_groups(
            model,
            self.autoencoder(),
            [bank for bank, _ in banks],
            self.cfg.generation.group_size,
            self.cfg.sampler.seed,
            self.cfg,
            NoiseSchedule.from_config(self.cfg),
            source_ids=[source for _, source in banks],
        )
        self._cache["synthetic"] = groups
        return self._save_groups(groups, "synthetic")

    def _stage_filter_classifier(self):
        model, curve = train_classifier(self.real_train(), None, TrainingParadigm.BASELINE, self.cfg, self.seed)
        save_model(self.out / "checkpoints" / "filter_classifier.ckpt", model, self.cfg, role="semantic_filter")
        write_curve(curve, self.out / "curves" / "filter_classifier.parquet")
        return ["checkpoints/filter_classifier.ckpt", "curves/filter_classifier.parquet"]

    def _stage_filter(self):
        classifier = load_classifier(self.out / "checkpoints" / "filter_classifier.ckpt")
        filtered, report = run_filter_pipeline(
            self.synthetic_groups(), classifier=classifier, autoencoder=self.autoencoder(), cfg=self.cfg.filter
        )
        print(report.summary())
        report.save(self.out / "filter")
        self._cache["filtered"] = filtered
        outputs = self._save_groups(filtered, "filtered")
        return outputs + ["filter/filter_report.json", "filter/filter_decisions.parquet"]

    def _stage_classifiers(self):
        sources = {"filtered": self.filtered_groups, "synthetic": self.synthetic_groups}
        outputs = []
        for run, paradigm, source, aug in self.classifier_runs():
            synthetic = flatten_groups(sources[source]()) if source else None
            for seed in self.cfg.experiment.seeds:
                outputs += self.stage(
                    f"classifier:{run}:s{seed}",
                    lambda run=run, paradigm=paradigm, synthetic=synthetic, aug=aug, seed=seed: self._train_one(
                        run, paradigm, synthetic, aug, seed
                    ),
                )
        return outputs

    def _train_one(self, run, paradigm, synthetic, aug, seed):
        log(f"{run} | seed {seed} | synthetic {0 if synthetic is None else len(synthetic)}")
        model, curve = train_classifier(self.real_train(), synthetic, paradigm, self.cfg, seed, augment=aug)
        ckpt = f"checkpoints/classifiers/{run}_s{seed}.ckpt"
        save_model(self.out / ckpt, model, self.cfg, run=run, paradigm=paradigm.value, seed=seed)
        curve_path = f"curves/classifier_{run}_s{seed}.parquet"
        write_curve(curve, self.out / curve_path)
        return [ckpt, curve_path]

    def _stage_evaluate(self):
        outputs = []
        for run, paradigm, _, _ in self.classifier_runs():
            for seed in self.cfg.experiment.seeds:
                model = load_classifier(self.out / "checkpoints" / "classifiers" / f"{run}_s{seed}.ckpt")
                report = evaluate(model, self.real_test(), seed=seed, paradigm=paradigm.value, run=run)
                rel = f"eval/{run}_s{seed}.json"
                atomic_write_json(self.out / rel, report.to_dict())
                log(f"{run:24s} seed {seed} | acc {report.accuracy:6.2f}% | AUROC {report.auroc:.4f}")
                outputs.append(rel)
        return outputs

    def _stage_quality(self):
        sets = {
            "real": self.real_train(),
            "synthetic": flatten_groups(self.synthetic_groups()),
            "filtered": flatten_groups(self.filtered_groups()),
        }
        SyntheticQualityValidator(sets, self.autoencoder()).run_all_validations(self.out / "quality")
        return ["quality/quality_metrics.parquet", "quality/quality_stats.parquet"]

    def _stage_report(self):
        return [str(Path(p).relative_to(self.out)) for p in build_report(self.out)]


def run_experiment(cfg, out_dir=None):
    """Runs (or resumes) every stage; returns the run directory."""
    bit_exact = configure_threads(cfg.experiment.threads)
    runner = ExperimentRunner(cfg, out_dir)
    banner(f"EXPERIMENT | config {runner.manifest['config_hash'][:12]} | out {runner.out}")
    if not bit_exact:
        log(f"threads={cfg.experiment.threads}: outputs are not bit-exact replayable", "WARN")
    runner.run_all()
    log(f"✅ experiment complete: {json.dumps(runner.manifest['seeds'])} seeds")
    return runner.out


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--config", type=str, default=None, help="YAML config file")
    parser.add_argument("--out", type=str, default=None, help="Run directory")
    args = parser.parse_args()
    run_experiment(load_config(args.config), args.out)
