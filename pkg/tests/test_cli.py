import yaml

from common.errors import ConfigError, DataError
from seqaug import build_parser, main, resolve_config


def _write(tmp_path, data):
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(data))
    return str(path)


def test_make_dataset_then_resume(tiny_cfg_dict, tmp_path):
    config = _write(tmp_path, tiny_cfg_dict)
    out = str(tmp_path / "run")
    assert main(["--config", config, "--out", out, "make-dataset"]) == 0
    assert (tmp_path / "run" / "dataset" / "manifest.json").exists()
    assert main(["--config", config, "--out", out, "make-dataset"]) == 0


def test_exit_codes(tiny_cfg_dict, tmp_path):
    out = str(tmp_path / "run")
    assert main(["--config", str(tmp_path / "missing.yaml"), "--out", out, "make-dataset"]) == ConfigError.exit_code == 2
    config = _write(tmp_path, tiny_cfg_dict)
    assert main(["--config", config, "--out", out, "--seed", "-1", "make-dataset"]) == 2
    # later stages refuse to run before their inputs exist
    assert main(["--config", config, "--out", out, "pretrain-ldm"]) == 1

    tiny_cfg_dict["sampler"]["steps"] = "a"
    assert main(["--config", _write(tmp_path, tiny_cfg_dict), "--out", out, "make-dataset"]) == 2
    tiny_cfg_dict["sampler"]["steps"] = 4

    tiny_cfg_dict["dataset"]["num_frames"] = 8
    long_clips = _write(tmp_path, tiny_cfg_dict)
    assert main(["--config", long_clips, "--out", str(tmp_path / "long"), "make-dataset"]) == DataError.exit_code == 3


def test_flags_override_file(tiny_cfg_dict, tmp_path):
    config = _write(tmp_path, tiny_cfg_dict)
    args = build_parser().parse_args(["--config", config, "--seed", "7", "--threads", "2", "--out", "x", "report"])
    cfg = resolve_config(args)
    assert cfg.experiment.seed == 7 and cfg.experiment.threads == 2 and cfg.experiment.out_dir == "x"
