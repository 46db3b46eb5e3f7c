import pytest
import torch

from common.errors import DimensionError, StateError
from models.architectures.autoencoder import Autoencoder, vae_decode, vae_encode
from models.architectures.unet import finetune_parameter_names, inflate_2d_to_3d
from models.numerics import parameter_hash
from models.training.generator import (
    clip_motion_fields,
    finetune_sequence_ldm,
    load_autoencoder,
    load_denoiser,
    pretrain_image_ldm,
    save_model,
)
from tests.helpers import make_batch, random_inputs


def test_autoencoder_latent_shapes():
    toy = Autoencoder(channels=1, image_size=32, rate=4, latent_channels=4, base_channels=8)
    assert toy.encode(torch.rand(2, 1, 32, 32)).shape == (2, 4, 8, 8)
    full = Autoencoder(channels=1, image_size=256, rate=8, latent_channels=4, base_channels=8)
    z = full.encode(torch.rand(1, 1, 256, 256))
    assert z.shape == (1, 4, 32, 32)
    assert z[0].numel() == 4096
    assert full.decode(z).shape == (1, 1, 256, 256)


def test_vae_encode_decode_need_a_fitted_autoencoder():
    ae = Autoencoder(channels=1, image_size=16, rate=4, latent_channels=4, base_channels=8)
    x = torch.rand(2, 1, 16, 16)
    with pytest.raises(StateError):
        vae_encode(ae, x)
    with pytest.raises(StateError):
        vae_decode(ae, torch.zeros(2, 4, 4, 4))
    ae.fitted.fill_(1.0)
    z = vae_encode(ae, x)
    assert torch.equal(z, ae.encode(x))
    assert vae_decode(ae, z).shape == (2, 1, 16, 16)


def test_autoencoder_shape_errors():
    ae = Autoencoder(channels=1, image_size=16, rate=4, latent_channels=4, base_channels=8)
    with pytest.raises(DimensionError):
        ae.encode(torch.rand(1, 1, 32, 32))
    with pytest.raises(DimensionError):
        ae.decode(torch.rand(1, 3, 4, 4))
    with pytest.raises(DimensionError):
        Autoencoder(rate=3)


def test_trained_autoencoder(tiny_models, tiny_dataset):
    ae = tiny_models.autoencoder
    assert ae.is_fitted
    assert ae.latent_scale.item() > 0
    clip = tiny_dataset.test[0]
    with torch.no_grad():
        z = ae.encode(clip.pixels)
        again = ae.encode(clip.pixels)
        recon = ae.decode(z)
    assert z.shape == (4, 4, 4, 4)
    assert torch.equal(z, again)
    assert recon.shape == clip.pixels.shape
    assert recon.min() >= 0.0 and recon.max() <= 1.0


def test_pretraining_needs_fitted_autoencoder(tiny_cfg, tiny_dataset):
    ae = Autoencoder.from_config(tiny_cfg)
    with pytest.raises(StateError):
        pretrain_image_ldm(tiny_dataset.train, ae, tiny_cfg)


def test_finetune_moves_only_listed_groups(tiny_models, tiny_dataset):
    cfg = tiny_models.cfg
    model = inflate_2d_to_3d(tiny_models.image, cfg.sam.variant)
    names = finetune_parameter_names(model)
    frozen_before = parameter_hash({n: p for n, p in model.named_parameters() if n not in names})
    trained_before = {n: p.detach().clone() for n, p in model.named_parameters() if n in names}

    fields = clip_motion_fields(tiny_dataset.train, cfg)
    finetune_sequence_ldm(model, tiny_dataset.train, tiny_models.autoencoder, cfg, seed=1, fields=fields)

    assert parameter_hash({n: p for n, p in model.named_parameters() if n not in names}) == frozen_before
    moved = [n for n, p in model.named_parameters() if n in names and not torch.equal(p, trained_before[n])]
    assert moved


def test_finetune_needs_sequence_model(tiny_models, tiny_dataset):
    with pytest.raises(StateError):
        finetune_sequence_ldm(tiny_models.image, tiny_dataset.train, tiny_models.autoencoder, tiny_models.cfg)


def test_checkpoints_rebuild_models(tiny_models, tmp_path):
    cfg = tiny_models.cfg
    save_model(tmp_path / "vae.ckpt", tiny_models.autoencoder, cfg)
    save_model(tmp_path / "seq.ckpt", tiny_models.sequence, cfg)

    ae = load_autoencoder(tmp_path / "vae.ckpt")
    assert ae.is_fitted
    assert ae.latent_scale.item() == pytest.approx(tiny_models.autoencoder.latent_scale.item())

    seq = load_denoiser(tmp_path / "seq.ckpt")
    assert seq.mode == "sequence" and seq.variant == cfg.sam.variant
    batch = make_batch(cfg)
    z, t = random_inputs(cfg, seq, 0)
    with torch.no_grad():
        assert torch.equal(seq(z, t, batch), tiny_models.sequence(z, t, batch))
