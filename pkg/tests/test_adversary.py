import pytest
import torch

from conftest import random_features
from facemorph.adversary import (
    EPS,
    Discriminator,
    discriminate,
    init_discriminator,
    load_discriminator,
    save_discriminator,
)
from facemorph.errors import ConfigError, ShapeError
from facemorph.losses import loss_adv_discriminator


def test_output_range():
    d = init_discriminator((4, 8, 8, 8), seed=0)
    x = torch.rand(5, 3, 112, 112) * 2 - 1
    p = discriminate(d, x)
    assert p.shape == (5,)
    assert (p >= EPS).all() and (p <= 1 - EPS).all()
    assert discriminate(d, x[0]).dim() == 0


def test_extreme_logits_stay_inside():
    d = init_discriminator((4, 8, 8, 8), seed=0)
    with torch.no_grad():
        d.fc.bias.fill_(1e4)
        p = discriminate(d, torch.zeros(1, 3, 112, 112))
    assert float(p) < 1.0
    assert torch.isfinite(torch.log(1 - p)).all()


def test_deterministic():
    d = init_discriminator((4, 8, 8, 8), seed=1)
    x = torch.rand(2, 3, 112, 112) * 2 - 1
    assert torch.equal(discriminate(d, x), discriminate(d, x))
    d2 = init_discriminator((4, 8, 8, 8), seed=1)
    assert torch.equal(discriminate(d2, x), discriminate(d, x))


def test_stride_downsampling():
    d = Discriminator()
    x = torch.zeros(1, 3, 112, 112)
    h = d.features[:4](x)  # first two conv + activation pairs
    assert h.shape[-1] == 112 // 4
    assert [m.stride[0] for m in d.features if isinstance(m, torch.nn.Conv2d)] == [2, 2, 1, 1]
    assert d.widths == (64, 128, 256, 512)


def test_bad_input():
    d = init_discriminator((4, 8, 8, 8))
    with pytest.raises(ShapeError):
        discriminate(d, torch.zeros(1, 3, 64, 64))
    with pytest.raises(ConfigError):
        Discriminator((4, 8, 8))


def test_separates_real_from_morph_after_training(tiny_generator, synth_store, synth_index):
    d = init_discriminator((4, 8, 8, 8), seed=0)
    opt = torch.optim.Adam(d.parameters(), lr=1e-3, betas=(0.5, 0.999))
    paths = [p for _, p in synth_index.entries]
    tiny_generator.eval()
    with torch.no_grad():
        fake = tiny_generator(random_features(16, 0), random_features(16, 1), 0.5)
    for step in range(15):
        sel = paths[(step * 8) % len(paths):][:8]
        real = synth_store.batch(sel)
        loss = loss_adv_discriminator(d(fake[:4]), d(real[:4]), d(real[4:]))
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        real = synth_store.batch(paths[::10])
        assert float(d(real).mean()) > float(d(fake).mean())


def test_checkpoint_round_trip(tmp_path):
    d = init_discriminator((4, 8, 8, 8), seed=2)
    save_discriminator(d, tmp_path / "d.pt")
    loaded = load_discriminator(tmp_path / "d.pt")
    x = torch.rand(2, 3, 112, 112) * 2 - 1
    assert torch.equal(discriminate(loaded, x), discriminate(d.eval(), x))
