import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

import oracles
from ocgan.discriminators import ObjectDiscOutput
from ocgan.losses import (RandomFeatureExtractor, ac_losses, ac_losses_generator, build_extractor, gan_losses,
                          hinge_d, perceptual_loss)


def tl(t):
    return t.tolist()


def test_gan_losses_match_oracle(f64):
    real = [torch.randn(3, 1, 4, 4), torch.randn(3, 1, 2, 2)]
    fake = [torch.randn(3, 1, 4, 4), torch.randn(3, 1, 2, 2)]
    g, d = gan_losses(real, fake)
    og, od = oracles.gan_losses([oracles.flat(tl(r)) for r in real], [oracles.flat(tl(f)) for f in fake])
    assert abs(g.item() - og) < 1e-12 and abs(d.item() - od) < 1e-12


def test_hinge_is_zero_beyond_margin():
    assert hinge_d(torch.full((5,), 2.0), torch.full((5,), -3.0)).item() == 0
    assert hinge_d(torch.zeros(4), torch.zeros(4)).item() == 2


def test_single_scale_gan_loss(f64):
    r, f = torch.randn(2, 1, 3, 3), torch.randn(2, 1, 3, 3)
    g, d = gan_losses([r], [f])
    assert torch.isclose(g, -f.mean()) and torch.isclose(d, hinge_d(r, f))


def test_ac_losses_match_oracle(f64):
    N, C = 7, 6
    real = ObjectDiscOutput(torch.randn(N), torch.randn(N, C))
    fake = ObjectDiscOutput(torch.randn(N), torch.randn(N, C))
    labels = torch.randint(0, C, (N,))
    g, d = ac_losses(real, fake, labels)
    og, od = oracles.ac_losses(tl(real.adv_logit), tl(real.class_logits), tl(fake.adv_logit),
                               tl(fake.class_logits), tl(labels))
    assert abs(g.item() - og) < 1e-12 and abs(d.item() - od) < 1e-12
    assert torch.isclose(ac_losses_generator(fake, labels), g)


def test_ac_loss_uniform_classifier(f64):
    N, C = 4, 6
    out = ObjectDiscOutput(torch.zeros(N), torch.zeros(N, C))
    g, d = ac_losses(out, out, torch.arange(N))
    assert abs(g.item() - torch.log(torch.tensor(6.0)).item()) < 1e-12
    assert abs(d.item() - (2 + 2 * torch.log(torch.tensor(6.0)).item())) < 1e-12


def test_perceptual_matches_oracle(f64):
    real, fake = torch.randn(3, 2, 4, 4), torch.randn(3, 2, 4, 4)

    def ext(x):
        return [x, torch.nn.functional.avg_pool2d(x, 2)]

    got = perceptual_loss(real, fake, ext)
    fr, ff = ext(real), ext(fake)
    want = oracles.perceptual([[oracles.flat(tl(s)) for s in t] for t in fr],
                              [[oracles.flat(tl(s)) for s in t] for t in ff])
    assert abs(got.item() - want) < 1e-12


@given(st.integers(0, 10_000))
def test_perceptual_is_a_semimetric(seed):
    g = torch.Generator().manual_seed(seed)
    ext = RandomFeatureExtractor(seed=seed % 7)
    a, b = torch.rand(2, 3, 16, 16, generator=g) * 2 - 1, torch.rand(2, 3, 16, 16, generator=g) * 2 - 1
    assert perceptual_loss(a, a, ext).item() == 0
    assert perceptual_loss(a, b, ext).item() >= 0
    assert abs(perceptual_loss(a, b, ext).item() - perceptual_loss(b, a, ext).item()) < 1e-6


def test_random_extractor_is_frozen_and_fixed():
    a, b = RandomFeatureExtractor(seed=3), RandomFeatureExtractor(seed=3)
    assert all(not p.requires_grad for p in a.parameters())
    a.train()
    assert not a.training
    x = torch.randn(1, 3, 32, 32)
    assert all(torch.equal(u, v) for u, v in zip(a(x), b(x)))
    assert [t.shape[1] for t in a(x)] == [16, 32, 64]


def test_perceptual_gradient_flows_to_fake_only():
    ext = build_extractor("random")
    real, fake = torch.randn(2, 3, 16, 16, requires_grad=True), torch.randn(2, 3, 16, 16, requires_grad=True)
    perceptual_loss(real.detach(), fake, ext).backward()
    assert fake.grad is not None and fake.grad.abs().sum() > 0 and real.grad is None


def test_unknown_extractor():
    with pytest.raises(ValueError):
        build_extractor("resnet")
