"""Adversarial, auxiliary-classifier and perceptual losses."""

from __future__ import annotations

from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .discriminators import ObjectDiscOutput


def gan_losses(real_logits: Sequence[torch.Tensor], fake_logits: Sequence[torch.Tensor]):
    """Hinge losses summed over the patch discriminators.

    Returns ``(L_G, L_D)`` with ``L_G = -sum_i mean(D_i(fake))`` and
    ``L_D = sum_i [mean(relu(1 - D_i(real))) + mean(relu(1 + D_i(fake)))]``.
    """
    loss_g = -sum(f.mean() for f in fake_logits)
    loss_d = sum(hinge_d(r, f) for r, f in zip(real_logits, fake_logits))
    return loss_g, loss_d


def hinge_d(real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    return F.relu(1 - real).mean() + F.relu(1 + fake).mean()


def ac_losses(real: ObjectDiscOutput, fake: ObjectDiscOutput, labels: torch.Tensor):
    """AC-GAN object losses ``(L_G^AC, L_D^AC)``.

    Both players get the cross-entropy on fake crops; the discriminator also
    classifies real crops and takes the hinge on its adversarial head.
    """
    ce_fake = F.cross_entropy(fake.class_logits, labels)
    loss_g = -fake.adv_logit.mean() + ce_fake
    loss_d = hinge_d(real.adv_logit, fake.adv_logit) + F.cross_entropy(real.class_logits, labels) + ce_fake
    return loss_g, loss_d


def ac_losses_generator(fake: ObjectDiscOutput, labels: torch.Tensor) -> torch.Tensor:
    return -fake.adv_logit.mean() + F.cross_entropy(fake.class_logits, labels)


def perceptual_loss(real: torch.Tensor, fake: torch.Tensor,
                    extractor: Callable[[torch.Tensor], list[torch.Tensor]]) -> torch.Tensor:
    """Sum over tap layers of the per-sample L1 feature distance divided by the layer size, batch-averaged."""
    total = real.new_zeros(())
    for fr, ff in zip(extractor(real), extractor(fake)):
        total = total + (fr - ff).abs().flatten(1).sum(1).div(fr[0].numel()).mean()
    return total


class RandomFeatureExtractor(nn.Module):
    """Frozen conv stack with fixed random weights; each block's output is a tap."""

    def __init__(self, widths: Sequence[int] = (16, 32, 64), seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        blocks = []
        ch = 3
        for w in widths:
            conv = nn.Conv2d(ch, w, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (ch * 9)) ** 0.5)
                conv.bias.zero_()
            blocks.append(nn.Sequential(conv, nn.ReLU()))
            ch = w
        self.blocks = nn.ModuleList(blocks)
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        taps = []
        for block in self.blocks:
            x = block(x)
            taps.append(x)
        return taps


class VGGFeatureExtractor(nn.Module):
    """ImageNet VGG19 taps at relu1_1 .. relu5_1 (weights downloaded by torchvision)."""

    taps = (1, 6, 11, 20, 29)

    def __init__(self):
        super().__init__()
        from torchvision.models import VGG19_Weights, vgg19

        self.features = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features[: max(self.taps) + 1]
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x):
        x = ((x + 1) / 2 - self.mean) / self.std
        out = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.taps:
                out.append(x)
        return out


def build_extractor(kind: str = "random", seed: int = 1234) -> nn.Module:
    if kind == "random":
        return RandomFeatureExtractor(seed=seed)
    if kind == "vgg19":
        return VGGFeatureExtractor()
    raise ValueError(f"unknown perceptual extractor {kind!r}")
