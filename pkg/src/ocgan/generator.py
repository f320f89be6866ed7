"""Residual decoder with instance-aware, per-pixel conditional batch norm."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

from .layout import Layout, LayoutError, LayoutTensors, build_conditioning_batch

SUPPORTED_SIZES = (32, 64, 128)


def sn(module: nn.Module, enabled: bool = True) -> nn.Module:
    return spectral_norm(module) if enabled else module


@dataclass
class GeneratorConfig:
    num_classes: int
    image_size: int = 64
    noise_dim: int = 128
    embedding_dim: int = 64
    base_channels: int = 64
    mask_size: int = 16
    cond_hidden: int = 64
    max_objects: int = 8
    use_instance_boundaries: bool = True
    per_block_noise: bool = False
    spectral_norm: bool = True

    def __post_init__(self):
        problems = []
        if self.image_size == 256:
            problems.append("image_size 256 is not supported at desk scale (use 64 or 128)")
        elif self.image_size not in SUPPORTED_SIZES:
            problems.append(f"image_size must be one of {SUPPORTED_SIZES}, got {self.image_size}")
        for name in ("num_classes", "noise_dim", "embedding_dim", "base_channels", "cond_hidden", "max_objects"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be positive")
        if self.mask_size < 4 or self.mask_size & (self.mask_size - 1):
            problems.append("mask_size must be a power of two >= 4")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def n_res_blocks(self) -> int:
        # image_size = 32 * 2 ** (n_res_blocks - 3)
        return int(math.log2(self.image_size // 32)) + 3

    @property
    def cond_channels(self) -> int:
        return self.embedding_dim + self.num_classes + int(self.use_instance_boundaries)

    def channel_schedule(self) -> list[int]:
        n = self.n_res_blocks
        mults = [min(2 ** (n - k), 16) for k in range(n + 1)]
        return [self.base_channels * m for m in mults]


class MaskNet(nn.Module):
    """Object embedding to a soft ``mask_size x mask_size`` shape mask."""

    def __init__(self, embedding_dim: int, mask_size: int = 16, hidden: int = 32, use_sn: bool = True):
        super().__init__()
        self.mask_size = mask_size
        self.hidden = hidden
        self.fc = sn(nn.Linear(embedding_dim, hidden * 16), use_sn)
        ups = []
        for _ in range(int(math.log2(mask_size // 4))):
            ups += [nn.Upsample(scale_factor=2, mode="nearest"), sn(nn.Conv2d(hidden, hidden, 3, padding=1), use_sn), nn.ReLU()]
        self.body = nn.Sequential(*ups)
        self.out = sn(nn.Conv2d(hidden, 1, 3, padding=1), use_sn)

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.fc(emb)).view(-1, self.hidden, 4, 4)
        return torch.sigmoid(self.out(self.body(x)))[:, 0]


def mask_net(object_embedding: torch.Tensor, net: MaskNet) -> torch.Tensor:
    """Soft mask ``(h, w)`` for one embedding vector (or ``(N, h, w)`` for a batch)."""
    if object_embedding.ndim == 1:
        return net(object_embedding[None])[0]
    return net(object_embedding)


class ConditionalNorm(nn.Module):
    """Batch norm whose scale and shift are per-pixel maps computed from the condition.

    ``out = bn(x) * (1 + gamma(cond)) + beta(cond)``; ``cond`` must already match the
    spatial size of ``x``. On a single device ``BatchNorm2d`` statistics are the
    synchronized statistics; wrap with ``nn.SyncBatchNorm.convert_sync_batchnorm``
    for data-parallel runs.
    """

    def __init__(self, channels: int, cond_channels: int, hidden: int = 64, use_sn: bool = True):
        super().__init__()
        self.channels = channels
        self.cond_channels = cond_channels
        self.bn = nn.BatchNorm2d(channels, affine=False)
        self.shared = nn.Sequential(sn(nn.Conv2d(cond_channels, hidden, 3, padding=1), use_sn), nn.ReLU())
        self.gamma = sn(nn.Conv2d(hidden, channels, 3, padding=1), use_sn)
        self.beta = sn(nn.Conv2d(hidden, channels, 3, padding=1), use_sn)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} feature channels, got {x.shape[1]}")
        if cond.shape[1] != self.cond_channels:
            raise ValueError(f"expected {self.cond_channels} condition channels, got {cond.shape[1]}")
        if cond.shape[-2:] != x.shape[-2:]:
            raise ValueError(f"condition size {tuple(cond.shape[-2:])} does not match features {tuple(x.shape[-2:])}")
        h = self.shared(cond)
        return self.bn(x) * (1 + self.gamma(h)) + self.beta(h)


def conditional_norm(features: torch.Tensor, stack: torch.Tensor, norm: ConditionalNorm) -> torch.Tensor:
    return norm(features, stack)


class ResBlockUp(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, cond_ch: int, cond_hidden: int,
                 noise_dim: int | None = None, use_sn: bool = True):
        super().__init__()
        self.norm1 = ConditionalNorm(in_ch, cond_ch, cond_hidden, use_sn)
        self.conv1 = sn(nn.Conv2d(in_ch, out_ch, 3, padding=1), use_sn)
        self.norm2 = ConditionalNorm(out_ch, cond_ch, cond_hidden, use_sn)
        self.conv2 = sn(nn.Conv2d(out_ch, out_ch, 3, padding=1), use_sn)
        self.shortcut = None if in_ch == out_ch else sn(nn.Conv2d(in_ch, out_ch, 1), use_sn)
        self.noise_proj = sn(nn.Linear(noise_dim, out_ch), use_sn) if noise_dim else None

    def forward(self, x, cond_in, cond_out, z=None):
        h = F.interpolate(F.relu(self.norm1(x, cond_in)), scale_factor=2, mode="nearest")
        h = self.conv1(h)
        if self.noise_proj is not None:
            h = h + self.noise_proj(z)[:, :, None, None]
        h = self.conv2(F.relu(self.norm2(h, cond_out)))
        skip = F.interpolate(x, scale_factor=2, mode="nearest")
        if self.shortcut is not None:
            skip = self.shortcut(skip)
        return skip + h


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = c = config
        use_sn = c.spectral_norm
        chans = c.channel_schedule()
        self.class_embedding = sn(nn.Embedding(c.num_classes, c.embedding_dim), use_sn)
        self.mask_net = MaskNet(c.embedding_dim, c.mask_size, c.cond_hidden, use_sn)
        self.fc = sn(nn.Linear(c.noise_dim, chans[0] * 16), use_sn)
        self.blocks = nn.ModuleList(
            ResBlockUp(chans[k], chans[k + 1], c.cond_channels, c.cond_hidden,
                       c.noise_dim if c.per_block_noise else None, use_sn)
            for k in range(c.n_res_blocks)
        )
        self.final_bn = nn.BatchNorm2d(chans[-1], affine=False)
        self.to_rgb = sn(nn.Conv2d(chans[-1], 3, 3, padding=1), use_sn)

    def object_embeddings(self, lt: LayoutTensors) -> torch.Tensor:
        return self.class_embedding(lt.classes.clamp(min=0))

    def soft_masks(self, emb: torch.Tensor) -> torch.Tensor:
        B, O, E = emb.shape
        return self.mask_net(emb.reshape(B * O, E)).view(B, O, self.config.mask_size, self.config.mask_size)

    def conditioning(self, lt: LayoutTensors, size: int, emb=None, masks=None) -> torch.Tensor:
        if emb is None:
            emb = self.object_embeddings(lt)
        if masks is None:
            masks = self.soft_masks(emb)
        return build_conditioning_batch(lt, emb, masks, size, size, self.config.num_classes,
                                        self.config.use_instance_boundaries)

    def forward(self, lt: LayoutTensors, z: torch.Tensor) -> torch.Tensor:
        c = self.config
        if lt.classes.shape[1] > c.max_objects and int(lt.valid.sum(1).max()) > c.max_objects:
            raise LayoutError(f"layout exceeds max_objects={c.max_objects}")
        if z.shape != (lt.batch_size, c.noise_dim):
            raise ValueError(f"noise must be ({lt.batch_size}, {c.noise_dim}), got {tuple(z.shape)}")
        emb = self.object_embeddings(lt)
        masks = self.soft_masks(emb)
        conds = {}

        def cond(size):
            if size not in conds:
                conds[size] = self.conditioning(lt, size, emb, masks)
            return conds[size]

        x = self.fc(z).view(z.shape[0], -1, 4, 4)
        size = 4
        for block in self.blocks:
            x = block(x, cond(size), cond(2 * size), z)
            size *= 2
        return torch.tanh(self.to_rgb(F.relu(self.final_bn(x))))


def generate(layout: Layout | list[Layout], noise: torch.Tensor, generator: Generator) -> torch.Tensor:
    """Images in [-1, 1] for one layout (``3 x S x S``) or a list of layouts (``B x 3 x S x S``)."""
    single = isinstance(layout, Layout)
    layouts = [layout] if single else list(layout)
    for l in layouts:
        l.validate(num_classes=generator.config.num_classes, max_objects=generator.config.max_objects)
    device = next(generator.parameters()).device
    lt = LayoutTensors.from_layouts(layouts, device=device)
    z = noise[None] if single else noise
    out = generator(lt, z.to(device))
    return out[0] if single else out


def generator_config_dict(config: GeneratorConfig) -> dict:
    return asdict(config)
