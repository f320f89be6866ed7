"""Layout-conditioned patch discriminators and the AC-GAN object discriminator."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .generator import sn
from .layout import LayoutTensors, crop_boxes, rasterize_onehot_batch

OBJECT_CROP_SIZE = 32


@dataclass
class PatchDiscOutput:
    logits: torch.Tensor  # (B, 1, h, w)


@dataclass
class ObjectDiscOutput:
    adv_logit: torch.Tensor     # (N,)
    class_logits: torch.Tensor  # (N, C)


class PatchDiscriminator(nn.Module):
    """Image concatenated with its one-hot layout raster, scored per patch.

    ``depth`` stride-2 blocks, so the score map is ``input / 2**depth``.
    """

    def __init__(self, num_classes: int, width: int = 64, depth: int = 4,
                 padding_mode: str = "zeros", use_sn: bool = True):
        super().__init__()
        self.num_classes = num_classes
        layers = []
        ch = 3 + num_classes
        for k in range(depth):
            out = width * min(2 ** k, 8)
            layers += [sn(nn.Conv2d(ch, out, 4, stride=2, padding=1, padding_mode=padding_mode), use_sn),
                       nn.LeakyReLU(0.2)]
            ch = out
        self.body = nn.Sequential(*layers)
        self.head = sn(nn.Conv2d(ch, 1, 3, padding=1, padding_mode=padding_mode), use_sn)

    def forward(self, image: torch.Tensor, raster: torch.Tensor) -> torch.Tensor:
        if image.shape[-2:] != raster.shape[-2:] or image.shape[0] != raster.shape[0]:
            raise ValueError(f"image {tuple(image.shape)} and raster {tuple(raster.shape)} do not line up")
        if raster.shape[1] != self.num_classes:
            raise ValueError(f"expected a {self.num_classes}-channel raster, got {raster.shape[1]}")
        return self.head(self.body(torch.cat([image, raster.to(image.dtype)], dim=1)))


class MultiScalePatchDiscriminator(nn.Module):
    """Two independent patch discriminators: full resolution and 2x downsampled."""

    def __init__(self, num_classes: int, width: int = 64, depth: int = 4,
                 padding_mode: str = "zeros", use_sn: bool = True):
        super().__init__()
        self.num_classes = num_classes
        self.d1 = PatchDiscriminator(num_classes, width, depth, padding_mode, use_sn)
        self.d2 = PatchDiscriminator(num_classes, width, depth, padding_mode, use_sn)

    def scale(self, index: int) -> PatchDiscriminator:
        return {1: self.d1, 2: self.d2}[index]

    def forward(self, image: torch.Tensor, lt: LayoutTensors, scales=(1, 2)) -> list[torch.Tensor]:
        outs = []
        for index in scales:
            outs.append(patch_disc(image, lt, index, self))
        return outs


def patch_disc(image: torch.Tensor, layout: LayoutTensors | torch.Tensor, scale_index: int,
               discs: MultiScalePatchDiscriminator) -> torch.Tensor:
    """Score map from discriminator ``scale_index`` (1: full resolution, 2: half).

    ``layout`` is either a layout batch (rasterized at the right size here) or an
    already rasterized full-resolution one-hot tensor.
    """
    if scale_index not in (1, 2):
        raise ValueError(f"scale_index must be 1 or 2, got {scale_index}")
    H, W = image.shape[-2:]
    if scale_index == 2:
        image = F.avg_pool2d(image, 2)
        H, W = H // 2, W // 2
    if isinstance(layout, LayoutTensors):
        raster = rasterize_onehot_batch(layout, H, W, discs.num_classes, image.dtype)
    else:
        raster = layout if scale_index == 1 else F.max_pool2d(layout, 2)
    return discs.scale(scale_index)(image, raster)


class ObjectDiscriminator(nn.Module):
    """Shared conv trunk on object crops with adversarial and class heads."""

    def __init__(self, num_classes: int, width: int = 64, use_sn: bool = True):
        super().__init__()
        chans = [3, width, 2 * width, 4 * width]
        layers = []
        for k in range(3):
            layers += [sn(nn.Conv2d(chans[k], chans[k + 1], 3, padding=1), use_sn), nn.LeakyReLU(0.2),
                       sn(nn.Conv2d(chans[k + 1], chans[k + 1], 4, stride=2, padding=1), use_sn), nn.LeakyReLU(0.2)]
        self.trunk = nn.Sequential(*layers)
        self.adv = sn(nn.Linear(chans[-1], 1), use_sn)
        self.cls = sn(nn.Linear(chans[-1], num_classes), use_sn)

    def forward(self, crops: torch.Tensor) -> ObjectDiscOutput:
        h = self.trunk(crops).sum(dim=(2, 3))
        return ObjectDiscOutput(self.adv(h)[:, 0], self.cls(h))


def object_disc(crops: torch.Tensor, disc: ObjectDiscriminator) -> ObjectDiscOutput:
    return disc(crops)


def object_crops(images: torch.Tensor, lt: LayoutTensors, size: int = OBJECT_CROP_SIZE):
    """``(crops, labels)`` for every object in the batch."""
    crops, labels, _ = crop_boxes(images, lt, size)
    return crops, labels
