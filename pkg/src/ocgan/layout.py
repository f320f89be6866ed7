"""Layout domain model and the rasterizations derived from it.

Boxes are normalized ``(x0, y0, x1, y1)``. At a given raster size a box covers
the half-open pixel range ``[floor(x0*W), ceil(x1*W))`` (same for rows), clamped
to the canvas, so thin objects never disappear. A box whose pixel range comes
out empty is expanded to the single pixel under its rounded center.

Images are channels-first tensors throughout (``3 x H x W``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F

LAYOUT_SCHEMA_VERSION = 1

# absorbs float noise such as 0.3 * 10 = 3.0000000000000004
_ROUND_EPS = 1e-9


class LayoutError(ValueError):
    """Raised when a layout or one of its boxes violates an invariant."""


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class BoundingBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        coords = (self.x0, self.y0, self.x1, self.y1)
        if not all(math.isfinite(c) and 0.0 <= c <= 1.0 for c in coords):
            raise LayoutError(f"box coordinates must lie in [0, 1], got {coords}")
        if not self.x0 < self.x1:
            raise LayoutError(f"box violates x0 < x1: {coords}")
        if not self.y0 < self.y1:
            raise LayoutError(f"box violates y0 < y1: {coords}")

    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    def contains(self, other: "BoundingBox") -> bool:
        """Non-strict containment of ``other`` inside this box."""
        return (self.x0 <= other.x0 and self.y0 <= other.y0
                and other.x1 <= self.x1 and other.y1 <= self.y1)


@dataclass(frozen=True)
class ObjectInstance:
    class_id: int
    box: BoundingBox
    instance_index: int

    def __post_init__(self):
        if self.class_id < 0:
            raise LayoutError(f"class_id must be non-negative, got {self.class_id}")


@dataclass(frozen=True)
class Layout:
    """An ordered list of object instances on a ``(height, width)`` canvas."""

    objects: tuple[ObjectInstance, ...]
    canvas: tuple[int, int] = (64, 64)

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "canvas", tuple(int(c) for c in self.canvas))
        if len(self.objects) < 1:
            raise LayoutError("a layout needs at least one object")
        if len(self.canvas) != 2 or not all(_is_pow2(c) and c >= 32 for c in self.canvas):
            raise LayoutError(f"canvas dimensions must be powers of two >= 32, got {self.canvas}")
        indices = [o.instance_index for o in self.objects]
        if len(set(indices)) != len(indices):
            raise LayoutError(f"instance_index values must be unique, got {indices}")

    def __len__(self) -> int:
        return len(self.objects)

    @classmethod
    def from_boxes(cls, classes: Sequence[int], boxes: Sequence[Sequence[float]],
                   canvas: tuple[int, int] = (64, 64)) -> "Layout":
        if len(classes) != len(boxes):
            raise LayoutError(f"{len(classes)} classes but {len(boxes)} boxes")
        objects = tuple(
            ObjectInstance(int(c), BoundingBox(*map(float, b)), i)
            for i, (c, b) in enumerate(zip(classes, boxes))
        )
        return cls(objects, canvas)

    @property
    def class_ids(self) -> list[int]:
        return [o.class_id for o in self.objects]

    @property
    def boxes(self) -> list[tuple[float, float, float, float]]:
        return [o.box.as_tuple() for o in self.objects]

    def validate(self, num_classes: int | None = None, max_objects: int | None = None) -> None:
        if max_objects is not None and len(self.objects) > max_objects:
            raise LayoutError(f"layout has {len(self.objects)} objects, max_objects is {max_objects}")
        if num_classes is not None:
            for o in self.objects:
                if o.class_id >= num_classes:
                    raise LayoutError(f"unknown class {o.class_id} (vocabulary size {num_classes})")

    def permuted(self, order: Sequence[int]) -> "Layout":
        """Reorder objects; instance indices are renumbered to the new positions."""
        objs = [self.objects[i] for i in order]
        return Layout.from_boxes([o.class_id for o in objs], [o.box.as_tuple() for o in objs], self.canvas)

    def to_dict(self) -> dict:
        return {
            "canvas": list(self.canvas),
            "objects": [{"class": o.class_id, "box": list(o.box.as_tuple())} for o in self.objects],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Layout":
        try:
            canvas = tuple(d["canvas"])
            objs = d["objects"]
            classes = [o["class"] for o in objs]
            boxes = [o["box"] for o in objs]
        except (KeyError, TypeError) as exc:
            raise LayoutError(f"malformed layout record: missing {exc}") from exc
        for c in classes:
            if not isinstance(c, int) or isinstance(c, bool):
                raise LayoutError(f"class must be an integer, got {c!r}")
        for b in boxes:
            if not isinstance(b, (list, tuple)) or len(b) != 4:
                raise LayoutError(f"box must have 4 coordinates, got {b!r}")
        return cls.from_boxes(classes, boxes, canvas)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Layout":
        return cls.from_dict(json.loads(text))


def save_layouts(layouts: Iterable[Layout], path: str | Path) -> None:
    payload = {"version": LAYOUT_SCHEMA_VERSION, "layouts": [l.to_dict() for l in layouts]}
    Path(path).write_text(json.dumps(payload, indent=1))


def load_layouts(path: str | Path) -> list[Layout]:
    """Read a single layout, a list of layouts, or a versioned ``{"layouts": [...]}`` file."""
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict) and "layouts" in data:
        data = data["layouts"]
    if isinstance(data, dict):
        data = [data]
    return [Layout.from_dict(d) for d in data]


# ---------------------------------------------------------------------------
# pixel geometry


def pixel_extent(box: Sequence[float], H: int, W: int) -> tuple[int, int, int, int]:
    """Half-open pixel extent ``(r0, r1, c0, c1)`` of a normalized box."""
    x0, y0, x1, y1 = (float(v) for v in box)
    r0, r1 = _axis_extent(y0, y1, H)
    c0, c1 = _axis_extent(x0, x1, W)
    return r0, r1, c0, c1


def _axis_extent(lo: float, hi: float, n: int) -> tuple[int, int]:
    a = min(max(math.floor(lo * n + _ROUND_EPS), 0), n)
    b = min(max(math.ceil(hi * n - _ROUND_EPS), 0), n)
    if b <= a:
        c = min(max(int(round(0.5 * (lo + hi) * n - 0.5)), 0), n - 1)
        a, b = c, c + 1
    return a, b


@dataclass
class LayoutTensors:
    """A batch of layouts padded to a common object count.

    ``classes`` is ``(B, O)`` with ``-1`` marking padding; ``boxes`` is ``(B, O, 4)``.
    """

    classes: torch.Tensor
    boxes: torch.Tensor
    canvas: tuple[int, int] = (64, 64)
    layouts: list[Layout] = field(default_factory=list, repr=False)
    _extents: dict = field(default_factory=dict, init=False, repr=False)

    @classmethod
    def from_layouts(cls, layouts: Sequence[Layout], max_objects: int | None = None,
                     device: torch.device | str | None = None) -> "LayoutTensors":
        if not layouts:
            raise LayoutError("empty layout batch")
        n_obj = max(len(l) for l in layouts)
        if max_objects is not None:
            if n_obj > max_objects:
                raise LayoutError(f"layout has {n_obj} objects, max_objects is {max_objects}")
            n_obj = max_objects
        classes = torch.full((len(layouts), n_obj), -1, dtype=torch.long)
        boxes = torch.zeros(len(layouts), n_obj, 4, dtype=torch.float64)
        for b, layout in enumerate(layouts):
            for o, obj in enumerate(layout.objects):
                classes[b, o] = obj.class_id
                boxes[b, o] = torch.tensor(obj.box.as_tuple(), dtype=torch.float64)
        return cls(classes.to(device), boxes.to(device), layouts[0].canvas, list(layouts))

    @property
    def valid(self) -> torch.Tensor:
        return self.classes >= 0

    @property
    def batch_size(self) -> int:
        return self.classes.shape[0]

    def pixel_boxes(self, H: int, W: int) -> torch.Tensor:
        """Integer pixel extents ``(B, O, 4)`` as ``(r0, r1, c0, c1)``; padding rows are zero."""
        if (H, W) not in self._extents:
            rows = [[[0, 0, 0, 0]] * self.classes.shape[1] for _ in range(self.batch_size)]
            for b, layout in enumerate(self.layouts):
                for o, obj in enumerate(layout.objects):
                    rows[b][o] = list(pixel_extent(obj.box.as_tuple(), H, W))
            self._extents[(H, W)] = torch.tensor(rows, dtype=torch.long, device=self.classes.device)
        return self._extents[(H, W)]


def box_indicators(lt: LayoutTensors, H: int, W: int) -> torch.Tensor:
    """Binary ``(B, O, H, W)`` coverage of each object's pixel box."""
    pb = lt.pixel_boxes(H, W)
    ys = torch.arange(H, device=pb.device).view(1, 1, H, 1)
    xs = torch.arange(W, device=pb.device).view(1, 1, 1, W)
    r0, r1, c0, c1 = (pb[..., k, None, None] for k in range(4))
    ind = (ys >= r0) & (ys < r1) & (xs >= c0) & (xs < c1)
    return ind & lt.valid[..., None, None]


def boundary_indicators(lt: LayoutTensors, H: int, W: int) -> torch.Tensor:
    """Binary ``(B, O, H, W)`` 1-pixel perimeters of each object's pixel box."""
    pb = lt.pixel_boxes(H, W)
    ys = torch.arange(H, device=pb.device).view(1, 1, H, 1)
    xs = torch.arange(W, device=pb.device).view(1, 1, 1, W)
    r0, r1, c0, c1 = (pb[..., k, None, None] for k in range(4))
    inside = (ys >= r0) & (ys < r1) & (xs >= c0) & (xs < c1)
    edge = (ys == r0) | (ys == r1 - 1) | (xs == c0) | (xs == c1 - 1)
    return inside & edge & lt.valid[..., None, None]


def rasterize_onehot_batch(lt: LayoutTensors, H: int, W: int, num_classes: int,
                           dtype: torch.dtype = torch.float32) -> torch.Tensor:
    ind = box_indicators(lt, H, W).to(dtype)
    onehot = F.one_hot(lt.classes.clamp(min=0), num_classes).to(dtype) * lt.valid[..., None].to(dtype)
    counts = torch.einsum("bohw,boc->bchw", ind, onehot)
    return (counts > 0).to(dtype)


def instance_boundary_map_batch(lt: LayoutTensors, H: int, W: int,
                                dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return boundary_indicators(lt, H, W).any(dim=1, keepdim=True).to(dtype)


def rasterize_onehot(layout: Layout, H: int, W: int, num_classes: int,
                     dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """``C x H x W`` class raster: 1 wherever some box of that class covers the pixel."""
    if H <= 0 or W <= 0:
        raise ValueError(f"raster size must be positive, got {H}x{W}")
    layout.validate(num_classes=num_classes)
    return rasterize_onehot_batch(LayoutTensors.from_layouts([layout]), H, W, num_classes, dtype)[0]


def instance_boundary_map(layout: Layout, H: int, W: int,
                          dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """``1 x H x W`` union of the 1-pixel perimeters of every object's box."""
    if H <= 0 or W <= 0:
        raise ValueError(f"raster size must be positive, got {H}x{W}")
    return instance_boundary_map_batch(LayoutTensors.from_layouts([layout]), H, W, dtype)[0]


# ---------------------------------------------------------------------------
# crops


def crop_boxes(images: torch.Tensor, lt: LayoutTensors, out_size: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Bilinear crops of every valid object, in batch-then-layout order.

    Returns ``(crops, labels, image_index)`` with crops ``(N, 3, out_size, out_size)``.
    Differentiable w.r.t. ``images``.
    """
    B, _, H, W = images.shape
    if B != lt.batch_size:
        raise ValueError(f"{B} images for {lt.batch_size} layouts")
    pb = lt.pixel_boxes(H, W).tolist()
    valid = lt.valid.tolist()
    crops, labels, owners = [], [], []
    for b in range(B):
        for o, ok in enumerate(valid[b]):
            if not ok:
                continue
            r0, r1, c0, c1 = pb[b][o]
            region = images[b:b + 1, :, r0:r1, c0:c1]
            crops.append(F.interpolate(region, size=(out_size, out_size), mode="bilinear", align_corners=False))
            labels.append(int(lt.classes[b, o]))
            owners.append(b)
    if not crops:
        return (images.new_zeros(0, images.shape[1], out_size, out_size),
                torch.zeros(0, dtype=torch.long), torch.zeros(0, dtype=torch.long))
    device = images.device
    return (torch.cat(crops), torch.tensor(labels, device=device), torch.tensor(owners, device=device))


def crop_objects(image: torch.Tensor, layout: Layout, out_size: int) -> torch.Tensor:
    """Crop each object of ``layout`` from a ``3 x H x W`` image, resized to ``out_size``."""
    if tuple(image.shape[-2:]) != tuple(layout.canvas):
        raise LayoutError(f"image size {tuple(image.shape[-2:])} does not match canvas {layout.canvas}")
    crops, _, _ = crop_boxes(image.unsqueeze(0), LayoutTensors.from_layouts([layout]), out_size)
    return crops


# ---------------------------------------------------------------------------
# conditioning


@dataclass
class ConditioningStack:
    """Per-pixel generator condition: embedding, one-hot and boundary blocks."""

    tensor: torch.Tensor
    blocks: dict[str, slice]

    @property
    def embedding(self) -> torch.Tensor:
        return self.tensor[..., self.blocks["embedding"], :, :]

    @property
    def onehot(self) -> torch.Tensor:
        return self.tensor[..., self.blocks["onehot"], :, :]

    @property
    def boundary(self) -> torch.Tensor:
        return self.tensor[..., self.blocks["boundary"], :, :]


def stack_blocks(embedding_dim: int, num_classes: int, with_boundary: bool = True) -> dict[str, slice]:
    blocks = {
        "embedding": slice(0, embedding_dim),
        "onehot": slice(embedding_dim, embedding_dim + num_classes),
    }
    if with_boundary:
        blocks["boundary"] = slice(embedding_dim + num_classes, embedding_dim + num_classes + 1)
    return blocks


def paste_masks(lt: LayoutTensors, masks: torch.Tensor, H: int, W: int) -> torch.Tensor:
    """Resize each ``(B, O, h, w)`` soft mask into its object's pixel box on an ``H x W`` canvas."""
    B, O = lt.classes.shape
    pb = lt.pixel_boxes(H, W).to(masks.dtype)
    r0, r1, c0, c1 = pb.unbind(-1)
    xs = torch.arange(W, device=masks.device, dtype=masks.dtype) + 0.5
    ys = torch.arange(H, device=masks.device, dtype=masks.dtype) + 0.5
    # normalized [-1, 1] sampling coordinates inside each box (align_corners=False convention)
    # padding rows have empty extents; clamp keeps them finite, box_indicators zeroes them
    gx = 2 * (xs.view(1, 1, W) - c0[..., None]) / (c1 - c0).clamp(min=1)[..., None] - 1  # (B, O, W)
    gy = 2 * (ys.view(1, 1, H) - r0[..., None]) / (r1 - r0).clamp(min=1)[..., None] - 1  # (B, O, H)
    grid = torch.stack(torch.broadcast_tensors(gx[:, :, None, :], gy[:, :, :, None]), dim=-1)
    sampled = F.grid_sample(masks.reshape(B * O, 1, *masks.shape[-2:]), grid.reshape(B * O, H, W, 2),
                            mode="bilinear", padding_mode="border", align_corners=False)
    return sampled.view(B, O, H, W) * box_indicators(lt, H, W).to(masks.dtype)


def build_conditioning_batch(lt: LayoutTensors, embeddings: torch.Tensor, masks: torch.Tensor,
                             H: int, W: int, num_classes: int,
                             with_boundary: bool = True) -> torch.Tensor:
    """Batched conditioning tensor ``(B, E + C [+ 1], H, W)``."""
    B, O = lt.classes.shape
    if embeddings.shape[:2] != (B, O) or masks.shape[:2] != (B, O):
        raise ValueError(
            f"expected embeddings/masks for {B}x{O} objects, got {tuple(embeddings.shape)} / {tuple(masks.shape)}")
    dtype = embeddings.dtype
    pasted = paste_masks(lt, masks.to(dtype), H, W)
    emb_block = torch.einsum("boe,bohw->behw", embeddings * lt.valid[..., None].to(dtype), pasted)
    parts = [emb_block, rasterize_onehot_batch(lt, H, W, num_classes, dtype)]
    if with_boundary:
        parts.append(instance_boundary_map_batch(lt, H, W, dtype))
    return torch.cat(parts, dim=1)


def build_conditioning(layout: Layout, object_embeddings: torch.Tensor, soft_masks: torch.Tensor,
                       H: int, W: int, num_classes: int, with_boundary: bool = True) -> ConditioningStack:
    """Assemble the per-pixel condition for one layout.

    ``object_embeddings`` is ``|objects| x E``; ``soft_masks`` is ``|objects| x h x w`` in [0, 1].
    Overlapping objects add their masked embeddings.
    """
    n = len(layout)
    if object_embeddings.ndim != 2 or object_embeddings.shape[0] != n:
        raise LayoutError(f"need {n} object embeddings, got shape {tuple(object_embeddings.shape)}")
    if soft_masks.ndim != 3 or soft_masks.shape[0] != n:
        raise LayoutError(f"need {n} soft masks, got shape {tuple(soft_masks.shape)}")
    layout.validate(num_classes=num_classes)
    lt = LayoutTensors.from_layouts([layout])
    t = build_conditioning_batch(lt, object_embeddings[None], soft_masks[None], H, W, num_classes, with_boundary)
    return ConditioningStack(t[0], stack_blocks(object_embeddings.shape[1], num_classes, with_boundary))
