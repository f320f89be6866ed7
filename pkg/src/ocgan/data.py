"""Procedural shapes dataset and COCO-style layout ingestion.

On disk a dataset is a directory with ``manifest.json`` and one subdirectory per
split; each record is ``<key>.json`` (layout schema plus an ``"image"`` file
name) next to ``<key>.png``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from .layout import LAYOUT_SCHEMA_VERSION, Layout, LayoutError

log = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle")
PALETTE = {
    "red": (225, 45, 45),
    "blue": (45, 95, 235),
    "green": (40, 190, 70),
    "yellow": (240, 215, 40),
    "magenta": (220, 60, 210),
    "cyan": (40, 215, 225),
}
SPLITS = ("train", "valid", "test")
SUPERSAMPLE = 4


@dataclass
class SyntheticConfig:
    n_images: int = 5000
    canvas: tuple[int, int] = (64, 64)
    n_classes: int = 6
    objects_per_image: tuple[int, int] = (1, 3)
    box_size: tuple[float, float] = (0.22, 0.45)
    overlap_probability: float = 0.15
    max_overlap: float = 0.3
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    max_objects: int = 8
    seed: int = 0

    def __post_init__(self):
        self.canvas = tuple(self.canvas)
        self.objects_per_image = tuple(self.objects_per_image)
        self.box_size = tuple(self.box_size)
        self.split_fractions = tuple(self.split_fractions)
        problems = []
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi <= self.max_objects:
            problems.append(f"objects_per_image {self.objects_per_image} must lie within [1, {self.max_objects}]")
        if not 1 <= self.n_classes <= len(SHAPES) * len(PALETTE):
            problems.append(f"n_classes must be in [1, {len(SHAPES) * len(PALETTE)}]")
        if not 0 < self.box_size[0] <= self.box_size[1] <= 1:
            problems.append(f"box_size {self.box_size} must satisfy 0 < min <= max <= 1")
        if not 0 <= self.overlap_probability <= 1:
            problems.append("overlap_probability must be in [0, 1]")
        if self.n_images < 1:
            problems.append("n_images must be positive")
        if abs(sum(self.split_fractions) - 1) > 1e-9:
            problems.append("split_fractions must sum to 1")
        if problems:
            raise ValueError("; ".join(problems))


def class_names(n_classes: int) -> list[str]:
    """Class ``k`` is shape ``k % 3`` in color ``k // 3``."""
    colors = list(PALETTE)
    return [f"{colors[k // len(SHAPES)]}_{SHAPES[k % len(SHAPES)]}" for k in range(n_classes)]


@dataclass
class Record:
    key: str
    layout: Layout
    image: np.ndarray | None = None   # H x W x 3 uint8
    path: Path | None = None

    def load_image(self) -> np.ndarray:
        if self.image is None:
            if self.path is None:
                raise ValueError(f"record {self.key} has neither pixels nor an image path")
            self.image = np.asarray(Image.open(self.path).convert("RGB"))
        return self.image


@dataclass
class DatasetSplit:
    train: list[Record]
    valid: list[Record]
    test: list[Record]
    class_names: list[str]
    seed: int | None = None
    stats: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Record]:
        return {"train": self.train, "valid": self.valid, "test": self.test}[name]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


# ---------------------------------------------------------------------------
# synthetic data


def _overlap_fraction(a: Sequence[float], b: Sequence[float]) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    area = min((a[2] - a[0]) * (a[3] - a[1]), (b[2] - b[0]) * (b[3] - b[1]))
    return inter / area


def _snap(v: float, n: int) -> float:
    # boxes sit on the pixel grid so rasterized extents and rendered pixels agree
    return round(v * n) / n


def sample_layout(rng: np.random.Generator, config: SyntheticConfig) -> Layout:
    H, W = config.canvas
    lo, hi = config.objects_per_image
    n_obj = int(rng.integers(lo, hi + 1))
    classes, boxes = [], []
    for _ in range(n_obj):
        if boxes and rng.random() < config.overlap_probability:
            # same-class neighbour overlapping an existing box
            ref = int(rng.integers(len(boxes)))
            x0, y0, x1, y1 = boxes[ref]
            w, h = x1 - x0, y1 - y0
            dx, dy = rng.uniform(0.3, 0.7) * w * rng.choice([-1, 1]), rng.uniform(-0.3, 0.3) * h
            nx0 = min(max(x0 + dx, 0.0), 1.0 - w)
            ny0 = min(max(y0 + dy, 0.0), 1.0 - h)
            classes.append(classes[ref])
            boxes.append((_snap(nx0, W), _snap(ny0, H), _snap(nx0 + w, W), _snap(ny0 + h, H)))
            continue
        cls = int(rng.integers(config.n_classes))
        for _attempt in range(50):
            w, h = rng.uniform(*config.box_size, size=2)
            x0, y0 = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
            box = (_snap(x0, W), _snap(y0, H), _snap(x0 + w, W), _snap(y0 + h, H))
            if all(_overlap_fraction(box, b) <= config.max_overlap for b in boxes):
                break
        classes.append(cls)
        boxes.append(box)
    return Layout.from_boxes(classes, boxes, config.canvas)


def _background(rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    """Muted low-contrast texture: a smooth gradient, soft stripes and pixel noise."""
    base = rng.uniform(90, 150, size=3)
    tilt = rng.uniform(-25, 25, size=(2, 3))
    yy, xx = np.mgrid[0:H, 0:W] / np.array([H, W]).reshape(2, 1, 1)
    img = base + yy[..., None] * tilt[0] + xx[..., None] * tilt[1]
    freq, phase, angle = rng.uniform(4, 10), rng.uniform(0, 2 * np.pi), rng.uniform(0, np.pi)
    stripes = np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
    img = img + 8 * stripes[..., None] + rng.normal(0, 4, size=(H, W, 3))
    return np.clip(img, 0, 255)


def render_layout(layout: Layout, rng: np.random.Generator, n_classes: int | None = None) -> np.ndarray:
    """Draw each object as its class's shape and color, filling its box, anti-aliased."""
    H, W = layout.canvas
    s = SUPERSAMPLE
    bg = _background(rng, H, W).astype(np.uint8)
    canvas = Image.fromarray(bg).resize((W * s, H * s), Image.Resampling.NEAREST)
    draw = ImageDraw.Draw(canvas)
    colors = list(PALETTE.values())
    for obj in layout.objects:
        shape = SHAPES[obj.class_id % len(SHAPES)]
        base = np.array(colors[obj.class_id // len(SHAPES)])
        color = tuple(int(c) for c in np.clip(base + rng.integers(-15, 16, size=3), 0, 255))
        x0, y0, x1, y1 = obj.box.as_tuple()
        # supersampled pixel corners of the box; the last pixel ends at x1*W*s - 1
        px0, py0 = x0 * W * s, y0 * H * s
        px1, py1 = x1 * W * s - 1, y1 * H * s - 1
        if shape == "circle":
            draw.ellipse((px0, py0, px1, py1), fill=color)
        elif shape == "square":
            draw.rectangle((px0, py0, px1, py1), fill=color)
        else:
            draw.polygon([(px0, py1), (px1, py1), ((px0 + px1) / 2, py0)], fill=color)
    return np.asarray(canvas.resize((W, H), Image.Resampling.BOX))


def make_synthetic_dataset(config: SyntheticConfig, render: bool = True) -> DatasetSplit:
    """Deterministic shapes dataset; the seed fixes every layout and pixel."""
    records = []
    for i in range(config.n_images):
        # independent per-record streams keep records stable under n_images changes
        rec_rng = np.random.default_rng([config.seed, i])
        layout = sample_layout(rec_rng, config)
        image = render_layout(layout, rec_rng) if render else None
        records.append(Record(f"{i:06d}", layout, image))
    n_train = int(round(config.split_fractions[0] * config.n_images))
    n_valid = int(round(config.split_fractions[1] * config.n_images))
    return DatasetSplit(records[:n_train], records[n_train:n_train + n_valid], records[n_train + n_valid:],
                        class_names(config.n_classes), config.seed, {"config": asdict(config)})


def save_dataset(split: DatasetSplit, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    for name in SPLITS:
        d = out / name
        d.mkdir(parents=True, exist_ok=True)
        for rec in split.split(name):
            payload = rec.layout.to_dict()
            payload["image"] = f"{rec.key}.png"
            Image.fromarray(rec.load_image()).save(d / f"{rec.key}.png")
            (d / f"{rec.key}.json").write_text(json.dumps(payload))
    manifest = {
        "version": LAYOUT_SCHEMA_VERSION,
        "class_names": split.class_names,
        "seed": split.seed,
        "splits": {name: [r.key for r in split.split(name)] for name in SPLITS},
        **({"config": split.stats["config"]} if "config" in split.stats else {}),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out


# ---------------------------------------------------------------------------
# loading


def _parse_record(path: Path, num_classes: int | None) -> Layout:
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise LayoutError(f"{path}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from exc
    try:
        layout = Layout.from_dict(data)
        layout.validate(num_classes=num_classes)
    except LayoutError as exc:
        raise LayoutError(f"{path}:1: {exc}") from exc
    return layout


def load_layout_dataset(root: str | Path, min_objects: int = 1, max_objects: int | None = None,
                        strict: bool = True, load_images: bool = False,
                        num_classes: int | None = None) -> DatasetSplit:
    """Read a dataset directory written by :func:`save_dataset` (or any directory of layout JSON).

    Records outside ``[min_objects, max_objects]`` are filtered and counted. Invalid
    records raise in strict mode and are skipped and counted otherwise. Records are
    ordered by file name within each split; a directory without split folders
    loads into ``train``.
    """
    root = Path(root)
    manifest_path = root / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    names = manifest.get("class_names")
    if num_classes is None and names is not None:
        num_classes = len(names)
    split_dirs = {n: root / n for n in SPLITS if (root / n).is_dir()}
    if not split_dirs:
        split_dirs = {"train": root}
    stats = {"filtered": 0, "skipped": 0, "errors": []}
    out = {n: [] for n in SPLITS}
    for name, d in split_dirs.items():
        for path in sorted(p for p in d.glob("*.json") if p.name != "manifest.json"):
            try:
                layout = _parse_record(path, num_classes)
            except LayoutError as exc:
                if strict:
                    raise
                stats["skipped"] += 1
                stats["errors"].append(str(exc))
                continue
            if len(layout) < min_objects or (max_objects is not None and len(layout) > max_objects):
                stats["filtered"] += 1
                continue
            image_name = json.loads(path.read_text()).get("image")
            rec = Record(path.stem, layout, path=(d / image_name) if image_name else None)
            if load_images and rec.path is not None:
                rec.load_image()
            out[name].append(rec)
    if names is None:
        seen = max((c for recs in out.values() for r in recs for c in r.layout.class_ids), default=-1)
        names = [str(k) for k in range(num_classes or seen + 1)]
    return DatasetSplit(out["train"], out["valid"], out["test"], list(names), manifest.get("seed"), stats)


# ---------------------------------------------------------------------------
# probes


def layout_perturbations(layout: Layout, kind: str, step: float, index: int = 0,
                         direction: tuple[float, float] = (1.0, 0.0)) -> Layout:
    """Edited copies of a layout for qualitative probes.

    ``converge_boxes``: every box center moves a fraction ``step`` of the way to the
    canvas center, sizes unchanged. ``remove_object``: drops object ``index``.
    ``move_object``: shifts object ``index`` by ``step * direction`` (normalized units),
    clamped to the canvas.
    """
    classes, boxes = layout.class_ids, layout.boxes
    if kind == "converge_boxes":
        if not 0 <= step <= 1:
            raise ValueError(f"converge step must be in [0, 1], got {step}")
        new = []
        for x0, y0, x1, y1 in boxes:
            # translate rather than rebuild, so step 0 is an exact no-op
            dx = step * (0.5 - (x0 + x1) / 2)
            dy = step * (0.5 - (y0 + y1) / 2)
            new.append((x0 + dx, y0 + dy, x1 + dx, y1 + dy))
        return Layout.from_boxes(classes, [_clip_box(b) for b in new], layout.canvas)
    if kind == "remove_object":
        if len(layout) == 1:
            raise LayoutError("cannot remove the only object of a layout")
        keep = [k for k in range(len(layout)) if k != index]
        return Layout.from_boxes([classes[k] for k in keep], [boxes[k] for k in keep], layout.canvas)
    if kind == "move_object":
        x0, y0, x1, y1 = boxes[index]
        dx = min(max(step * direction[0], -x0), 1 - x1)
        dy = min(max(step * direction[1], -y0), 1 - y1)
        boxes = list(boxes)
        boxes[index] = _clip_box((x0 + dx, y0 + dy, x1 + dx, y1 + dy))
        return Layout.from_boxes(classes, boxes, layout.canvas)
    raise ValueError(f"unknown perturbation {kind!r}")


def _clip_box(b):
    # guards float drift just outside [0, 1]
    return tuple(min(max(v, 0.0), 1.0) for v in b)


def converging_sequence(layout: Layout, steps: int) -> list[Layout]:
    return [layout_perturbations(layout, "converge_boxes", k / (steps - 1)) for k in range(steps)]


def records_to_arrays(records: Sequence[Record]):
    """``(images uint8 N x H x W x 3, layouts)`` for a list of records."""
    return np.stack([r.load_image() for r in records]), [r.layout for r in records]
