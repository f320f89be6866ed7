"""Image-quality metrics: FID, SceneFID, Inception Score and crop classification accuracy.

Every metric takes its encoder or classifier explicitly. Offline runs use
:class:`DeskEncoder`, a fixed-seed random CNN; replication runs can swap in
:class:`InceptionPoolEncoder` (ImageNet Inception-V3 pool features).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .layout import Layout, LayoutTensors, crop_boxes

log = logging.getLogger(__name__)

SCENE_FID_CROP_SIZE = 224
CA_CROP_SIZE = 32


# ---------------------------------------------------------------------------
# Gaussian statistics


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"need at least 2 samples for a covariance, got {self.n}")

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "FeatureStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2:
            raise ValueError(f"features must be (N, D), got {feats.shape}")
        if len(feats) < 2:
            raise ValueError(f"need at least 2 samples for a covariance, got {len(feats)}")
        return cls(feats.mean(axis=0), np.cov(feats, rowvar=False).reshape(feats.shape[1], feats.shape[1]), len(feats))


class StatsAccumulator:
    """Streaming sums for :class:`FeatureStats`; ``merge`` is associative."""

    def __init__(self, dim: int):
        self.n = 0
        self.sum = np.zeros(dim)
        self.outer = np.zeros((dim, dim))

    def update(self, feats: np.ndarray) -> "StatsAccumulator":
        feats = np.asarray(feats, dtype=np.float64)
        self.n += len(feats)
        self.sum += feats.sum(axis=0)
        self.outer += feats.T @ feats
        return self

    def merge(self, other: "StatsAccumulator") -> "StatsAccumulator":
        out = StatsAccumulator(len(self.sum))
        out.n = self.n + other.n
        out.sum = self.sum + other.sum
        out.outer = self.outer + other.outer
        return out

    def stats(self) -> FeatureStats:
        mean = self.sum / self.n
        cov = (self.outer - self.n * np.outer(mean, mean)) / (self.n - 1)
        return FeatureStats(mean, 0.5 * (cov + cov.T), self.n)


def _psd_sqrt(mat: np.ndarray, tol: float) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (mat + mat.T))
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -tol * scale:
        raise ValueError(f"covariance is not positive semi-definite (min eigenvalue {w.min():.3g})")
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats, tol: float = 1e-6) -> float:
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})``.

    The trace of the product's square root is taken from the eigenvalues of the
    symmetric matrix ``S_a^{1/2} S_b S_a^{1/2}``, with small negative eigenvalues
    clipped to zero.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    root_a = _psd_sqrt(a.cov, tol)
    _psd_sqrt(b.cov, tol)
    inner = root_a @ b.cov @ root_a
    w = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -tol * scale:
        raise ValueError(f"covariance product is not positive semi-definite (min eigenvalue {w.min():.3g})")
    tr_sqrt = np.sqrt(np.clip(w, 0, None)).sum()
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2 * tr_sqrt)
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# encoders


class DeskEncoder(nn.Module):
    """Random-weight CNN with weights fixed by ``seed``; global-average-pooled features."""

    def __init__(self, dim: int = 64, seed: int = 0):
        super().__init__()
        self.dim = dim
        self.encoder_id = f"desk-random-cnn-v1-d{dim}-seed{seed}"
        gen = torch.Generator().manual_seed(seed)
        chans = [3, 16, 32, 64, dim]
        layers = []
        for k in range(4):
            conv = nn.Conv2d(chans[k], chans[k + 1], 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (chans[k] * 9)) ** 0.5)
                conv.bias.copy_(0.1 * torch.randn(conv.bias.shape, generator=gen))
            layers += [conv, nn.ReLU()]
        self.body = nn.Sequential(*layers)
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] > 64:
            # big crops: pool first so cost stays flat in the input size
            x = F.adaptive_avg_pool2d(x, 64)
        return self.body(x).mean(dim=(2, 3))


class InceptionPoolEncoder(nn.Module):
    """ImageNet Inception-V3 2048-d pool features (torchvision weights)."""

    def __init__(self):
        super().__init__()
        from torchvision.models import Inception_V3_Weights, inception_v3

        net = inception_v3(weights=Inception_V3_Weights.IMAGENET1K_V1)
        net.fc = nn.Identity()
        self.net = net.eval().requires_grad_(False)
        self.encoder_id = "torchvision-inception-v3-pool3"

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x):
        x = F.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
        return self.net(x)


@torch.no_grad()
def extract_features(images: torch.Tensor, encoder: nn.Module, batch_size: int = 256) -> np.ndarray:
    feats = [encoder(images[k:k + batch_size].float()).double().cpu().numpy()
             for k in range(0, len(images), batch_size)]
    return np.concatenate(feats) if feats else np.zeros((0, getattr(encoder, "dim", 0)))


def fid_from_features(real: np.ndarray, fake: np.ndarray) -> float:
    return frechet_distance(FeatureStats.from_features(real), FeatureStats.from_features(fake))


def fid(real_images: torch.Tensor, fake_images: torch.Tensor, encoder: nn.Module) -> float:
    return fid_from_features(extract_features(real_images, encoder), extract_features(fake_images, encoder))


def all_crops(images: torch.Tensor, layouts: Sequence[Layout], size: int, chunk: int = 64):
    """Every object crop of every image, in image-then-layout order, with labels."""
    if len(images) != len(layouts):
        raise ValueError(f"{len(images)} images for {len(layouts)} layouts")
    crops, labels = [], []
    for k in range(0, len(layouts), chunk):
        lt = LayoutTensors.from_layouts(layouts[k:k + chunk])
        c, y, _ = crop_boxes(images[k:k + chunk], lt, size)
        crops.append(c)
        labels.append(y)
    return torch.cat(crops), torch.cat(labels)


@torch.no_grad()
def crop_features(images: torch.Tensor, layouts: Sequence[Layout], encoder: nn.Module,
                  crop_size: int = SCENE_FID_CROP_SIZE, chunk: int = 16) -> np.ndarray:
    """Encoder features of every object crop; crops are built chunk by chunk to bound memory."""
    out = []
    for k in range(0, len(layouts), chunk):
        crops, _ = all_crops(images[k:k + chunk], layouts[k:k + chunk], crop_size)
        out.append(extract_features(crops, encoder))
    return np.concatenate(out)


def scene_fid(real_images: torch.Tensor, real_layouts: Sequence[Layout],
              fake_images: torch.Tensor, fake_layouts: Sequence[Layout], encoder: nn.Module,
              crop_size: int = SCENE_FID_CROP_SIZE) -> float:
    """FID over the pooled object crops of both sets, each crop resized to ``crop_size``."""
    real = crop_features(real_images, real_layouts, encoder, crop_size)
    fake = crop_features(fake_images, fake_layouts, encoder, crop_size)
    if len(real) == 0 or len(fake) == 0:
        raise ValueError("scene_fid needs at least one object crop on each side")
    return fid_from_features(real, fake)


# ---------------------------------------------------------------------------
# inception score


def inception_score_from_probs(probs: np.ndarray, n_splits: int = 5) -> tuple[float, float]:
    """``exp(E_x KL(p(y|x) || p(y)))`` per split, reported as (mean, std) over splits."""
    probs = np.asarray(probs, dtype=np.float64)
    if n_splits < 1 or len(probs) < n_splits:
        raise ValueError(f"cannot split {len(probs)} samples into {n_splits} splits")
    scores = []
    for part in np.array_split(probs, n_splits):
        py = part.mean(axis=0, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            kl = np.where(part > 0, part * (np.log(part) - np.log(py)), 0.0).sum(axis=1)
        scores.append(math.exp(kl.mean()))
    return float(np.mean(scores)), float(np.std(scores))


@torch.no_grad()
def inception_score(images: torch.Tensor, classifier: Callable[[torch.Tensor], torch.Tensor],
                    n_splits: int = 5, batch_size: int = 256) -> tuple[float, float]:
    logits = torch.cat([classifier(images[k:k + batch_size]) for k in range(0, len(images), batch_size)])
    return inception_score_from_probs(torch.softmax(logits.double(), dim=1).cpu().numpy(), n_splits)


class DeskISClassifier(nn.Module):
    """Desk encoder with a fixed random linear head: a pinned stand-in for ImageNet logits."""

    def __init__(self, num_classes: int = 10, seed: int = 0):
        super().__init__()
        self.encoder = DeskEncoder(seed=seed)
        gen = torch.Generator().manual_seed(seed + 1)
        self.register_buffer("head", torch.randn(self.encoder.dim, num_classes, generator=gen))

    def forward(self, x):
        f = self.encoder(x)
        f = (f - f.mean(dim=1, keepdim=True)) / (f.std(dim=1, keepdim=True) + 1e-8)
        return f @ self.head


# ---------------------------------------------------------------------------
# crop classifier and CA


class _ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.skip = None
        if stride != 1 or in_ch != out_ch:
            self.skip = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch))

    def forward(self, x):
        h = F.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return F.relu(h + (x if self.skip is None else self.skip(x)))


class CropClassifier(nn.Module):
    """Small residual CNN for ``32 x 32`` object crops."""

    def __init__(self, num_classes: int, width: int = 32):
        super().__init__()
        self.num_classes = num_classes
        self.stem = nn.Sequential(nn.Conv2d(3, width, 3, 1, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU())
        self.layers = nn.Sequential(
            _ResBlock(width, width, 1), _ResBlock(width, 2 * width, 2), _ResBlock(2 * width, 4 * width, 2))
        self.fc = nn.Linear(4 * width, num_classes)

    def forward(self, x):
        return self.fc(self.layers(self.stem(x)).mean(dim=(2, 3)))


@dataclass
class ClassifierConfig:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-3
    width: int = 32
    seed: int = 0


@torch.no_grad()
def predict(classifier: nn.Module, crops: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    classifier.eval()
    return torch.cat([classifier(crops[k:k + batch_size]).argmax(1) for k in range(0, len(crops), batch_size)])


def train_crop_classifier(crops: torch.Tensor, labels: torch.Tensor, num_classes: int,
                          config: ClassifierConfig | None = None,
                          val_crops: torch.Tensor | None = None,
                          val_labels: torch.Tensor | None = None) -> tuple[CropClassifier, float]:
    """Train on real ``32 x 32`` crops; returns the model and its held-out accuracy."""
    cfg = config or ClassifierConfig()
    torch.manual_seed(cfg.seed)
    model = CropClassifier(num_classes, cfg.width)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    for epoch in range(cfg.epochs):
        model.train()
        order = torch.randperm(len(crops), generator=gen)
        for k in range(0, len(crops), cfg.batch_size):
            idx = order[k:k + cfg.batch_size]
            if len(idx) < 2:
                continue
            loss = F.cross_entropy(model(crops[idx]), labels[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    model.eval()
    acc = float("nan")
    if val_crops is not None and len(val_crops):
        acc = (predict(model, val_crops) == val_labels).double().mean().item()
        log.info("crop classifier held-out accuracy %.4f", acc)
    return model, acc


def save_classifier(model: CropClassifier, path: str | Path) -> None:
    torch.save({"format": "ocgan-crop-classifier", "num_classes": model.num_classes,
                "width": model.stem[0].out_channels, "state_dict": model.state_dict()}, path)


def load_classifier(path: str | Path) -> CropClassifier:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != "ocgan-crop-classifier":
        raise ValueError(f"{path} is not a crop-classifier checkpoint")
    model = CropClassifier(blob["num_classes"], blob["width"])
    model.load_state_dict(blob["state_dict"])
    return model.eval()


def classification_accuracy(images: torch.Tensor, layouts: Sequence[Layout], classifier: nn.Module,
                            crop_size: int = CA_CROP_SIZE) -> float:
    """Fraction of object crops the classifier assigns to their layout class."""
    crops, labels = all_crops(images, layouts, crop_size)
    if len(crops) == 0:
        raise ValueError("no objects to classify")
    return (predict(classifier, crops) == labels).double().mean().item()


# ---------------------------------------------------------------------------
# report


REQUIRED_SETTINGS = ("n_splits", "n_real", "n_fake", "encoder_id")


@dataclass
class MetricsReport:
    is_mean: float | None = None
    is_std: float | None = None
    fid: float | None = None
    scene_fid: float | None = None
    ca: float | None = None
    settings: dict = field(default_factory=dict)

    def validate(self) -> None:
        missing = [k for k in REQUIRED_SETTINGS if k not in self.settings]
        if missing:
            raise ValueError(f"metrics report is missing settings: {missing}")
        for name in ("is_mean", "is_std", "fid", "scene_fid", "ca"):
            v = getattr(self, name)
            if v is not None and not math.isfinite(v):
                raise ValueError(f"{name} is not finite: {v}")

    def to_json(self) -> str:
        self.validate()
        return json.dumps(asdict(self), indent=2)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        report = cls(**json.loads(Path(path).read_text()))
        report.validate()
        return report


def evaluate(real_images: torch.Tensor, fake_images: torch.Tensor, layouts: Sequence[Layout],
             metrics: Sequence[str] = ("fid", "is", "ca", "scenefid"), encoder: nn.Module | None = None,
             classifier: nn.Module | None = None, is_classifier: nn.Module | None = None,
             n_splits: int = 5, scene_crop_size: int = SCENE_FID_CROP_SIZE) -> MetricsReport:
    """Compute the requested metrics; fakes must come from ``layouts``, which also describe the reals."""
    encoder = encoder or DeskEncoder()
    unknown = set(metrics) - {"fid", "is", "ca", "scenefid"}
    if unknown:
        raise ValueError(f"unknown metrics: {sorted(unknown)}")
    report = MetricsReport(settings={
        "n_splits": n_splits, "n_real": len(real_images), "n_fake": len(fake_images),
        "encoder_id": getattr(encoder, "encoder_id", type(encoder).__name__),
    })
    if "fid" in metrics:
        report.fid = fid(real_images, fake_images, encoder)
    if "scenefid" in metrics:
        report.scene_fid = scene_fid(real_images, layouts, fake_images, layouts, encoder, scene_crop_size)
        report.settings["scene_crop_size"] = scene_crop_size
        report.settings["n_crops"] = sum(len(l) for l in layouts)
    if "is" in metrics:
        report.is_mean, report.is_std = inception_score(fake_images, is_classifier or DeskISClassifier(), n_splits)
    if "ca" in metrics:
        if classifier is None:
            raise ValueError("CA needs a trained crop classifier")
        report.ca = classification_accuracy(fake_images, layouts, classifier)
        report.settings["ca_crop_size"] = CA_CROP_SIZE
    report.validate()
    return report
