"""Loss assembly, ablation switches and the alternating GAN training loop."""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .data import DatasetSplit, Record
from .discriminators import MultiScalePatchDiscriminator, ObjectDiscriminator, object_crops, patch_disc
from .evaluation import DeskEncoder, crop_features, extract_features, fid_from_features
from .generator import Generator, GeneratorConfig
from .layout import Layout, LayoutTensors
from .losses import ac_losses, ac_losses_generator, build_extractor, gan_losses, perceptual_loss
from .scene_graph import SceneGraph, build_scene_graph
from .sgsm import SGSM, SGSMConfig

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class LossWeights:
    lambda_P: float = 2.0
    lambda_o: float = 1.0
    lambda_SGSM: float = 1.0
    lambda_AC: float = 1.0

    def __post_init__(self):
        neg = [f.name for f in fields(self) if getattr(self, f.name) < 0]
        if neg:
            raise ValueError(f"loss weights must be non-negative: {neg}")


@dataclass
class AblationFlags:
    use_second_patch_disc: bool = True
    use_patch_disc: bool = True
    use_object_disc: bool = True
    use_instance_boundaries: bool = True
    use_sgsm: bool = True
    use_perceptual: bool = True

    def __post_init__(self):
        if not (self.use_patch_disc or self.use_object_disc):
            raise ValueError("at least one adversarial signal (patch or object discriminator) must stay enabled")

    @property
    def patch_scales(self) -> tuple[int, ...]:
        if not self.use_patch_disc:
            return ()
        return (1, 2) if self.use_second_patch_disc else (1,)


ABLATION_ROWS: dict[str, dict] = {
    "full": {},
    "single_patchD": {"use_second_patch_disc": False},
    "no_patchD": {"use_patch_disc": False, "use_second_patch_disc": False},
    "no_objectD": {"use_object_disc": False},
    "no_boundaries": {"use_instance_boundaries": False},
    "no_sgsm": {"use_sgsm": False},
    "no_objectD_no_sgsm": {"use_object_disc": False, "use_sgsm": False},
    "no_perceptual": {"use_perceptual": False},
    "no_perceptual_no_sgsm": {"use_perceptual": False, "use_sgsm": False},
}


def ablation_flags(row: str) -> AblationFlags:
    if row not in ABLATION_ROWS:
        raise ValueError(f"unknown ablation row {row!r}; choose from {sorted(ABLATION_ROWS)}")
    return AblationFlags(**ABLATION_ROWS[row])


@dataclass
class TrainConfig:
    lr: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    max_iters: int = 5000
    batch_size: int = 8
    flip_augment: bool = False
    patience: int | None = None      # evaluations without validation-FID improvement
    eval_every: int = 500
    val_samples: int = 256
    restore_best: bool = False
    d_steps_per_g: int = 1
    checkpoint_every: int = 100
    seed: int = 0

    def __post_init__(self):
        problems = []
        if not self.lr > 0:
            problems.append("lr must be positive")
        if self.max_iters <= 0:
            problems.append("max_iters must be positive")
        if self.batch_size < 2:
            problems.append("batch_size must be at least 2")
        if self.d_steps_per_g < 1:
            problems.append("d_steps_per_g must be at least 1")
        if problems:
            raise ValueError("; ".join(problems))


@dataclass
class ModelConfig:
    generator: GeneratorConfig
    patch_width: int = 32
    patch_depth: int = 4
    object_width: int = 32
    extractor: str = "random"
    spectral_norm: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        return cls(generator=GeneratorConfig(**d.pop("generator")), **d)


class OCGAN(nn.Module):
    """Generator, discriminators, perceptual extractor and (frozen) SGSM in one container."""

    def __init__(self, config: ModelConfig, flags: AblationFlags | None = None, sgsm: SGSM | None = None):
        super().__init__()
        self.flags = flags or AblationFlags()
        gcfg = replace(config.generator, use_instance_boundaries=self.flags.use_instance_boundaries,
                       spectral_norm=config.spectral_norm)
        self.config = replace(config, generator=gcfg)
        C = gcfg.num_classes
        self.generator = Generator(gcfg)
        self.patch_discs = MultiScalePatchDiscriminator(C, config.patch_width, config.patch_depth,
                                                        use_sn=config.spectral_norm)
        self.object_disc = ObjectDiscriminator(C, config.object_width, use_sn=config.spectral_norm)
        self.extractor = build_extractor(config.extractor)
        if sgsm is not None and not sgsm.frozen:
            raise ValueError("the SGSM must be pretrained and frozen before GAN training")
        self.sgsm = sgsm

    def discriminator_parameters(self):
        return list(self.patch_discs.parameters()) + list(self.object_disc.parameters())


# ---------------------------------------------------------------------------
# losses


def discriminator_losses(model: OCGAN, real: torch.Tensor, fake: torch.Tensor, lt: LayoutTensors,
                         weights: LossWeights, flags: AblationFlags) -> tuple[torch.Tensor, dict]:
    """``L_D = L_{D^p} + lambda_o * L_{D_obj}^AC``; ``fake`` should be detached by the caller."""
    parts = {}
    total = real.new_zeros(())
    scales = flags.patch_scales
    if scales:
        real_logits = [patch_disc(real, lt, s, model.patch_discs) for s in scales]
        fake_logits = [patch_disc(fake, lt, s, model.patch_discs) for s in scales]
        _, parts["D_patch"] = gan_losses(real_logits, fake_logits)
        total = total + parts["D_patch"]
    if flags.use_object_disc:
        real_crops, labels = object_crops(real, lt)
        fake_crops, _ = object_crops(fake, lt)
        _, parts["D_obj"] = ac_losses(model.object_disc(real_crops), model.object_disc(fake_crops), labels)
        total = total + weights.lambda_o * parts["D_obj"]
    return total, parts


def generator_losses(model: OCGAN, real: torch.Tensor, fake: torch.Tensor, lt: LayoutTensors,
                     graphs: Sequence[SceneGraph] | None, weights: LossWeights,
                     flags: AblationFlags) -> tuple[torch.Tensor, dict]:
    """``L_G = L_G^GAN + lambda_P L_P + lambda_SGSM L_SGSM + lambda_AC L_G^AC`` with ablated terms absent."""
    parts = {}
    total = fake.new_zeros(())
    scales = flags.patch_scales
    if scales:
        fake_logits = [patch_disc(fake, lt, s, model.patch_discs) for s in scales]
        parts["G_gan"], _ = gan_losses([], fake_logits)
        total = total + parts["G_gan"]
    if flags.use_perceptual:
        parts["P"] = perceptual_loss(real, fake, model.extractor)
        total = total + weights.lambda_P * parts["P"]
    if flags.use_sgsm:
        if model.sgsm is None:
            raise ValueError("use_sgsm is set but no pretrained SGSM was supplied")
        parts["SGSM"] = model.sgsm.loss(fake, graphs)[0]
        total = total + weights.lambda_SGSM * parts["SGSM"]
    if flags.use_object_disc:
        fake_crops, labels = object_crops(fake, lt)
        parts["G_ac"] = ac_losses_generator(model.object_disc(fake_crops), labels)
        total = total + weights.lambda_AC * parts["G_ac"]
    return total, parts


def total_losses(model: OCGAN, real: torch.Tensor, lt: LayoutTensors, z: torch.Tensor,
                 graphs: Sequence[SceneGraph] | None = None, weights: LossWeights | None = None,
                 flags: AblationFlags | None = None) -> tuple[torch.Tensor, torch.Tensor, dict]:
    """Generate from ``(lt, z)`` and return ``(L_G, L_D, parts)`` on one batch."""
    weights = weights or LossWeights()
    flags = flags or model.flags
    if graphs is None and flags.use_sgsm:
        graphs = [build_scene_graph(l) for l in lt.layouts]
    fake = model.generator(lt, z)
    loss_d, parts_d = discriminator_losses(model, real, fake.detach(), lt, weights, flags)
    loss_g, parts_g = generator_losses(model, real, fake, lt, graphs, weights, flags)
    return loss_g, loss_d, {**parts_g, **parts_d}


# ---------------------------------------------------------------------------
# data plumbing


def images_tensor(records: Sequence[Record]) -> torch.Tensor:
    """uint8 ``(N, 3, H, W)`` tensor of record images."""
    return torch.from_numpy(np.stack([r.load_image() for r in records])).permute(0, 3, 1, 2).contiguous()


def to_float(images_u8: torch.Tensor) -> torch.Tensor:
    return images_u8.float() / 127.5 - 1.0


def flip_layout(layout: Layout) -> Layout:
    return Layout.from_boxes(layout.class_ids, [(1 - x1, y0, 1 - x0, y1) for x0, y0, x1, y1 in layout.boxes],
                             layout.canvas)


@torch.no_grad()
def generate_images(generator: Generator, layouts: Sequence[Layout], seed: int, batch_size: int = 64) -> torch.Tensor:
    """Eval-mode samples for ``layouts`` with noise drawn from a dedicated seeded stream."""
    was_training = generator.training
    generator.eval()
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(len(layouts), generator.config.noise_dim, generator=gen)
    out = []
    max_obj = generator.config.max_objects
    for k in range(0, len(layouts), batch_size):
        lt = LayoutTensors.from_layouts(layouts[k:k + batch_size])
        if lt.classes.shape[1] > max_obj:
            raise ValueError(f"layout exceeds max_objects={max_obj}")
        out.append(generator(lt, z[k:k + batch_size]))
    generator.train(was_training)
    return torch.cat(out)


class Validator:
    """Fixed validation references: real features are computed once, fakes per call."""

    def __init__(self, records: Sequence[Record], n: int, encoder: nn.Module | None = None,
                 seed: int = 12345, metrics: Sequence[str] = ("fid", "scenefid")):
        self.records = list(records[:n])
        self.layouts = [r.layout for r in self.records]
        self.encoder = encoder or DeskEncoder()
        self.seed = seed
        self.metrics = tuple(metrics)
        real = to_float(images_tensor(self.records))
        self.real_feats = extract_features(real, self.encoder)
        self.real_crop_feats = crop_features(real, self.layouts, self.encoder) if "scenefid" in self.metrics else None

    def __call__(self, generator: Generator) -> dict:
        # score a snapshot so evaluation never touches the live training module
        fake = generate_images(copy.deepcopy(generator), self.layouts, self.seed)
        out = {}
        if "fid" in self.metrics:
            out["fid"] = fid_from_features(self.real_feats, extract_features(fake, self.encoder))
        if "scenefid" in self.metrics:
            out["scene_fid"] = fid_from_features(self.real_crop_feats, crop_features(fake, self.layouts, self.encoder))
        return out


# ---------------------------------------------------------------------------
# training


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_good_path: Path | None = None):
        super().__init__(message)
        self.last_good_path = last_good_path


LOG_FIELDS = ["iter", "L_G", "L_D", "G_gan", "P", "SGSM", "G_ac", "D_patch", "D_obj"]


@dataclass
class TrainResult:
    model: OCGAN
    log: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    best_iter: int | None = None
    stopped_early: bool = False
    seconds: float = 0.0

    def write_log(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, restval="")
            writer.writeheader()
            writer.writerows(self.log)

    def write_evals(self, path: str | Path) -> None:
        keys = sorted({k for e in self.evals for k in e}, key=lambda k: (k != "iter", k))
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys, restval="")
            writer.writeheader()
            writer.writerows(self.evals)


def _snapshot(model: OCGAN) -> dict:
    return {"generator": copy.deepcopy(model.generator.state_dict()),
            "patch_discs": copy.deepcopy(model.patch_discs.state_dict()),
            "object_disc": copy.deepcopy(model.object_disc.state_dict())}


def train(dataset: DatasetSplit, model_config: ModelConfig, config: TrainConfig | None = None,
          flags: AblationFlags | None = None, weights: LossWeights | None = None,
          sgsm: SGSM | None = None, out_dir: str | Path | None = None,
          validator: Validator | None = None, progress_every: int = 250) -> TrainResult:
    """Alternating D/G training with Adam; deterministic for a fixed seed on one worker."""
    cfg = config or TrainConfig()
    flags = flags or AblationFlags()
    weights = weights or LossWeights()
    if flags.use_sgsm and sgsm is None:
        raise ValueError("use_sgsm needs a pretrained, frozen SGSM")
    if sgsm is not None and not sgsm.frozen:
        raise ValueError("SGSM must be frozen before GAN training")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    model = OCGAN(model_config, flags, sgsm if flags.use_sgsm else None)
    model.train()
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    opt_g = torch.optim.Adam(model.generator.parameters(), lr=cfg.lr, betas=betas)
    opt_d = torch.optim.Adam(model.discriminator_parameters(), lr=cfg.lr, betas=betas)

    records = dataset.train
    images = images_tensor(records)
    layouts = [r.layout for r in records]
    graphs = [build_scene_graph(l) for l in layouts] if flags.use_sgsm else None
    data_gen = torch.Generator().manual_seed(cfg.seed + 1)
    noise_gen = torch.Generator().manual_seed(cfg.seed + 2)
    if validator is None and cfg.eval_every and dataset.valid:
        validator = Validator(dataset.valid, cfg.val_samples, metrics=("fid",))

    result = TrainResult(model)
    best_fid, best_state, evals_since_best = math.inf, None, 0
    last_good = _snapshot(model)
    order, cursor = torch.randperm(len(records), generator=data_gen), 0
    start = time.time()

    def run_eval(it):
        nonlocal best_fid, best_state, evals_since_best
        row = {"iter": it, **validator(model.generator)}
        result.evals.append(row)
        log.info("eval iter %d: %s", it, {k: round(v, 4) for k, v in row.items() if k != "iter"})
        if "fid" in row:
            if row["fid"] < best_fid:
                best_fid, evals_since_best, result.best_iter = row["fid"], 0, it
                if cfg.restore_best:
                    best_state = _snapshot(model)
            else:
                evals_since_best += 1

    if validator is not None and cfg.eval_every:
        run_eval(0)

    for it in range(1, cfg.max_iters + 1):
        if cursor + cfg.batch_size > len(records):
            order, cursor = torch.randperm(len(records), generator=data_gen), 0
        idx = order[cursor:cursor + cfg.batch_size].tolist()
        cursor += cfg.batch_size
        batch_layouts = [layouts[i] for i in idx]
        real = to_float(images[idx])
        batch_graphs = [graphs[i] for i in idx] if graphs is not None else None
        if cfg.flip_augment:
            flips = (torch.rand(len(idx), generator=data_gen) < 0.5).tolist()
            for k, f in enumerate(flips):
                if f:
                    real[k] = real[k].flip(-1)
                    batch_layouts[k] = flip_layout(batch_layouts[k])
                    if batch_graphs is not None:
                        batch_graphs[k] = build_scene_graph(batch_layouts[k])
        lt = LayoutTensors.from_layouts(batch_layouts)
        z = torch.randn(len(idx), model_config.generator.noise_dim, generator=noise_gen)

        fake = model.generator(lt, z)
        for _ in range(cfg.d_steps_per_g):
            loss_d, parts_d = discriminator_losses(model, real, fake.detach(), lt, weights, flags)
            opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            opt_d.step()
        loss_g, parts_g = generator_losses(model, real, fake, lt, batch_graphs, weights, flags)
        opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        opt_g.step()

        row = {"iter": it, "L_G": loss_g.item(), "L_D": loss_d.item()}
        row.update({k: v.item() for k, v in {**parts_g, **parts_d}.items()})
        result.log.append(row)
        if not all(math.isfinite(v) for v in row.values()):
            path = None
            if out_dir is not None:
                path = out_dir / "last_good.pt"
                torch.save({"format": "ocgan-snapshot", "state": last_good}, path)
            raise TrainingAborted(f"non-finite loss at iteration {it}: {row}", path)
        if it % cfg.checkpoint_every == 0:
            last_good = _snapshot(model)
        if progress_every and it % progress_every == 0:
            log.info("iter %d  %s  (%.1fs)", it, {k: round(v, 3) for k, v in row.items() if k != "iter"},
                     time.time() - start)
        if validator is not None and cfg.eval_every and it % cfg.eval_every == 0:
            run_eval(it)
            if cfg.patience is not None and evals_since_best > cfg.patience:
                result.stopped_early = True
                break

    if cfg.restore_best and best_state is not None:
        model.generator.load_state_dict(best_state["generator"])
        model.patch_discs.load_state_dict(best_state["patch_discs"])
        model.object_disc.load_state_dict(best_state["object_disc"])
    result.seconds = time.time() - start
    if out_dir is not None:
        result.write_log(out_dir / "metrics.csv")
        if result.evals:
            result.write_evals(out_dir / "validation.csv")
        save_checkpoint(model, out_dir / "checkpoint.pt", train_config=cfg, weights=weights)
    return result


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: OCGAN, path: str | Path, train_config: TrainConfig | None = None,
                    weights: LossWeights | None = None) -> None:
    blob = {
        "format": "ocgan",
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "flags": asdict(model.flags),
        "train_config": asdict(train_config) if train_config else None,
        "weights": asdict(weights) if weights else None,
        "generator": model.generator.state_dict(),
        "patch_discs": model.patch_discs.state_dict(),
        "object_disc": model.object_disc.state_dict(),
    }
    if model.sgsm is not None:
        blob["sgsm"] = {"num_classes": model.sgsm.num_classes, "config": asdict(model.sgsm.config),
                        "state_dict": model.sgsm.state_dict(), "frozen": model.sgsm.frozen}
    torch.save(blob, path)


def load_checkpoint(path: str | Path) -> OCGAN:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != "ocgan":
        raise ValueError(f"{path} is not an OC-GAN checkpoint")
    if blob["version"] > CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {blob['version']} is newer than supported {CHECKPOINT_VERSION}")
    sgsm = None
    if "sgsm" in blob:
        s = blob["sgsm"]
        sgsm = SGSM(s["num_classes"], SGSMConfig(**s["config"]))
        sgsm.load_state_dict(s["state_dict"])
        sgsm.freeze()
    model = OCGAN(ModelConfig.from_dict(blob["model_config"]), AblationFlags(**blob["flags"]), sgsm)
    model.generator.load_state_dict(blob["generator"])
    model.patch_discs.load_state_dict(blob["patch_discs"])
    model.object_disc.load_state_dict(blob["object_disc"])
    model.eval()
    return model
