"""End-to-end run configuration and orchestration: dataset, SGSM, classifier, GAN, report.

A single :class:`ExperimentConfig` mirrors the dataclasses of each stage field for
field, so YAML configs and in-code presets share one schema.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .data import DatasetSplit, SyntheticConfig, load_layout_dataset, make_synthetic_dataset
from .evaluation import (ClassifierConfig, DeskEncoder, MetricsReport, all_crops, evaluate,
                         save_classifier, train_crop_classifier)
from .generator import GeneratorConfig
from .sgsm import SGSM, SGSMConfig, SGSMTrainConfig, SGSMTrainLog, graphs_for, images_to_tensor, pretrain_sgsm
from .training import (AblationFlags, LossWeights, ModelConfig, TrainConfig, TrainResult, Validator,
                       generate_images, images_tensor, to_float, train)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Every violated field of a config, one message per line."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config:\n  " + "\n  ".join(problems))


@dataclass
class EvalConfig:
    n_samples: int = 500
    n_splits: int = 5
    scene_crop_size: int = 224
    metrics: tuple[str, ...] = ("fid", "is", "ca", "scenefid")
    sample_seed: int = 777

    def __post_init__(self):
        self.metrics = tuple(self.metrics)
        if self.n_samples < 2:
            raise ValueError("n_samples must be at least 2")
        if self.n_splits < 1:
            raise ValueError("n_splits must be at least 1")


@dataclass
class ExperimentConfig:
    seed: int = 0
    data_root: str | None = None
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    sgsm: SGSMConfig = field(default_factory=SGSMConfig)
    sgsm_train: SGSMTrainConfig = field(default_factory=SGSMTrainConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(GeneratorConfig(num_classes=6)))
    train: TrainConfig = field(default_factory=TrainConfig)
    flags: AblationFlags = field(default_factory=AblationFlags)
    weights: LossWeights = field(default_factory=LossWeights)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Route one seed to every stochastic stage."""
        return replace(
            self, seed=seed,
            data=replace(self.data, seed=seed),
            sgsm_train=replace(self.sgsm_train, seed=seed),
            train=replace(self.train, seed=seed),
            classifier=replace(self.classifier, seed=seed),
            eval=replace(self.eval, sample_seed=seed + 777),
        )

    def with_flags(self, flags: AblationFlags) -> "ExperimentConfig":
        return replace(self, flags=flags)


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_SECTIONS = {
    "data": SyntheticConfig, "sgsm": SGSMConfig, "sgsm_train": SGSMTrainConfig, "train": TrainConfig,
    "flags": AblationFlags, "weights": LossWeights, "classifier": ClassifierConfig, "eval": EvalConfig,
}
_TUPLE_FIELDS = {"canvas", "objects_per_image", "box_size", "split_fractions", "betas", "metrics"}


def _build(section: str, cls, values: Any, problems: list[str]):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        problems.append(f"{section}: expected a mapping, got {type(values).__name__}")
        return None
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    for key in unknown:
        problems.append(f"{section}.{key}: unknown field")
    kwargs = {k: (tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v)
              for k, v in values.items() if k in known}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{section}: {exc}")
        return None


def config_from_dict(raw: dict | None) -> ExperimentConfig:
    """Validate a nested mapping; raises :class:`ConfigError` listing every problem found."""
    raw = dict(raw or {})
    problems: list[str] = []
    top = {f.name for f in fields(ExperimentConfig)}
    for key in sorted(set(raw) - top):
        problems.append(f"{key}: unknown section")
    built: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        built[name] = _build(name, cls, raw.get(name), problems)

    model_raw = raw.get("model") or {}
    if not isinstance(model_raw, dict):
        problems.append("model: expected a mapping")
        model_raw = {}
    gen_raw = dict(model_raw.get("generator") or {})
    if built["data"] is not None:
        gen_raw.setdefault("num_classes", built["data"].n_classes)
        gen_raw.setdefault("image_size", built["data"].canvas[0])
        gen_raw.setdefault("max_objects", built["data"].max_objects)
    gen = _build("model.generator", GeneratorConfig, gen_raw, problems)
    rest = {k: v for k, v in model_raw.items() if k != "generator"}
    model = None
    if gen is not None:
        known = {f.name for f in fields(ModelConfig)} - {"generator"}
        for key in sorted(set(rest) - known):
            problems.append(f"model.{key}: unknown field")
        try:
            model = ModelConfig(generator=gen, **{k: v for k, v in rest.items() if k in known})
        except (TypeError, ValueError) as exc:
            problems.append(f"model: {exc}")

    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        problems.append(f"seed: expected an integer, got {seed!r}")
    data_root = raw.get("data_root")
    if data_root is not None and not isinstance(data_root, str):
        problems.append("data_root: expected a path string")
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(seed=seed, data_root=data_root, model=model, **built)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"{path}: config file not found"])
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML ({exc})"]) from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return config_from_dict(raw)


def toy_config(seed: int = 0) -> ExperimentConfig:
    """Desk-scale preset: 64 x 64 synthetic shapes, narrow networks, 5k iterations."""
    cfg = ExperimentConfig(
        data=SyntheticConfig(n_images=5000),
        sgsm_train=SGSMTrainConfig(epochs=10, batch_size=16),
        model=ModelConfig(GeneratorConfig(num_classes=6, base_channels=16, embedding_dim=16, cond_hidden=32),
                          patch_width=16, object_width=16),
        train=TrainConfig(max_iters=5000, batch_size=8, eval_every=500, val_samples=256),
        classifier=ClassifierConfig(epochs=4, width=16),
        eval=EvalConfig(n_samples=500),
    )
    return cfg.with_seed(seed)


# ---------------------------------------------------------------------------
# stages


def build_dataset(cfg: ExperimentConfig) -> DatasetSplit:
    if cfg.data_root:
        return load_layout_dataset(cfg.data_root, max_objects=cfg.model.generator.max_objects,
                                   num_classes=cfg.model.generator.num_classes)
    return make_synthetic_dataset(cfg.data)


def run_sgsm(cfg: ExperimentConfig, ds: DatasetSplit) -> tuple[SGSM, SGSMTrainLog]:
    tr = images_to_tensor([r.load_image() for r in ds.train])
    val = images_to_tensor([r.load_image() for r in ds.valid]) if ds.valid else None
    val_graphs = graphs_for([r.layout for r in ds.valid], cfg.sgsm.max_edges) if ds.valid else None
    return pretrain_sgsm(tr, graphs_for([r.layout for r in ds.train], cfg.sgsm.max_edges),
                         cfg.model.generator.num_classes, cfg.sgsm, cfg.sgsm_train, val, val_graphs)


def run_classifier(cfg: ExperimentConfig, ds: DatasetSplit):
    """Crop classifier trained on real train-split crops; held-out accuracy on the validation split."""
    crops, labels = all_crops(to_float(images_tensor(ds.train)), [r.layout for r in ds.train], 32)
    val_crops = val_labels = None
    if ds.valid:
        val_crops, val_labels = all_crops(to_float(images_tensor(ds.valid)), [r.layout for r in ds.valid], 32)
    return train_crop_classifier(crops, labels, cfg.model.generator.num_classes, cfg.classifier,
                                 val_crops, val_labels)


def final_report(cfg: ExperimentConfig, ds: DatasetSplit, generator, classifier=None) -> MetricsReport:
    """Metrics on the first ``eval.n_samples`` test layouts, with seeded noise."""
    records = (ds.test or ds.valid)[: cfg.eval.n_samples]
    layouts = [r.layout for r in records]
    real = to_float(images_tensor(records))
    fake = generate_images(generator, layouts, cfg.eval.sample_seed)
    metrics = [m for m in cfg.eval.metrics if m != "ca" or classifier is not None]
    report = evaluate(real, fake, layouts, metrics, DeskEncoder(), classifier,
                      n_splits=cfg.eval.n_splits, scene_crop_size=cfg.eval.scene_crop_size)
    report.settings["sample_seed"] = cfg.eval.sample_seed
    return report


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    train: TrainResult
    report: MetricsReport
    sgsm_log: SGSMTrainLog | None = None
    classifier_acc: float | None = None
    seconds: float = 0.0

    def summary(self) -> dict:
        return {
            "config_hash": self.config.hash(),
            "report": asdict(self.report),
            "classifier_real_acc": self.classifier_acc,
            "sgsm_final": self.sgsm_log.rows[-1] if self.sgsm_log and self.sgsm_log.rows else None,
            "validation": self.train.evals,
            "iters": len(self.train.log),
            "seconds": self.seconds,
        }


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, ds: DatasetSplit | None = None,
                   sgsm: SGSM | None = None, classifier=None, validator: Validator | None = None,
                   sgsm_log: SGSMTrainLog | None = None) -> ExperimentResult:
    """Run every stage not supplied by the caller; pre-built stages let ablation rows share them."""
    start = time.time()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ds = ds or build_dataset(cfg)
    if cfg.flags.use_sgsm and sgsm is None:
        sgsm, sgsm_log = run_sgsm(cfg, ds)
    acc = None
    if classifier is None and "ca" in cfg.eval.metrics:
        classifier, acc = run_classifier(cfg, ds)
    if validator is None and cfg.train.eval_every and ds.valid:
        validator = Validator(ds.valid, cfg.train.val_samples)
    result = train(ds, cfg.model, cfg.train, cfg.flags, cfg.weights, sgsm if cfg.flags.use_sgsm else None,
                   out, validator)
    report = final_report(cfg, ds, result.model.generator, classifier)
    res = ExperimentResult(cfg, result, report, sgsm_log, acc, time.time() - start)
    if out is not None:
        report.save(out / "report.json")
        (out / "summary.json").write_text(json.dumps(res.summary(), indent=2, default=float))
        if sgsm_log is not None:
            sgsm_log.write_csv(out / "sgsm_log.csv")
        if classifier is not None:
            save_classifier(classifier, out / "classifier.pt")
    return res
