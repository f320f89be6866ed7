"""Command-line entry point.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure. Every command
writes exactly one ``manifest.json`` describing its inputs and outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from . import __version__

log = logging.getLogger("ocgan")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
MANIFEST_VERSION = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int | None
    version: str = __version__
    manifest_version: int = MANIFEST_VERSION
    started: str = ""
    finished: str = ""
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    status: str = "ok"

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2))


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _hash_inputs(payload: dict, files: Sequence[Path] = ()) -> str:
    """sha256 over the canonical JSON of ``payload`` and the bytes of every input file."""
    h = hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode())
    for f in files:
        f = Path(f)
        paths = sorted(p for p in f.rglob("*") if p.is_file()) if f.is_dir() else [f]
        for p in paths:
            h.update(str(p.relative_to(f) if f.is_dir() else p.name).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _load_config(args):
    from .experiment import load_config, toy_config

    cfg = load_config(args.config) if args.config else toy_config()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "data", None):
        from dataclasses import replace

        cfg = replace(cfg, data_root=str(args.data))
    return cfg


def _save_png(array: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path)


def _to_uint8(images: torch.Tensor) -> np.ndarray:
    return ((images.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8).permute(0, 2, 3, 1).numpy()


def _grid(images: np.ndarray, cols: int, pad: int = 2) -> np.ndarray:
    n, h, w, c = images.shape
    rows = -(-n // cols)
    out = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad, c), 255, np.uint8)
    for k, img in enumerate(images):
        r, q = divmod(k, cols)
        out[pad + r * (h + pad):pad + r * (h + pad) + h, pad + q * (w + pad):pad + q * (w + pad) + w] = img
    return out


def _read_layouts(path: Path):
    from .layout import Layout, load_layouts

    data = json.loads(path.read_text())
    if isinstance(data, list) or (isinstance(data, dict) and "layouts" in data):
        return load_layouts(path)
    return [Layout.from_dict(data)]


# ---------------------------------------------------------------------------
# commands


def cmd_make_dataset(args, manifest: RunManifest) -> None:
    from dataclasses import replace

    from .data import make_synthetic_dataset, save_dataset

    cfg = _load_config(args)
    data_cfg = cfg.data if args.n_images is None else replace(cfg.data, n_images=args.n_images)
    manifest.config_hash = _hash_inputs({"data": asdict(data_cfg)})
    manifest.seed = data_cfg.seed
    split = make_synthetic_dataset(data_cfg)
    out = save_dataset(split, args.out)
    manifest.outputs = {"dataset": str(out), "counts": {n: len(split.split(n)) for n in ("train", "valid", "test")}}


def cmd_pretrain_sgsm(args, manifest: RunManifest) -> None:
    from .experiment import build_dataset, run_sgsm
    from .sgsm import save_sgsm

    cfg = _load_config(args)
    manifest.config_hash = _hash_inputs(cfg.to_dict(), [Path(cfg.data_root)] if cfg.data_root else [])
    manifest.seed = cfg.seed
    ds = build_dataset(cfg)
    sgsm, history = run_sgsm(cfg, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_sgsm(sgsm, out / "sgsm.pt")
    history.write_csv(out / "sgsm_log.csv")
    manifest.outputs = {"sgsm": str(out / "sgsm.pt"), "log": str(out / "sgsm_log.csv"),
                        "final": history.rows[-1] if history.rows else None}


def cmd_train(args, manifest: RunManifest) -> None:
    from .experiment import build_dataset, run_experiment
    from .sgsm import load_sgsm

    cfg = _load_config(args)
    files = [Path(cfg.data_root)] if cfg.data_root else []
    if args.sgsm:
        files.append(Path(args.sgsm))
    manifest.config_hash = _hash_inputs(cfg.to_dict(), files)
    manifest.seed = cfg.seed
    sgsm = load_sgsm(args.sgsm) if args.sgsm and cfg.flags.use_sgsm else None
    if sgsm is not None and not sgsm.frozen:
        raise RuntimeError(f"{args.sgsm} holds an SGSM that was never frozen")
    result = run_experiment(cfg, args.out, ds=build_dataset(cfg), sgsm=sgsm)
    out = Path(args.out)
    (out / "config.yaml").write_text(cfg.to_yaml())
    manifest.outputs = {"checkpoint": str(out / "checkpoint.pt"), "metrics": str(out / "metrics.csv"),
                        "report": str(out / "report.json"), "summary": asdict(result.report)}


def _load_generator(path: str):
    from .training import load_checkpoint

    return load_checkpoint(path).generator


def cmd_generate(args, manifest: RunManifest) -> None:
    from .training import generate_images

    layouts = _read_layouts(Path(args.layout))
    manifest.config_hash = _hash_inputs({"seed": args.seed, "grid": args.grid}, [Path(args.checkpoint), Path(args.layout)])
    manifest.seed = args.seed
    generator = _load_generator(args.checkpoint)
    out = Path(args.out)
    if args.grid:
        # one row per layout, ``grid`` noise draws per row
        repeated = [l for l in layouts for _ in range(args.grid)]
        images = _to_uint8(generate_images(generator, repeated, args.seed))
        _save_png(_grid(images, args.grid), out)
        manifest.outputs = {"grid": str(out), "rows": len(layouts), "cols": args.grid}
        return
    images = _to_uint8(generate_images(generator, layouts, args.seed))
    if len(images) == 1 and out.suffix.lower() == ".png":
        _save_png(images[0], out)
        manifest.outputs = {"images": [str(out)]}
        return
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, (img, layout) in enumerate(zip(images, layouts)):
        _save_png(img, out / f"{k:06d}.png")
        (out / f"{k:06d}.json").write_text(layout.to_json())
        paths.append(str(out / f"{k:06d}.png"))
    manifest.outputs = {"images": paths}


def cmd_perturb(args, manifest: RunManifest) -> None:
    from .data import layout_perturbations
    from .training import generate_images

    layout = _read_layouts(Path(args.layout))[0]
    manifest.config_hash = _hash_inputs(
        {"seed": args.seed, "kind": args.kind, "steps": args.steps, "index": args.index, "direction": args.direction},
        [Path(args.checkpoint), Path(args.layout)])
    manifest.seed = args.seed
    if args.kind == "remove_object":
        seq = [layout, layout_perturbations(layout, "remove_object", 0, args.index)]
    else:
        if args.steps < 2:
            raise UsageError("--steps must be at least 2")
        ts = [k / (args.steps - 1) for k in range(args.steps)]
        if args.kind == "move_object":
            seq = [layout_perturbations(layout, "move_object", t * args.distance, args.index, tuple(args.direction))
                   for t in ts]
        else:
            seq = [layout_perturbations(layout, "converge_boxes", t) for t in ts]
    generator = _load_generator(args.checkpoint)
    # the same seed per frame gives identical noise, isolating the effect of the edit
    images = _to_uint8(torch.cat([generate_images(generator, [l], args.seed) for l in seq]))
    out = Path(args.out)
    _save_png(_grid(images, len(seq)), out)
    manifest.outputs = {"grid": str(out), "frames": len(seq),
                        "layouts": [l.to_dict() for l in seq]}


def _image_dir(path: Path, keys: Sequence[str]) -> torch.Tensor:
    arrays = []
    for k in keys:
        p = path / f"{k}.png"
        if not p.exists():
            raise FileNotFoundError(f"missing image {p}")
        arrays.append(np.asarray(Image.open(p).convert("RGB")))
    return torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2).float() / 127.5 - 1.0


def cmd_evaluate(args, manifest: RunManifest) -> None:
    from .data import load_layout_dataset
    from .evaluation import DeskEncoder, evaluate, load_classifier

    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = sorted(set(metrics) - {"fid", "is", "ca", "scenefid"})
    if unknown:
        raise UsageError(f"unknown metrics {unknown}; choose from fid,is,ca,scenefid")
    if "ca" in metrics and not args.classifier:
        raise UsageError("CA needs --classifier (written by `ocgan train` as classifier.pt)")
    files = [Path(args.real), Path(args.fake), Path(args.layouts)] + ([Path(args.classifier)] if args.classifier else [])
    manifest.config_hash = _hash_inputs({"metrics": metrics, "n_splits": args.n_splits,
                                         "scene_crop_size": args.scene_crop_size}, files)
    lpath = Path(args.layouts)
    if lpath.is_file():
        # a layout list pairs with images in sorted file-name order
        layouts = _read_layouts(lpath)
        real_keys = sorted(p.stem for p in Path(args.real).glob("*.png"))
        fake_keys = sorted(p.stem for p in Path(args.fake).glob("*.png"))
        if not (len(layouts) == len(real_keys) == len(fake_keys)):
            raise RuntimeError(f"{len(layouts)} layouts, {len(real_keys)} real and {len(fake_keys)} fake images")
        real, fake = _image_dir(Path(args.real), real_keys), _image_dir(Path(args.fake), fake_keys)
    else:
        ds = load_layout_dataset(lpath)
        records = ds.train + ds.valid + ds.test
        if not records:
            raise RuntimeError(f"no layouts found under {lpath}")
        keys = [r.key for r in records]
        layouts = [r.layout for r in records]
        real, fake = _image_dir(Path(args.real), keys), _image_dir(Path(args.fake), keys)
    classifier = load_classifier(args.classifier) if args.classifier else None
    report = evaluate(real, fake, layouts, metrics, DeskEncoder(), classifier,
                      n_splits=args.n_splits, scene_crop_size=args.scene_crop_size)
    report.save(args.report)
    manifest.outputs = {"report": str(args.report), **{k: v for k, v in asdict(report).items() if k != "settings"}}


def cmd_ablate(args, manifest: RunManifest) -> None:
    from dataclasses import replace

    from .experiment import build_dataset, run_classifier, run_experiment, run_sgsm
    from .training import ABLATION_ROWS, Validator, ablation_flags

    rows = [r.strip() for r in args.rows.split(",") if r.strip()]
    bad = [r for r in rows if r not in ABLATION_ROWS]
    if bad or not rows:
        raise UsageError(f"unknown ablation rows {bad}; choose from {','.join(ABLATION_ROWS)}")
    cfg = _load_config(args)
    manifest.config_hash = _hash_inputs({"config": cfg.to_dict(), "rows": rows},
                                        [Path(cfg.data_root)] if cfg.data_root else [])
    manifest.seed = cfg.seed
    out = Path(args.out)
    # dataset, SGSM, classifier and validation references are shared by every row
    ds = build_dataset(cfg)
    sgsm = sgsm_log = None
    if any(ablation_flags(r).use_sgsm for r in rows):
        sgsm, sgsm_log = run_sgsm(cfg, ds)
    classifier, _ = run_classifier(cfg, ds)
    validator = Validator(ds.valid, cfg.train.val_samples) if cfg.train.eval_every and ds.valid else None
    table = []
    for row in rows:
        row_cfg = replace(cfg, flags=ablation_flags(row))
        res = run_experiment(row_cfg, out / row, ds=ds, sgsm=sgsm, classifier=classifier,
                             validator=validator, sgsm_log=sgsm_log)
        table.append({"row": row, "fid": res.report.fid, "scene_fid": res.report.scene_fid, "ca": res.report.ca,
                      "is_mean": res.report.is_mean})
        log.info("ablation row %s: %s", row, table[-1])
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(table, indent=2))
    lines = ["| row | FID | SceneFID | CA | IS |", "|---|---|---|---|---|"]
    fmt = lambda v: "n/a" if v is None else f"{v:.4f}"  # noqa: E731
    lines += [f"| {t['row']} | {fmt(t['fid'])} | {fmt(t['scene_fid'])} | {fmt(t['ca'])} | {fmt(t['is_mean'])} |"
              for t in table]
    (out / "ablation.md").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    manifest.outputs = {"table": str(out / "ablation.json"), "rows": table}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ocgan", description="Layout-to-image GAN pipeline on desk-scale data.")
    p.add_argument("--version", action="version", version=f"ocgan {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-dataset", help="render the synthetic shapes dataset")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--config", help="YAML config; only the data section is used")
    s.add_argument("--n-images", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_make_dataset)

    s = sub.add_parser("pretrain-sgsm", help="pretrain and freeze the scene-graph similarity module")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--data", help="dataset directory (overrides data_root)")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_pretrain_sgsm)

    s = sub.add_parser("train", help="train the GAN and write checkpoint, logs and a report")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--sgsm", help="pretrained SGSM checkpoint; pretrained on the fly if omitted")
    s.add_argument("--data", help="dataset directory (overrides data_root)")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", help="sample images for layouts")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--layout", required=True, help="layout JSON (single layout or list)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="PNG path for one image or a grid, else a directory")
    s.add_argument("--grid", type=int, default=0, metavar="N", help="N samples per layout as a PNG grid")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("perturb", help="render a layout-edit sequence with fixed noise")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--layout", required=True)
    s.add_argument("--kind", choices=["converge_boxes", "remove_object", "move_object"], default="converge_boxes")
    s.add_argument("--steps", type=int, default=5)
    s.add_argument("--index", type=int, default=0, help="object to remove or move")
    s.add_argument("--direction", type=float, nargs=2, default=[1.0, 0.0])
    s.add_argument("--distance", type=float, default=0.3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_perturb)

    s = sub.add_parser("evaluate", help="FID / IS / SceneFID / CA between image folders")
    s.add_argument("--real", required=True, help="directory of real PNGs named <key>.png")
    s.add_argument("--fake", required=True, help="directory of generated PNGs named <key>.png")
    s.add_argument("--layouts", required=True, help="directory of <key>.json layouts, or one JSON layout list")
    s.add_argument("--metrics", default="fid,is,scenefid")
    s.add_argument("--classifier", help="crop classifier checkpoint for CA")
    s.add_argument("--n-splits", type=int, default=5)
    s.add_argument("--scene-crop-size", type=int, default=224)
    s.add_argument("--report", required=True, help="output JSON path")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", help="run ablation rows sequentially and tabulate FID/CA")
    s.add_argument("--rows", required=True, help="comma-separated rows, e.g. no_sgsm,no_objectD")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default="ablation")
    s.add_argument("--data")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_ablate)
    return p


def _manifest_path(args) -> Path:
    out = Path(getattr(args, "report", None) or args.out)
    if out.suffix:  # a file output: manifest sits next to it
        return out.with_name(out.stem + ".manifest.json")
    out.mkdir(parents=True, exist_ok=True)
    return out / "manifest.json"


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    from .experiment import ConfigError

    manifest = RunManifest(command=args.command, config_hash="", seed=getattr(args, "seed", None), started=_now(),
                           inputs={k: v for k, v in vars(args).items() if k not in ("func", "verbose")})
    code = EXIT_OK
    try:
        args.func(args, manifest)
    except (UsageError, ConfigError) as exc:
        print(f"ocgan {args.command}: {exc}", file=sys.stderr)
        manifest.status, code = f"usage error: {exc}", EXIT_USAGE
    except Exception as exc:  # runtime failure: report, record, exit 2
        log.debug("failure", exc_info=True)
        print(f"ocgan {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        manifest.status, code = f"failed: {type(exc).__name__}: {exc}", EXIT_RUNTIME
    manifest.finished = _now()
    try:
        manifest.write(_manifest_path(args))
    except OSError as exc:
        print(f"ocgan: could not write manifest: {exc}", file=sys.stderr)
        code = code or EXIT_RUNTIME
    return code


if __name__ == "__main__":
    sys.exit(main())
