"""Command line front end: ``patchssl {synth,tile,train,eval,experiment,overlay}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.

A JSON config file (``--config``) may provide any of::

    {"geometry": {"canvas", "grid", "patch", "downsample"},
     "train": {<TrainConfig fields>},
     "preset": "full" | "desk",
     "grid": [10, 20, 40, 80, 149], "repeats": 5, "seed": 0,
     "workers": 1, "run_root": "runs"}

Unknown keys are rejected. Command-line flags override file values.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from . import dataset as ds
from .evaluation import evaluate_run, run_experiment
from .overlay import (gaussian_blur, localization_auc, render_overlay, save_score_map,
                      score_map, scores_from_logits)
from .seeds import derive_seed
from .training import METHODS, TrainConfig, TrainRun, desk_config, train

log = logging.getLogger("patchssl")

PATCH_STORE = "patches.bin"
PATCH_MANIFEST = "patch_manifest.json"
RUN_ROOT_ENV = "PATCHSSL_RUN_ROOT"


class UsageError(Exception):
    pass


@dataclass
class CliConfig:
    geometry: ds.Geometry = field(default_factory=ds.Geometry)
    preset: str = "full"
    train: dict[str, Any] = field(default_factory=dict)
    grid: list[int] = field(default_factory=lambda: [10, 20, 40, 80, 149])
    repeats: int = 5
    seed: int = 0
    workers: int = 1
    run_root: str = "runs"

    @classmethod
    def from_file(cls, path: str | os.PathLike | None) -> "CliConfig":
        cfg = cls(run_root=os.environ.get(RUN_ROOT_ENV, "runs"))
        if path is None:
            return cfg
        with open(path) as fh:
            data = json.load(fh)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        if "geometry" in data:
            data["geometry"] = ds.Geometry(**data["geometry"])
        return dataclasses.replace(cfg, **data)

    def train_config(self, **overrides) -> TrainConfig:
        if self.preset not in ("full", "desk"):
            raise UsageError(f"unknown preset {self.preset!r}")
        values = {**self.train, **{k: v for k, v in overrides.items() if v is not None}}
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        if set(values) - known:
            raise ValueError(f"unknown training config keys: {sorted(set(values) - known)}")
        make = desk_config if self.preset == "desk" else TrainConfig
        base = make()
        epochs = values.get("epochs", base.epochs)
        if "lr_decay_start_epoch" not in values and base.lr_decay_start_epoch > epochs:
            # shortened run: keep the preset's constant/decay proportions
            values["lr_decay_start_epoch"] = int(round(
                epochs * base.lr_decay_start_epoch / base.epochs))
        return make(**values)


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _pair(cast):
    def parse(text: str):
        parts = [cast(v) for v in text.split(",")]
        if len(parts) != 2:
            raise argparse.ArgumentTypeError(f"expected 'min,max', got {text!r}")
        return tuple(parts)
    return parse


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg: CliConfig) -> int:
    split = tuple(args.split) if args.split else None
    if split is not None and len(split) != 3:
        raise UsageError("--split needs three counts: train,val,test")
    kwargs = dict(canvas=args.canvas, n_healthy=args.healthy, n_diseased=args.diseased, split=split)
    if args.lesions:
        kwargs["lesion_count"] = args.lesions
    if args.radius:
        kwargs["lesion_radius"] = args.radius
    try:
        synth = ds.SynthConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc))
    manifest = ds.synth_generate(synth, args.out, args.seed)
    s = manifest["split"]
    print(f"wrote {len(manifest['images'])} image/mask pairs to {args.out} "
          f"({synth.n_healthy} healthy, {synth.n_diseased} diseased; "
          f"split {len(s['train'])}/{len(s['val'])}/{len(s['test'])})")
    return 0


def _geometry(args, cfg: CliConfig) -> ds.Geometry:
    g = cfg.geometry
    try:
        return ds.Geometry(
            canvas=args.canvas or g.canvas, grid=args.grid or g.grid,
            patch=args.patch or g.patch, downsample=args.downsample or g.downsample)
    except ds.GeometryError as exc:
        raise UsageError(str(exc))


def cmd_tile(args, cfg: CliConfig) -> int:
    geometry = _geometry(args, cfg)
    out = Path(args.out or Path(args.data) / "patches")
    out.mkdir(parents=True, exist_ok=True)
    manifest = ds.read_manifest(args.data)
    patches = ds.build_patch_dataset(args.data, geometry, workers=args.workers or cfg.workers)
    if patches.split is None:
        labels = ds.class_labels(manifest)
        n = len(patches.image_ids)
        val = test = int(round(0.2 * n))
        patches.split = ds.make_split(patches.image_ids, (n - val - test, val, test),
                                      derive_seed(cfg.seed, "split"), labels)
    patches.save(out / PATCH_STORE)

    images = []
    for k, iid in enumerate(patches.image_ids):
        sel = patches.image_index == k
        images.append({
            "id": iid,
            "label": "diseased" if patches.labels[sel].any() else "healthy",
            "n_patches": int(sel.sum()),
            "n_diseased_patches": int(patches.labels[sel].sum()),
            "overlap_pixels": patches.overlap[sel].tolist(),
        })
    summary = {
        "source": str(Path(args.data).resolve()),
        "geometry": dataclasses.asdict(geometry),
        "images": images,
        "split": patches.split.to_json(),
    }
    with open(out / PATCH_MANIFEST, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    n_dis = int(patches.labels.sum())
    print(f"tiled {len(images)} images into {len(patches.labels)} patches "
          f"({geometry.patches_per_image}/image, {n_dis} diseased) -> {out}")
    return 0


def _load_patches(path: str | os.PathLike) -> ds.PatchDataset:
    path = Path(path)
    return ds.PatchDataset.load(path / PATCH_STORE if path.is_dir() else path)


def cmd_train(args, cfg: CliConfig) -> int:
    if args.method not in METHODS:
        raise UsageError(f"--method must be one of {METHODS}")
    patches = _load_patches(args.data)
    seed = cfg.seed if args.seed is None else args.seed
    config = cfg.train_config(seed=derive_seed(seed, "train", args.labeled, args.repeat),
                              epochs=args.epochs, batch_size=args.batch_size,
                              input_size=patches.geometry.downsample)
    subset = ds.sample_labeled_subset(
        patches.split.train_ids, args.labeled, derive_seed(seed, "subset", args.labeled, args.repeat),
        patches.image_labels)
    run_dir = Path(args.run or Path(cfg.run_root) / f"{args.method}_n{args.labeled}_s{seed}")
    run = train(args.method, config, patches, subset, run_dir, resume=args.resume)
    last = run.losses[-1] if run.losses else None
    print(f"{args.method} run -> {run_dir} ({run.completed_epochs} epochs"
          + (f", final l_sup={last.l_supervised:.4f} l_unsup={last.l_unsupervised:.4f} "
             f"l_g={last.l_g:.4f}" if last else "") + ")")
    return 0


def cmd_eval(args, cfg: CliConfig) -> int:
    patches = _load_patches(args.data)
    result = evaluate_run(args.run, args.split, patches)
    out = Path(args.out or Path(args.run) / "report.json")
    result.write(out)
    print(json.dumps(result.report_json(), indent=2, sort_keys=True))
    return 0


def cmd_experiment(args, cfg: CliConfig) -> int:
    data_path = Path(args.data)
    patches = _load_patches(data_path)
    grid = args.grid or cfg.grid
    n_train = len(patches.split.train_ids)
    if max(grid) > n_train:
        raise UsageError(f"grid value {max(grid)} exceeds {n_train} training images")
    config = cfg.train_config(epochs=args.epochs, input_size=patches.geometry.downsample)
    methods = args.methods or list(METHODS)
    report = run_experiment(
        grid, args.repeats or cfg.repeats, config, patches, args.out,
        master_seed=cfg.seed if args.seed is None else args.seed, methods=methods,
        workers=args.workers or cfg.workers,
        dataset_path=data_path / PATCH_STORE if data_path.is_dir() else data_path)
    print(report.table(n_train), end="")
    return 0


def cmd_overlay(args, cfg: CliConfig) -> int:
    patch_dir = Path(args.data)
    patches = _load_patches(patch_dir)
    with open(patch_dir / PATCH_MANIFEST) as fh:
        source = Path(args.source or json.load(fh)["source"])
    g = patches.geometry
    if args.image not in patches.image_ids:
        raise UsageError(f"unknown image id {args.image!r}")
    run = TrainRun.load(args.run)
    disc = run.ema_discriminator()
    from .evaluation import predict_patch_logits

    idx = patches.indices_for([args.image])
    order = np.lexsort((patches.cols[idx], patches.rows[idx]))
    logits = predict_patch_logits(disc, patches.pixels[idx[order]])
    smap = score_map(scores_from_logits(logits, g.grid), g.canvas, args.image)
    blurred = gaussian_blur(smap, args.sigma or g.patch / 2)
    image = ds.load_and_normalize(source / "images" / f"{args.image}.png", g.canvas, args.image)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    render_overlay(image, blurred, args.alpha, out / f"{args.image}_overlay.png")
    save_score_map(smap, out / f"{args.image}_scoremap.bin")
    msg = f"wrote {out / (args.image + '_overlay.png')}"
    mask_paths = ds.mask_paths(source, args.image)
    if mask_paths:
        mask = ds.load_mask(mask_paths, g.canvas, args.image)
        if 0 < mask.mask.sum() < mask.mask.size:
            scored = blurred if args.score_blurred else smap
            msg += f"; localization AUC {localization_auc(scored, mask):.4f}"
    print(msg)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchssl", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic fundus-like cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--healthy", type=int, default=168)
    p.add_argument("--diseased", type=int, default=81)
    p.add_argument("--canvas", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", type=_int_list, help="train,val,test image counts")
    p.add_argument("--lesions", type=_pair(int), help="min,max lesions per diseased image")
    p.add_argument("--radius", type=_pair(float), help="min,max lesion radius in pixels")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("tile", help="normalise, tile and label a dataset into a patch store")
    p.add_argument("--data", required=True, help="dataset directory with manifest.json")
    p.add_argument("--out", help="output directory (default DATA/patches)")
    for name in ("canvas", "grid", "patch", "downsample", "workers"):
        p.add_argument(f"--{name}", type=int)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("train", help="train an SSL-GAN or ConvNet baseline")
    p.add_argument("--data", required=True, help="patch store directory")
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--labeled", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--repeat", type=int, default=0)
    p.add_argument("--run", help=f"run directory (default ${RUN_ROOT_ENV}/<method>_n<N>_s<seed>)")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="patch/image AUC of a run with EMA weights")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="labeled-count x repeats grid for both methods")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=_int_list)
    p.add_argument("--repeats", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--methods", type=lambda s: s.split(","))
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("overlay", help="heatmap overlay PNG for one image")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True, help="patch store directory")
    p.add_argument("--image", required=True)
    p.add_argument("--out", default=".")
    p.add_argument("--source", help="dataset directory (default: recorded by tile)")
    p.add_argument("--sigma", type=float, help="blur sigma in pixels (default patch/2)")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--score-blurred", action="store_true",
                   help="compute localization AUC on the blurred map")
    p.set_defaults(func=cmd_overlay)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 2 for usage errors, 0 for --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = CliConfig.from_file(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"patchssl: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and map to exit code 1
        log.debug("command failed", exc_info=True)
        print(f"patchssl: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
