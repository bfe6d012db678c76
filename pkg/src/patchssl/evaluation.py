"""Patch predictions, image-level aggregation, ROC-AUC and the experiment grid."""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy.special import expit
from scipy.stats import rankdata

from .dataset import PatchDataset, sample_labeled_subset
from .seeds import derive_seed
from .training import METHODS, TrainConfig, TrainRun, train

log = logging.getLogger(__name__)


class UndefinedAUCError(ValueError):
    """AUC requested for labels that contain a single class."""


def patch_diseased_logit(logits: np.ndarray | torch.Tensor) -> np.ndarray:
    """Binary log-odds diseased vs healthy from (..., 2) real-class logits."""
    logits = np.asarray(logits.detach() if isinstance(logits, torch.Tensor) else logits,
                        dtype=np.float64)
    if logits.shape[-1] != 2:
        raise ValueError(f"binary task expects 2 logits, got {logits.shape[-1]}")
    return logits[..., 1] - logits[..., 0]


def aggregate_image_score(patch_logits: Sequence[float] | np.ndarray) -> float:
    """Sum of per-patch sigmoids."""
    arr = np.asarray(patch_logits, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot aggregate an empty patch list")
    return float(expit(arr).sum())


def roc_auc(scores: Sequence[float] | np.ndarray, labels: Sequence[int] | np.ndarray) -> float:
    """Mann-Whitney AUC with ties counted as one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC needs at least one positive and one negative")
    ranks = rankdata(s)  # average ranks; exact halves for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def choose_threshold(val_scores: Sequence[float], val_labels: Sequence[int]) -> float:
    """Youden-J optimal cut; candidates are midpoints between adjacent distinct scores.

    A sample is predicted diseased when its score exceeds the threshold. Among
    equally good cuts the lowest (most sensitive) one is returned.
    """
    s = np.asarray(val_scores, dtype=np.float64)
    y = np.asarray(val_labels).astype(bool)
    if y.all() or not y.any():
        raise UndefinedAUCError("threshold selection needs both classes")
    distinct = np.unique(s)
    if distinct.size == 1:
        return float(distinct[0])
    # midpoints plus the two trivial cuts (everything positive / nothing positive)
    candidates = np.concatenate([[distinct[0] - 1.0], (distinct[:-1] + distinct[1:]) / 2.0,
                                 [distinct[-1]]])
    j = [youden(s, y, t) for t in candidates]
    return float(candidates[int(np.argmax(j))])


def sens_spec(scores: np.ndarray, labels: np.ndarray, threshold: float) -> tuple[float, float]:
    pred = np.asarray(scores) > threshold
    y = np.asarray(labels).astype(bool)
    return float(pred[y].mean()), float((~pred[~y]).mean())


def youden(scores: np.ndarray, labels: np.ndarray, threshold: float) -> float:
    sens, spec = sens_spec(scores, labels, threshold)
    return sens + spec - 1.0


@dataclass
class ImageScore:
    image_id: str
    patch_logits: np.ndarray
    score: float
    true_label: int

    @classmethod
    def from_logits(cls, image_id: str, patch_logits: np.ndarray, true_label: int) -> "ImageScore":
        return cls(image_id, np.asarray(patch_logits, np.float64),
                   aggregate_image_score(patch_logits), int(true_label))


@dataclass
class RocReport:
    auc: float
    n_pos: int
    n_neg: int
    threshold: float | None = None
    sensitivity: float | None = None
    specificity: float | None = None

    @classmethod
    def build(cls, scores, labels, threshold: float | None = None) -> "RocReport":
        y = np.asarray(labels).astype(bool)
        report = cls(roc_auc(scores, y), int(y.sum()), int((~y).sum()), threshold)
        if threshold is not None:
            report.sensitivity, report.specificity = sens_spec(scores, y, threshold)
        return report


@torch.no_grad()
def predict_patch_logits(disc: torch.nn.Module, pixels: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Eval-mode diseased log-odds for NHWC patches in [-1, 1]."""
    disc.eval()
    out = []
    for start in range(0, len(pixels), batch_size):
        chunk = np.ascontiguousarray(pixels[start:start + batch_size].transpose(0, 3, 1, 2))
        logits, _ = disc(torch.from_numpy(chunk).float(), train=False)
        out.append(patch_diseased_logit(logits))
    return np.concatenate(out) if out else np.zeros(0)


def image_scores(dataset: PatchDataset, ids: Iterable[str], patch_logits: np.ndarray,
                 indices: np.ndarray) -> list[ImageScore]:
    """Group patch logits (aligned with ``indices``) by image, in sorted id order."""
    truth = dataset.image_labels
    owner = dataset.image_index[indices]
    out = []
    for iid in sorted(ids):
        k = dataset.image_ids.index(iid)
        sel = owner == k
        # row-major grid order
        order = np.lexsort((dataset.cols[indices][sel], dataset.rows[indices][sel]))
        out.append(ImageScore.from_logits(iid, patch_logits[sel][order], truth[iid]))
    return out


@dataclass
class Evaluation:
    split: str
    patch: RocReport
    image: RocReport
    images: list[ImageScore]
    n_patches: int

    def report_json(self) -> dict:
        return {
            "patch_auc": self.patch.auc,
            "image_auc": self.image.auc,
            "n_images": len(self.images),
            "n_patches": self.n_patches,
            "threshold": self.image.threshold,
            "sensitivity": self.image.sensitivity,
            "specificity": self.image.specificity,
        }

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.report_json(), fh, indent=2, sort_keys=True)


def evaluate_logits(dataset: PatchDataset, ids: Sequence[str], indices: np.ndarray,
                    patch_logits: np.ndarray, split: str,
                    threshold: float | None = None) -> Evaluation:
    scores = image_scores(dataset, ids, patch_logits, indices)
    patch = RocReport.build(patch_logits, dataset.labels[indices])
    image = RocReport.build([s.score for s in scores], [s.true_label for s in scores], threshold)
    return Evaluation(split, patch, image, scores, len(indices))


def evaluate_run(run: TrainRun | str | os.PathLike, split: str, dataset: PatchDataset,
                 threshold: float | None = None) -> Evaluation:
    """Score every patch of a split with the EMA discriminator.

    For the test split the image threshold is picked on the validation split
    (Youden's J) unless one is given; without a two-class validation split
    no threshold is reported.
    """
    if not isinstance(run, TrainRun):
        run = TrainRun.load(run)
    if dataset.split is None:
        raise ValueError("dataset carries no split manifest")
    disc = run.ema_discriminator()
    if threshold is None:
        threshold = _validation_threshold(disc, dataset)
    return _evaluate_with(disc, dataset, split, threshold)


def _validation_threshold(disc, dataset: PatchDataset) -> float | None:
    ids = dataset.split.val_ids
    if not ids:
        return None
    idx = dataset.indices_for(ids)
    scored = image_scores(dataset, ids, predict_patch_logits(disc, dataset.pixels[idx]), idx)
    labels = [s.true_label for s in scored]
    if not 0 < sum(labels) < len(labels):
        return None
    return choose_threshold([s.score for s in scored], labels)


def _evaluate_with(disc, dataset: PatchDataset, split: str, threshold: float | None) -> Evaluation:
    ids = dataset.split.ids(split)
    idx = dataset.indices_for(ids)
    logits = predict_patch_logits(disc, dataset.pixels[idx])
    return evaluate_logits(dataset, ids, idx, logits, split, threshold)


# ---------------------------------------------------------------------------
# experiment grid


@dataclass
class ExperimentRow:
    method: str
    labeled_count: int
    repeat: int
    seed: int
    patch_auc: float
    image_auc: float


@dataclass
class CellSummary:
    method: str
    labeled_count: int
    n: int
    patch_mean: float
    patch_std: float
    image_mean: float
    image_std: float
    single_repeat: bool = False


@dataclass
class ExperimentReport:
    rows: list[ExperimentRow]
    repeats: int
    grid: list[int]
    methods: list[str] = field(default_factory=lambda: list(METHODS))

    def cells(self) -> list[CellSummary]:
        out = []
        for method in self.methods:
            for count in self.grid:
                sel = [r for r in self.rows if r.method == method and r.labeled_count == count]
                if not sel:
                    continue
                p = np.array([r.patch_auc for r in sel])
                i = np.array([r.image_auc for r in sel])
                single = len(sel) == 1
                std = (lambda a: 0.0) if single else (lambda a: float(a.std(ddof=1)))
                out.append(CellSummary(method, count, len(sel), float(p.mean()), std(p),
                                       float(i.mean()), std(i), single))
        return out

    def cell(self, method: str, count: int) -> CellSummary:
        for c in self.cells():
            if c.method == method and c.labeled_count == count:
                return c
        raise KeyError((method, count))

    def table(self, n_train: int | None = None) -> str:
        """Mean +- std AUC (in %) per method and labeled count, patch and image level."""
        cells = {(c.method, c.labeled_count): c for c in self.cells()}
        head = [f"{n}/{n_train}" if n_train else str(n) for n in self.grid]
        lines = []
        for level in ("patch", "image"):
            lines.append(f"{level}-level AUC | " + " | ".join(head))
            for method in self.methods:
                vals = []
                for n in self.grid:
                    c = cells.get((method, n))
                    if c is None:
                        vals.append("-")
                        continue
                    mean, std = getattr(c, f"{level}_mean"), getattr(c, f"{level}_std")
                    flag = "*" if c.single_repeat else ""
                    vals.append(f"{100 * mean:.1f} ± {100 * std:.1f}{flag}")
                lines.append(f"{method} ({level}) | " + " | ".join(vals))
            lines.append("")
        if any(c.single_repeat for c in cells.values()):
            lines.append("* single repeat: std reported as 0")
        return "\n".join(lines).rstrip() + "\n"

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "labeled_count", "repeat", "seed", "patch_auc", "image_auc"])
            for r in self.rows:
                w.writerow([r.method, r.labeled_count, r.repeat, r.seed, repr(r.patch_auc),
                            repr(r.image_auc)])

    @staticmethod
    def read_csv(path: str | os.PathLike) -> list[ExperimentRow]:
        with open(path, newline="") as fh:
            return [ExperimentRow(r["method"], int(r["labeled_count"]), int(r["repeat"]),
                                  int(r["seed"]), float(r["patch_auc"]), float(r["image_auc"]))
                    for r in csv.DictReader(fh)]


def _run_cell(args) -> list[ExperimentRow]:
    method, count, repeat, config_dict, dataset_path, out_dir, master_seed = args
    torch.set_num_threads(1)
    dataset = PatchDataset.load(dataset_path)
    return [_cell(method, count, repeat, TrainConfig.from_dict(config_dict), dataset,
                  Path(out_dir), master_seed)]


def _cell(method: str, count: int, repeat: int, config: TrainConfig, dataset: PatchDataset,
          out_dir: Path, master_seed: int) -> ExperimentRow:
    train_ids = dataset.split.train_ids
    subset_seed = derive_seed(master_seed, "subset", count, repeat)
    subset = sample_labeled_subset(train_ids, count, subset_seed, dataset.image_labels)
    train_seed = derive_seed(master_seed, "train", count, repeat)
    run_dir = out_dir / "runs" / f"{method}_n{count}_r{repeat}"
    run = train(method, config.replace(seed=train_seed), dataset, subset, run_dir)
    ev = evaluate_run(run, "test", dataset)
    ev.write(run_dir / "report.json")
    log.info("%s n=%d r=%d patch %.3f image %.3f", method, count, repeat, ev.patch.auc,
             ev.image.auc)
    return ExperimentRow(method, count, repeat, train_seed, ev.patch.auc, ev.image.auc)


def run_experiment(grid: Sequence[int], repeats: int, config: TrainConfig, dataset: PatchDataset,
                   out_dir: str | os.PathLike, master_seed: int = 0,
                   methods: Sequence[str] = METHODS, workers: int = 1,
                   dataset_path: str | os.PathLike | None = None) -> ExperimentReport:
    """Train and test every (method, labeled count, repeat) cell.

    The labeled subset and training seed of a cell depend only on
    ``(master_seed, count, repeat)``, so both methods see the same labeled
    images and the grid can be fanned out over processes (``workers > 1``,
    requires ``dataset_path``) with results identical to the serial path.
    """
    grid = [int(n) for n in grid]
    if not grid or repeats < 1:
        raise ValueError("need a non-empty grid and at least one repeat")
    if dataset.split is None:
        raise ValueError("dataset carries no split manifest")
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = [(m, n, r) for m in methods for n in grid for r in range(repeats)]
    if workers > 1:
        if dataset_path is None:
            raise ValueError("parallel experiments need dataset_path")
        jobs = [(m, n, r, config.to_dict(), os.fspath(dataset_path), os.fspath(out), master_seed)
                for m, n, r in cells]
        with ProcessPoolExecutor(workers) as pool:
            rows = [row for chunk in pool.map(_run_cell, jobs) for row in chunk]
    else:
        rows = [_cell(m, n, r, config, dataset, out, master_seed) for m, n, r in cells]
    report = ExperimentReport(rows, repeats, grid, list(methods))
    report.write_csv(out / "experiment.csv")
    with open(out / "summary.json", "w") as fh:
        json.dump([asdict(c) for c in report.cells()], fh, indent=2)
    return report
