"""Image ingestion, grid tiling, patch labeling, splits and synthetic data.

Images are normalised by their own maximum intensity, tiled on a uniform
``grid x grid`` lattice of ``patch x patch`` blocks, and each block is labeled
diseased when at least one pixel of the (combined) lesion mask falls inside
it. Network inputs are area-downsampled blocks shifted into ``[-1, 1]``.
"""

from __future__ import annotations

import enum
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from .container import load_container, save_container

log = logging.getLogger(__name__)


class GeometryError(ValueError):
    """Canvas, grid, patch and downsample sizes do not fit together."""


class ImageFormatError(ValueError):
    """Raster is readable but not a 3-channel RGB image."""


class PatchLabel(enum.IntEnum):
    UNLABELED = -1
    HEALTHY = 0
    DISEASED = 1


@dataclass
class RawImage:
    image_id: str
    pixels: np.ndarray  # H x W x 3, float32 in [0, 1]
    source_path: str = ""
    all_zero: bool = False


@dataclass
class SegMask:
    image_id: str
    mask: np.ndarray  # H x W, uint8 in {0, 1}


@dataclass
class PatchRecord:
    image_id: str
    row: int
    col: int
    pixels: np.ndarray  # P' x P' x 3 in [-1, 1]
    label: PatchLabel
    overlap_pixels: int


@dataclass(frozen=True)
class Geometry:
    """Pipeline geometry. Defaults: 1024 canvas, 8x8 grid of 128 px, fed at 32 px."""

    canvas: int = 1024
    grid: int = 8
    patch: int = 128
    downsample: int = 32

    def __post_init__(self):
        if min(self.canvas, self.grid, self.patch, self.downsample) < 1:
            raise GeometryError("geometry sizes must be positive")
        if self.grid * self.patch != self.canvas:
            raise GeometryError(
                f"grid*patch = {self.grid}*{self.patch} != canvas {self.canvas}"
            )
        if self.patch % self.downsample:
            raise GeometryError(
                f"patch {self.patch} not divisible by downsample target {self.downsample}"
            )

    @property
    def patches_per_image(self) -> int:
        return self.grid * self.grid


# ---------------------------------------------------------------------------
# ingestion


def _resize(array: np.ndarray, size: int, mode: str) -> np.ndarray:
    if array.shape[0] == size and array.shape[1] == size:
        return array
    t = torch.from_numpy(np.ascontiguousarray(array, dtype=np.float32))
    t = t.permute(2, 0, 1)[None] if t.ndim == 3 else t[None, None]
    kwargs = {"align_corners": False} if mode == "bilinear" else {}
    out = F.interpolate(t, size=(size, size), mode=mode, **kwargs)[0]
    return out.permute(1, 2, 0).numpy() if array.ndim == 3 else out[0].numpy()


def _read_raster(path: str | os.PathLike) -> np.ndarray:
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    data = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if data is None:
        raise OSError(f"cannot decode raster {path}")
    return data


def load_and_normalize(path: str | os.PathLike, canvas: int, image_id: str | None = None) -> RawImage:
    """Load an 8/16-bit RGB raster, resize bilinearly to ``canvas``, divide by its max.

    All-zero images come back as zeros with ``all_zero`` set.
    """
    if canvas < 32:
        raise GeometryError("canvas must be at least 32 pixels")
    data = _read_raster(path)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ImageFormatError(f"{path}: expected RGB, got shape {data.shape}")
    if data.dtype not in (np.uint8, np.uint16):
        raise ImageFormatError(f"{path}: unsupported sample type {data.dtype}")
    rgb = data[:, :, ::-1].astype(np.float32)  # cv2 decodes BGR
    rgb = _resize(rgb, canvas, "bilinear")
    image_id = image_id if image_id is not None else Path(path).stem
    peak = float(rgb.max())
    if peak <= 0.0:
        log.warning("image %s is all zero; left unnormalised", image_id)
        return RawImage(image_id, np.zeros_like(rgb), os.fspath(path), all_zero=True)
    return RawImage(image_id, (rgb / peak).astype(np.float32), os.fspath(path))


def load_mask(paths: str | os.PathLike | Sequence[str | os.PathLike], canvas: int,
              image_id: str | None = None) -> SegMask:
    """OR together one or more lesion masks (nonzero = abnormal), nearest-resized to ``canvas``."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    if not paths:
        raise ValueError("no mask paths given")
    combined = np.zeros((canvas, canvas), dtype=np.uint8)
    for p in paths:
        data = _read_raster(p)
        if data.ndim == 3:
            data = data.max(axis=2)
        binary = (data > 0).astype(np.uint8)
        combined |= (_resize(binary, canvas, "nearest") > 0.5).astype(np.uint8)
    image_id = image_id if image_id is not None else Path(paths[0]).stem
    return SegMask(image_id, combined)


# ---------------------------------------------------------------------------
# tiling and labeling


def tile(image: RawImage | np.ndarray, grid: int, patch: int) -> list[tuple[int, int, np.ndarray]]:
    """Cut the image into ``grid**2`` non-overlapping blocks, row-major.

    Returns ``(row, col, block)`` triples; block (r, c) is
    ``pixels[r*patch:(r+1)*patch, c*patch:(c+1)*patch]``.
    """
    pixels = image.pixels if isinstance(image, RawImage) else np.asarray(image)
    h, w = pixels.shape[:2]
    if h != w or grid * patch != h:
        raise GeometryError(f"grid {grid} x patch {patch} does not tile a {h}x{w} canvas")
    return [
        (r, c, pixels[r * patch:(r + 1) * patch, c * patch:(c + 1) * patch])
        for r in range(grid)
        for c in range(grid)
    ]


def label_patch(mask: SegMask | np.ndarray, row: int, col: int, grid: int,
                patch: int) -> tuple[PatchLabel, int]:
    m = mask.mask if isinstance(mask, SegMask) else np.asarray(mask)
    if m.shape[0] != grid * patch or m.shape[1] != grid * patch:
        raise GeometryError(f"mask {m.shape} inconsistent with grid {grid} x patch {patch}")
    if not (0 <= row < grid and 0 <= col < grid):
        raise GeometryError(f"patch ({row}, {col}) outside a {grid}x{grid} grid")
    overlap = int(np.count_nonzero(m[row * patch:(row + 1) * patch, col * patch:(col + 1) * patch]))
    return (PatchLabel.DISEASED if overlap >= 1 else PatchLabel.HEALTHY), overlap


def block_overlaps(mask: np.ndarray, grid: int, patch: int) -> np.ndarray:
    """Vectorised per-block mask pixel counts, shape (grid, grid)."""
    m = (np.asarray(mask) > 0).astype(np.int64)
    if m.shape != (grid * patch, grid * patch):
        raise GeometryError(f"mask {m.shape} inconsistent with grid {grid} x patch {patch}")
    return m.reshape(grid, patch, grid, patch).sum(axis=(1, 3))


def downsample_patch(block: np.ndarray, target: int) -> np.ndarray:
    """Mean-pool a P x P x 3 block to ``target`` and map [0,1] -> [-1,1]."""
    block = np.asarray(block, dtype=np.float32)
    p = block.shape[0]
    if block.shape[1] != p or target < 1 or p % target:
        raise GeometryError(f"cannot pool a {block.shape[:2]} block to {target}x{target}")
    f = p // target
    pooled = block.reshape(target, f, target, f, -1).mean(axis=(1, 3))
    return 2.0 * pooled - 1.0


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitManifest:
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]
    seed: int

    def to_json(self) -> dict:
        return {"train": self.train_ids, "val": self.val_ids, "test": self.test_ids,
                "seed": self.seed}

    @classmethod
    def from_json(cls, data: Mapping) -> "SplitManifest":
        return cls(list(data["train"]), list(data["val"]), list(data["test"]), int(data["seed"]))

    def ids(self, split: str) -> list[str]:
        try:
            return {"train": self.train_ids, "val": self.val_ids, "test": self.test_ids}[split]
        except KeyError:
            raise ValueError(f"unknown split {split!r}") from None


@dataclass
class LabeledSubset:
    labeled_ids: list[str]
    unlabeled_ids: list[str]
    seed: int

    def to_json(self) -> dict:
        return {"labeled": self.labeled_ids, "unlabeled": self.unlabeled_ids, "seed": self.seed}

    @classmethod
    def from_json(cls, data: Mapping) -> "LabeledSubset":
        return cls(list(data["labeled"]), list(data["unlabeled"]), int(data["seed"]))


def make_split(image_ids: Sequence[str], counts: tuple[int, int, int], seed: int,
               labels: Mapping[str, int] | None = None) -> SplitManifest:
    """Seeded random train/val/test split.

    With ``labels`` the split is stratified: ids are shuffled within each class
    and interleaved by within-class quantile before being cut into consecutive
    chunks, so every split gets close to the cohort's class ratio.
    """
    ids = list(image_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate image ids")
    if any(c < 0 for c in counts) or sum(counts) != len(ids):
        raise ValueError(f"split counts {tuple(counts)} do not sum to {len(ids)} images")
    rng = np.random.default_rng(seed)
    if labels is None:
        order = [ids[i] for i in rng.permutation(len(ids))]
    else:
        keyed = []
        for cls in sorted({int(labels[i]) for i in ids}):
            members = [i for i in ids if int(labels[i]) == cls]
            perm = rng.permutation(len(members))
            for rank, j in enumerate(perm):
                keyed.append(((rank + 0.5) / len(members), cls, members[j]))
        keyed.sort(key=lambda t: (t[0], t[1]))
        order = [k[2] for k in keyed]
    n_train, n_val, _ = counts
    return SplitManifest(
        order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:], seed
    )


def sample_labeled_subset(train_ids: Sequence[str], n_labeled: int, seed: int,
                          labels: Mapping[str, int] | None = None) -> LabeledSubset:
    """Draw ``n_labeled`` training images to label; the rest stay unlabeled.

    When ``labels`` is given and both classes are present, one image of each
    class is guaranteed among the labeled ones (if ``n_labeled >= 2``).
    """
    train_ids = list(train_ids)
    if not 1 <= n_labeled <= len(train_ids):
        raise ValueError(f"n_labeled={n_labeled} outside [1, {len(train_ids)}]")
    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    if labels is not None and n_labeled >= 2:
        for cls in sorted({int(labels[i]) for i in train_ids}):
            members = [k for k, i in enumerate(train_ids) if int(labels[i]) == cls]
            chosen.append(int(members[rng.integers(len(members))]))
        if len(chosen) < 2:
            chosen = []
    rest = [k for k in range(len(train_ids)) if k not in chosen]
    chosen += [rest[k] for k in rng.permutation(len(rest))[: n_labeled - len(chosen)]]
    picked = set(chosen)
    return LabeledSubset(
        [i for k, i in enumerate(train_ids) if k in picked],
        [i for k, i in enumerate(train_ids) if k not in picked],
        seed,
    )


# ---------------------------------------------------------------------------
# patch dataset


@dataclass
class PatchDataset:
    """All patches of a cohort as flat arrays (one row per patch)."""

    geometry: Geometry
    image_ids: list[str]
    pixels: np.ndarray  # N x S x S x 3 float32 in [-1, 1]
    labels: np.ndarray  # N, 0 healthy / 1 diseased
    overlap: np.ndarray  # N
    image_index: np.ndarray  # N, index into image_ids
    rows: np.ndarray
    cols: np.ndarray
    split: SplitManifest | None = None

    def __post_init__(self):
        self._pos = {iid: k for k, iid in enumerate(self.image_ids)}

    @property
    def image_labels(self) -> dict[str, int]:
        """An image is diseased iff any of its patches is."""
        diseased = np.zeros(len(self.image_ids), dtype=np.int64)
        np.maximum.at(diseased, self.image_index, self.labels)
        return {iid: int(diseased[k]) for k, iid in enumerate(self.image_ids)}

    def indices_for(self, ids: Iterable[str]) -> np.ndarray:
        wanted = np.zeros(len(self.image_ids), dtype=bool)
        for iid in ids:
            wanted[self._pos[iid]] = True
        return np.flatnonzero(wanted[self.image_index])

    def records(self, ids: Iterable[str] | None = None,
                labeled: Iterable[str] | None = None) -> Iterator[PatchRecord]:
        """Yield PatchRecords; images outside ``labeled`` (if given) get UNLABELED."""
        idx = np.arange(len(self.labels)) if ids is None else self.indices_for(ids)
        known = None if labeled is None else set(labeled)
        for k in idx:
            iid = self.image_ids[self.image_index[k]]
            label = PatchLabel(int(self.labels[k]))
            if known is not None and iid not in known:
                label = PatchLabel.UNLABELED
            yield PatchRecord(iid, int(self.rows[k]), int(self.cols[k]), self.pixels[k],
                              label, int(self.overlap[k]))

    def save(self, path: str | os.PathLike) -> None:
        save_container(
            path,
            {
                "pixels": self.pixels,
                "labels": self.labels,
                "overlap": self.overlap,
                "image_index": self.image_index,
                "rows": self.rows,
                "cols": self.cols,
            },
            {
                "kind": "patches",
                "geometry": asdict(self.geometry),
                "image_ids": self.image_ids,
                "split": None if self.split is None else self.split.to_json(),
            },
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PatchDataset":
        t, meta = load_container(path)
        if meta.get("kind") != "patches":
            raise ValueError(f"{path} is not a patch store")
        as_int = lambda a: a.astype(np.int64)  # noqa: E731
        return cls(
            Geometry(**meta["geometry"]),
            list(meta["image_ids"]),
            t["pixels"],
            as_int(t["labels"]),
            as_int(t["overlap"]),
            as_int(t["image_index"]),
            as_int(t["rows"]),
            as_int(t["cols"]),
            None if meta["split"] is None else SplitManifest.from_json(meta["split"]),
        )


def patchify(image: RawImage, mask: SegMask | None, geometry: Geometry) -> list[PatchRecord]:
    """Tile, label and downsample one image."""
    g = geometry
    if image.pixels.shape[:2] != (g.canvas, g.canvas):
        raise GeometryError(f"image {image.image_id} is {image.pixels.shape[:2]}, canvas {g.canvas}")
    m = np.zeros((g.canvas, g.canvas), np.uint8) if mask is None else mask.mask
    out = []
    for r, c, block in tile(image, g.grid, g.patch):
        label, overlap = label_patch(m, r, c, g.grid, g.patch)
        out.append(PatchRecord(image.image_id, r, c, downsample_patch(block, g.downsample),
                               label, overlap))
    return out


def mask_paths(root: Path, image_id: str) -> list[Path]:
    """``masks/<id>.png`` plus any per-lesion ``masks/<kind>/<id>.png``."""
    masks = Path(root) / "masks"
    found = [masks / f"{image_id}.png"] if (masks / f"{image_id}.png").is_file() else []
    if masks.is_dir():
        found += sorted(p / f"{image_id}.png" for p in masks.iterdir()
                        if p.is_dir() and (p / f"{image_id}.png").is_file())
    return found


def read_manifest(root: str | os.PathLike) -> dict:
    with open(Path(root) / "manifest.json") as fh:
        return json.load(fh)


def build_patch_dataset(root: str | os.PathLike, geometry: Geometry,
                        workers: int = 1) -> PatchDataset:
    """Ingest ``root/images`` and ``root/masks`` listed in ``root/manifest.json``.

    Images without any mask file are treated as having an empty mask.
    """
    root = Path(root)
    manifest = read_manifest(root)
    ids = [entry["id"] for entry in manifest["images"]]

    def one(iid: str) -> list[PatchRecord]:
        image = load_and_normalize(root / "images" / f"{iid}.png", geometry.canvas, iid)
        paths = mask_paths(root, iid)
        mask = load_mask(paths, geometry.canvas, iid) if paths else None
        return patchify(image, mask, geometry)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            per_image = dict(zip(ids, pool.map(one, ids)))
    else:
        per_image = {iid: one(iid) for iid in ids}

    records = [rec for iid in ids for rec in per_image[iid]]
    pos = {iid: k for k, iid in enumerate(ids)}
    s = geometry.downsample
    pixels = (np.stack([r.pixels for r in records]).astype(np.float32)
              if records else np.zeros((0, s, s, 3), np.float32))
    split = manifest.get("split")
    return PatchDataset(
        geometry=geometry,
        image_ids=ids,
        pixels=pixels,
        labels=np.array([int(r.label) for r in records], dtype=np.int64),
        overlap=np.array([r.overlap_pixels for r in records], dtype=np.int64),
        image_index=np.array([pos[r.image_id] for r in records], dtype=np.int64),
        rows=np.array([r.row for r in records], dtype=np.int64),
        cols=np.array([r.col for r in records], dtype=np.int64),
        split=None if split is None else SplitManifest.from_json(split),
    )


# ---------------------------------------------------------------------------
# synthetic fundus-like cohort


@dataclass
class SynthConfig:
    """Desk-scale stand-in for a fundus cohort.

    Lesion radii are in pixels at the given canvas. ``split`` defaults to a
    60/20/20 stratified split.
    """

    canvas: int = 64
    n_healthy: int = 168
    n_diseased: int = 81
    lesion_count: tuple[int, int] = (1, 4)
    lesion_radius: tuple[float, float] = (1.0, 2.5)
    lesion_intensity: tuple[float, float] = (0.75, 1.0)
    texture_amplitude: float = 0.05
    split: tuple[int, int, int] | None = None

    def __post_init__(self):
        self.lesion_count = tuple(self.lesion_count)
        self.lesion_radius = tuple(self.lesion_radius)
        self.lesion_intensity = tuple(self.lesion_intensity)
        if self.split is not None:
            self.split = tuple(self.split)
        if self.canvas < 32:
            raise ValueError("canvas must be at least 32")
        if self.n_healthy < 0 or self.n_diseased < 0 or self.n_healthy + self.n_diseased == 0:
            raise ValueError("need a non-empty cohort")
        lo, hi = self.lesion_count
        if lo < 1 or hi < lo:
            raise ValueError("diseased images need lesion_count ranges with min >= 1")
        rlo, rhi = self.lesion_radius
        # a pixel square centred on the lesion centre fits inside radius >= sqrt(2)/2
        if rlo < 0.75 or rhi < rlo:
            raise ValueError("lesion_radius must satisfy 0.75 <= min <= max")
        ilo, ihi = self.lesion_intensity
        if not 0.0 < ilo <= ihi <= 1.0:
            raise ValueError("lesion_intensity must lie in (0, 1]")

    @property
    def total(self) -> int:
        return self.n_healthy + self.n_diseased

    def split_counts(self) -> tuple[int, int, int]:
        if self.split is not None:
            return self.split
        n = self.total
        val = test = int(round(0.2 * n))
        return n - val - test, val, test


_FUNDUS_RGB = np.array([0.72, 0.32, 0.12], np.float32)
_DISC_RGB = np.array([0.95, 0.82, 0.55], np.float32)
_EXUDATE_RGB = np.array([1.0, 0.93, 0.45], np.float32)
_HEMORRHAGE_RGB = np.array([0.22, 0.03, 0.02], np.float32)


def disc_pixels(canvas: int, cy: float, cx: float, radius: float) -> np.ndarray:
    """Pixels whose whole unit square lies inside the disc (so count <= pi r^2)."""
    y = np.arange(canvas, dtype=np.float64)[:, None]
    x = np.arange(canvas, dtype=np.float64)[None, :]
    dy = np.maximum(np.abs(y - cy), np.abs(y + 1 - cy))
    dx = np.maximum(np.abs(x - cx), np.abs(x + 1 - cx))
    return dy ** 2 + dx ** 2 <= radius ** 2


def render_fundus(config: SynthConfig, rng: np.random.Generator,
                  n_lesions: int, diseased: bool) -> tuple[np.ndarray, np.ndarray]:
    """One synthetic image (H x W x 3 in [0,1]) and its lesion mask."""
    if diseased and n_lesions < 1:
        raise ValueError("a diseased image needs at least one lesion")
    if not diseased and n_lesions:
        raise ValueError("a healthy image cannot carry lesions")
    c = config.canvas
    y, x = np.mgrid[0:c, 0:c].astype(np.float32) + 0.5
    cy, cx = c / 2 + rng.uniform(-0.02, 0.02, 2) * c
    radius = 0.45 * c
    d = np.hypot(y - cy, x - cx) / radius
    field = (d <= 1.0).astype(np.float32)

    noise = gaussian_filter(rng.standard_normal((c, c)), sigma=c / 10, mode="reflect")
    noise = noise / (noise.std() + 1e-12) * config.texture_amplitude
    shade = (1.0 - 0.45 * d ** 2) * rng.uniform(0.8, 1.0)
    img = _FUNDUS_RGB[None, None, :] * shade[..., None] + noise[..., None].astype(np.float32)

    side = rng.choice([-1.0, 1.0])
    oy, ox = cy + rng.uniform(-0.05, 0.05) * c, cx + side * 0.25 * c
    disc_r = 0.07 * c
    w = 0.7 * np.exp(-((y - oy) ** 2 + (x - ox) ** 2) / (2 * disc_r ** 2))
    img = img * (1 - w[..., None]) + _DISC_RGB * w[..., None]

    mask = np.zeros((c, c), dtype=bool)
    dist_disc = np.hypot(y - oy, x - ox)
    allowed = np.argwhere((d <= 0.8) & (dist_disc > 2 * disc_r))
    for _ in range(n_lesions):
        py, px = allowed[rng.integers(len(allowed))]
        r = rng.uniform(*config.lesion_radius)
        blob = disc_pixels(c, py + 0.5, px + 0.5, r)
        colour = _EXUDATE_RGB if rng.random() < 0.5 else _HEMORRHAGE_RGB
        a = rng.uniform(*config.lesion_intensity)
        img[blob] = (1 - a) * img[blob] + a * colour
        mask |= blob
    img = np.clip(img * field[..., None], 0.0, 1.0)
    return img, mask.astype(np.uint8)


def _write_png(path: Path, array: np.ndarray) -> None:
    if array.ndim == 3:
        array = array[:, :, ::-1]
    if not cv2.imwrite(os.fspath(path), np.ascontiguousarray(array)):
        raise OSError(f"could not write {path}")


def synth_generate(config: SynthConfig, out_dir: str | os.PathLike, seed: int) -> dict:
    """Write ``images/``, ``masks/`` and ``manifest.json`` under ``out_dir``.

    Returns the manifest. Output is a pure function of (config, seed).
    """
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc

    rng = np.random.default_rng(seed)
    classes = np.array([0] * config.n_healthy + [1] * config.n_diseased)
    classes = classes[rng.permutation(len(classes))]
    entries = []
    for k, cls in enumerate(classes):
        iid = f"img_{k:04d}"
        n = int(rng.integers(config.lesion_count[0], config.lesion_count[1] + 1)) if cls else 0
        img, mask = render_fundus(config, rng, n, bool(cls))
        _write_png(out / "images" / f"{iid}.png", np.round(img * 255).astype(np.uint8))
        _write_png(out / "masks" / f"{iid}.png", mask * 255)
        entries.append({"id": iid, "label": "diseased" if cls else "healthy", "n_lesions": n})

    labels = {e["id"]: int(e["label"] == "diseased") for e in entries}
    split = make_split([e["id"] for e in entries], config.split_counts(), seed, labels)
    cfg = asdict(config)
    manifest = {
        "canvas": config.canvas,
        "seed": seed,
        "config": cfg,
        "images": entries,
        "split": split.to_json(),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def class_labels(manifest: Mapping) -> dict[str, int]:
    return {e["id"]: int(e["label"] == "diseased") for e in manifest["images"]}


__all__ = [
    "Geometry", "GeometryError", "ImageFormatError", "LabeledSubset", "PatchDataset",
    "PatchLabel", "PatchRecord", "RawImage", "SegMask", "SplitManifest", "SynthConfig",
    "block_overlaps", "build_patch_dataset", "class_labels", "downsample_patch",
    "label_patch", "load_and_normalize", "load_mask", "make_split", "patchify",
    "read_manifest", "render_fundus", "sample_labeled_subset", "synth_generate", "tile",
]
