"""Abnormality heatmaps: patch scores -> pixel map -> blur -> overlay PNG."""

from __future__ import annotations

import os
from dataclasses import dataclass

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import expit

from .container import save_container
from .dataset import RawImage, SegMask
from .evaluation import roc_auc

BLUR_TRUNCATE = 3.0


@dataclass
class ScoreMap:
    image_id: str
    map: np.ndarray  # H x W in [0, 1]


def score_map(patch_scores: np.ndarray, canvas: int, image_id: str = "") -> ScoreMap:
    """Fill each grid cell of a ``canvas`` x ``canvas`` map with its patch score."""
    scores = np.asarray(patch_scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ValueError(f"patch scores must be a square grid, got {scores.shape}")
    grid = scores.shape[0]
    if canvas % grid:
        raise ValueError(f"canvas {canvas} is not a multiple of grid {grid}")
    if scores.min() < 0.0 or scores.max() > 1.0:
        raise ValueError("patch scores must lie in [0, 1]")
    p = canvas // grid
    return ScoreMap(image_id, np.kron(scores, np.ones((p, p))))


def scores_from_logits(patch_logits: np.ndarray, grid: int) -> np.ndarray:
    """Row-major patch logits -> grid of sigmoid scores."""
    return expit(np.asarray(patch_logits, np.float64)).reshape(grid, grid)


def gaussian_blur(smap: ScoreMap, sigma: float) -> ScoreMap:
    """Normalised Gaussian, truncated at 3 sigma, reflect boundary; clipped to [0, 1]."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    out = gaussian_filter(np.asarray(smap.map, np.float64), sigma=sigma, mode="reflect",
                          truncate=BLUR_TRUNCATE)
    return ScoreMap(smap.image_id, np.clip(out, 0.0, 1.0))


def heat_colormap(values: np.ndarray) -> np.ndarray:
    """Black -> red -> yellow -> white ramp; 1.0 maps to white."""
    v = np.clip(np.asarray(values, np.float64), 0.0, 1.0)[..., None]
    return np.clip(3.0 * v - np.array([0.0, 1.0, 2.0]), 0.0, 1.0)


def grayscale(image: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma replicated to three channels."""
    luma = np.asarray(image, np.float64) @ np.array([0.299, 0.587, 0.114])
    return np.repeat(luma[..., None], 3, axis=2)


def blend(image: RawImage | np.ndarray, smap: ScoreMap, alpha: float) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    pixels = image.pixels if isinstance(image, RawImage) else np.asarray(image)
    if pixels.shape[:2] != smap.map.shape:
        raise ValueError(f"score map {smap.map.shape} does not match image {pixels.shape[:2]}")
    return (1.0 - alpha) * grayscale(pixels) + alpha * heat_colormap(smap.map)


def render_overlay(image: RawImage | np.ndarray, smap: ScoreMap, alpha: float,
                   path: str | os.PathLike) -> np.ndarray:
    """Write the heat overlay as an 8-bit RGB PNG and return the uint8 array."""
    rgb = np.round(np.clip(blend(image, smap, alpha), 0.0, 1.0) * 255).astype(np.uint8)
    if not cv2.imwrite(os.fspath(path), np.ascontiguousarray(rgb[:, :, ::-1])):
        raise OSError(f"could not write {path}")
    return rgb


def save_score_map(smap: ScoreMap, path: str | os.PathLike) -> None:
    save_container(path, {"map": smap.map}, {"kind": "scoremap", "image_id": smap.image_id})


def localization_auc(smap: ScoreMap, mask: SegMask | np.ndarray) -> float:
    """Pixel-level AUC of map values against the lesion mask."""
    m = mask.mask if isinstance(mask, SegMask) else np.asarray(mask)
    if m.shape != smap.map.shape:
        raise ValueError(f"mask {m.shape} does not match map {smap.map.shape}")
    return roc_auc(smap.map.ravel(), (m.ravel() > 0).astype(np.int64))
