"""Grad-CAM heatmaps of similarity scores over query images."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

from .autodiff import DiffArray, Parameter, numeric_mode
from .data import CHANNEL_MEAN, CHANNEL_STD, IMAGE_SIZE, Episode
from .engine import BisimModel, predict

log = logging.getLogger(__name__)

MEAN_HEAD = "mean"


def _red_heat_table() -> np.ndarray:
    # black -> red -> yellow -> white in integer steps; bit-exact by construction
    i = np.arange(256, dtype=np.int64) * 3
    return np.stack([np.clip(i, 0, 255), np.clip(i - 255, 0, 255), np.clip(i - 510, 0, 255)],
                    axis=1).astype(np.uint8)


RED_HEAT = _red_heat_table()


@dataclass
class Heatmap:
    """Normalized class-activation map of one score.

    ``values`` lives at the embedding's spatial resolution, ``upsampled`` at
    84x84 and ``overlay`` is the 3x84x84 blend of the colour-mapped heatmap
    with the query image. ``zero`` flags a map that came out all zero.
    """

    values: np.ndarray
    upsampled: np.ndarray
    overlay: np.ndarray
    target_class: int
    head: str
    zero: bool


def upsample(values: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Bilinear resize of an h x w map to size x size."""
    img = Image.fromarray(np.ascontiguousarray(values, dtype=np.float32), mode="F")
    return np.clip(np.asarray(img.resize((size, size), Image.BILINEAR), dtype=np.float64), 0.0, 1.0)


def colorize(values: np.ndarray) -> np.ndarray:
    """HxW map in [0, 1] -> HxWx3 uint8 through the red-heat table."""
    idx = np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(np.int64)
    return RED_HEAT[idx]


def denormalize(image: np.ndarray) -> np.ndarray:
    """3x84x84 network input -> HxWx3 in [0, 1]."""
    return np.clip(np.asarray(image).transpose(1, 2, 0) * CHANNEL_STD + CHANNEL_MEAN, 0.0, 1.0)


def cam_from_features(features: np.ndarray, score_fn: Callable[[DiffArray], DiffArray]):
    """Grad-CAM on a (C, h, w) feature map for a scalar ``score_fn``.

    Returns the normalized (h, w) map and a flag that is set when the map is
    all zero (no positive evidence, or zero gradient everywhere).
    """
    with numeric_mode("float64"):
        leaf = Parameter(np.asarray(features, dtype=np.float64))
        score = score_fn(leaf)
        if score.size != 1:
            raise ValueError(f"Grad-CAM needs a scalar score, got shape {score.shape}")
        score.backward()
        grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    weights = grad.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, leaf.data, axes=1), 0.0)
    lo, hi = cam.min(), cam.max()
    if not hi > lo:
        return np.zeros_like(cam), True
    return (cam - lo) / (hi - lo), False


def _heatmap(values, zero, image, target, head) -> Heatmap:
    up = upsample(values)
    heat = colorize(up).astype(np.float64) / 255.0
    overlay = (0.5 * denormalize(image) + 0.5 * heat).transpose(2, 0, 1)
    if zero:
        log.warning("all-zero Grad-CAM map for head %s, class %d", head, target)
    return Heatmap(values, up, overlay, target, head, zero)


def grad_cam(model: BisimModel, episode: Episode, query: int, target_class: Optional[int] = None,
             head: Optional[int] = None, features=None) -> Heatmap:
    """Heatmap of head ``head``'s score for ``target_class`` (the mean score when ``head`` is None).

    The default target is the model's combined prediction for the query.
    """
    model.eval()
    with numeric_mode("float64"):
        support, queries = features if features is not None else model.embed_episode(episode)
        support = support.data
        qfeat = queries.data[query]
    heads = list(range(len(model.head))) if head is None else [head]
    if target_class is None:
        with numeric_mode("float64"):
            scores = np.stack([model.head[d].score(support, qfeat[None]).data for d in range(len(model.head))],
                              axis=-1)
        target_class = int(predict(scores)[0])

    def score_fn(leaf):
        total = None
        for d in heads:
            s = model.head[d].score(support, leaf.reshape(1, *leaf.shape))[0, target_class]
            total = s if total is None else total + s
        return total * (1.0 / len(heads))

    values, zero = cam_from_features(qfeat, score_fn)
    label = MEAN_HEAD if head is None else model.head_kinds[head]
    return _heatmap(values, zero, episode.query[query], target_class, label)


def episode_heatmaps(model: BisimModel, episode: Episode, query: int,
                     target_class: Optional[int] = None) -> Dict[str, Heatmap]:
    """One heatmap per head plus the heatmap of the head-averaged score."""
    model.eval()
    with numeric_mode("float64"):
        feats = model.embed_episode(episode)
    out = {}
    mean = grad_cam(model, episode, query, target_class, None, feats)
    target = mean.target_class
    for d, kind in enumerate(model.head_kinds):
        out[kind] = grad_cam(model, episode, query, target, d, feats)
    out[MEAN_HEAD] = mean
    return out


def heatmap_path(out_dir, episode_index: int, query: int, target_class: int, head: str) -> Path:
    return Path(out_dir) / f"{episode_index}_{query}_{target_class}_{head}.png"


def save_heatmap(heatmap: Heatmap, path) -> None:
    pixels = np.clip(np.rint(heatmap.overlay.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(os.fspath(path))


def write_episode_heatmaps(model: BisimModel, episode: Episode, episode_index: int, out_dir,
                           queries: Optional[Sequence[int]] = None, target: str = "predicted") -> List[Path]:
    """Write per-head and mean overlays for the chosen queries; returns the written paths."""
    if target not in ("predicted", "true"):
        raise ValueError(f"target must be 'predicted' or 'true', got {target!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    queries = range(len(episode.query)) if queries is None else queries
    paths = []
    for q in queries:
        cls = int(episode.query_labels[q]) if target == "true" else None
        for head, hm in episode_heatmaps(model, episode, q, cls).items():
            path = heatmap_path(out_dir, episode_index, q, hm.target_class, head)
            save_heatmap(hm, path)
            paths.append(path)
    return paths
