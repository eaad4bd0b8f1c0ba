"""Datasets, disjoint class splits, C-way K-shot episodes and image preprocessing."""

from __future__ import annotations

import colorsys
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

IMAGE_SIZE = 84
IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png", ".bmp", ".gif", ".ppm", ".tif", ".tiff", ".webp")
CHANNEL_MEAN = np.array([0.485, 0.456, 0.406])
CHANNEL_STD = np.array([0.229, 0.224, 0.225])


class DataError(RuntimeError):
    """Dataset cannot be read or cannot support the requested episodes."""


@dataclass(frozen=True)
class LabeledDataset:
    """Items ``(image_ref, class_id)`` plus the loader that turns a ref into an HxWx3 image in [0, 1]."""

    items: Tuple[Tuple[object, int], ...]
    class_names: Dict[int, str]
    loader: Callable[[object], np.ndarray] = field(repr=False, compare=False)
    split: Optional[str] = None
    errors: Tuple[Tuple[str, str], ...] = ()

    @property
    def classes(self) -> List[int]:
        return sorted({c for _, c in self.items})

    def items_of(self, class_id: int) -> List[int]:
        return [i for i, (_, c) in enumerate(self.items) if c == class_id]

    def by_class(self) -> Dict[int, List[int]]:
        out: Dict[int, List[int]] = {}
        for i, (_, c) in enumerate(self.items):
            out.setdefault(c, []).append(i)
        return out

    def load(self, index: int) -> np.ndarray:
        return self.loader(self.items[index][0])

    def subset(self, class_ids: Sequence[int], split: str) -> "LabeledDataset":
        keep = set(class_ids)
        return LabeledDataset(tuple(it for it in self.items if it[1] in keep),
                              {c: n for c, n in self.class_names.items() if c in keep},
                              self.loader, split, self.errors)

    def manifest(self) -> dict:
        return {"split": self.split,
                "classes": {str(c): n for c, n in sorted(self.class_names.items())},
                "items": [[str(ref), c] for ref, c in self.items],
                "errors": [list(e) for e in self.errors]}


def write_manifest(dataset: LabeledDataset, path) -> None:
    with open(path, "w") as fh:
        json.dump(dataset.manifest(), fh, indent=1, sort_keys=True)


# -- splitting -------------------------------------------------------------------------

def split_counts(n_classes: int, ratio: Sequence[int] = (2, 1, 1)) -> Tuple[int, int, int]:
    """Class counts per split: floor of the ratio share, remainder to train then val."""
    total = sum(ratio)
    counts = [n_classes * r // total for r in ratio]
    rem = n_classes - sum(counts)
    i = 0
    while rem > 0:
        counts[i % 2] += 1
        rem -= 1
        i += 1
    return tuple(counts)


def split_dataset(dataset: LabeledDataset, ratio: Sequence[int] = (2, 1, 1),
                  seed: int = 0) -> Tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Class-level split into train / val / test with pairwise disjoint label sets."""
    classes = dataset.classes
    if len(classes) < 4:
        raise DataError(f"need at least 4 classes to split, got {len(classes)}")
    n_train, n_val, n_test = split_counts(len(classes), ratio)
    if min(n_train, n_val, n_test) < 1:
        raise DataError(f"ratio {tuple(ratio)} leaves an empty split for {len(classes)} classes")
    order = np.random.default_rng(seed).permutation(classes)
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple(dataset.subset([int(c) for c in part], name)
                 for part, name in zip(parts, ("train", "val", "test")))


# -- episodes ---------------------------------------------------------------------------

@dataclass
class Episode:
    """One C-way K-shot task.

    ``support`` has shape (C, K, 3, 84, 84) in local class order; ``query``
    has shape (C * n_query, 3, 84, 84) with local labels ``query_labels``.
    """

    class_ids: List[int]
    support: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray
    support_items: np.ndarray
    query_items: np.ndarray

    @property
    def n_way(self) -> int:
        return len(self.class_ids)

    @property
    def k_shot(self) -> int:
        return self.support.shape[1]

    def local_index(self, class_id: int) -> int:
        return self.class_ids.index(class_id)

    def relabeled(self, permutation: Sequence[int]) -> "Episode":
        """Same task with local class ``i`` renamed to ``permutation[i]``."""
        perm = np.asarray(permutation)
        inverse = np.argsort(perm)
        return Episode([self.class_ids[j] for j in inverse], self.support[inverse],
                       self.query, perm[self.query_labels], self.support_items[inverse],
                       self.query_items)


def sample_episode_indices(dataset: LabeledDataset, n_way: int, k_shot: int, n_query: int,
                           rng: np.random.Generator, max_retries: int = 100):
    """Choose classes and item indices for one episode (no image decoding)."""
    groups = dataset.by_class()
    classes = sorted(groups)
    if len(classes) < n_way:
        raise DataError(f"split has {len(classes)} classes, episode needs {n_way}")
    need = k_shot + n_query
    chosen = [int(c) for c in rng.choice(classes, size=n_way, replace=False)]
    tried = set(chosen)
    retries = 0
    for slot in range(n_way):
        while len(groups[chosen[slot]]) < need:
            spare = [c for c in classes if c not in tried]
            if not spare or retries >= max_retries:
                raise DataError(f"cannot find {n_way} classes with at least {need} images each")
            retries += 1
            chosen[slot] = int(rng.choice(spare))
            tried.add(chosen[slot])
    support, query = [], []
    for c in chosen:
        picks = rng.choice(groups[c], size=need, replace=False)
        support.append(picks[:k_shot])
        query.append(picks[k_shot:])
    return chosen, np.array(support, dtype=np.int64), np.array(query, dtype=np.int64)


def sample_episode(dataset: LabeledDataset, n_way: int, k_shot: int, n_query: int,
                   rng: np.random.Generator, train_mode: bool = False,
                   augment: Optional["Augment"] = None) -> Episode:
    chosen, support_items, query_items = sample_episode_indices(dataset, n_way, k_shot, n_query, rng)
    augment = augment if augment is not None else Augment()

    def prep(index):
        return preprocess(dataset.load(int(index)), train_mode, rng, augment)

    support = np.stack([np.stack([prep(i) for i in row]) for row in support_items])
    query = np.stack([prep(i) for i in query_items.reshape(-1)])
    labels = np.repeat(np.arange(n_way), n_query)
    return Episode(chosen, support, query, labels, support_items, query_items.reshape(-1))


# -- image preprocessing -----------------------------------------------------------------

@dataclass(frozen=True)
class Augment:
    """Training-time augmentation settings."""

    enabled: bool = True
    crop_scale: Tuple[float, float] = (0.08, 1.0)
    crop_ratio: Tuple[float, float] = (3 / 4, 4 / 3)
    jitter: float = 0.4
    flip_p: float = 0.5


def _resize(image: np.ndarray, size: int, box: Optional[Tuple[float, float, float, float]] = None) -> np.ndarray:
    """Bilinear resize of an HxWx3 float image (optionally of the crop ``box`` = left, top, right, bottom)."""
    h, w = image.shape[:2]
    if box is None and (h, w) == (size, size):
        return image.astype(np.float32)
    channels = [np.asarray(Image.fromarray(np.ascontiguousarray(image[:, :, ch], dtype=np.float32), mode="F")
                           .resize((size, size), Image.BILINEAR, box=box))
                for ch in range(image.shape[2])]
    return np.stack(channels, axis=-1)


def random_resized_crop_box(h: int, w: int, rng: np.random.Generator, scale=(0.08, 1.0),
                            ratio=(3 / 4, 4 / 3)) -> Tuple[float, float, float, float]:
    area = h * w
    log_ratio = np.log(ratio)
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = np.exp(rng.uniform(*log_ratio))
        cw = int(round(np.sqrt(target * aspect)))
        ch = int(round(np.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return (left, top, left + cw, top + ch)
    side = min(h, w)
    return ((w - side) / 2, (h - side) / 2, (w + side) / 2, (h + side) / 2)


def color_jitter(image: np.ndarray, rng: np.random.Generator, strength: float) -> np.ndarray:
    """Random brightness, contrast and saturation factors in [1 - strength, 1 + strength]."""
    lo, hi = max(0.0, 1.0 - strength), 1.0 + strength
    out = image * rng.uniform(lo, hi)
    gray = out @ np.array([0.299, 0.587, 0.114])
    out = (out - gray.mean()) * rng.uniform(lo, hi) + gray.mean()
    gray = out @ np.array([0.299, 0.587, 0.114])
    out = (out - gray[..., None]) * rng.uniform(lo, hi) + gray[..., None]
    return np.clip(out, 0.0, 1.0)


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1]


def normalize(image: np.ndarray) -> np.ndarray:
    """HxWx3 in [0, 1] -> 3xHxW standardized per channel."""
    return ((image - CHANNEL_MEAN) / CHANNEL_STD).transpose(2, 0, 1).astype(np.float32)


def preprocess(image: np.ndarray, train_mode: bool, rng: Optional[np.random.Generator] = None,
               augment: Augment = Augment(), force_flip: Optional[bool] = None) -> np.ndarray:
    """Decoded RGB image (HxWx3, values in [0, 1]) -> normalized 3x84x84 array."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"expected an HxWx3 RGB image, got shape {image.shape}")
    h, w = image.shape[:2]
    if h < 8 or w < 8:
        raise DataError(f"image {w}x{h} is smaller than 8x8")
    if not train_mode or not augment.enabled:
        return normalize(_resize(image, IMAGE_SIZE))
    if rng is None:
        raise ValueError("training-mode preprocessing needs an rng")
    box = random_resized_crop_box(h, w, rng, augment.crop_scale, augment.crop_ratio)
    out = _resize(image, IMAGE_SIZE, box).astype(np.float64)
    if augment.jitter > 0:
        out = color_jitter(out, rng, augment.jitter)
    flip = rng.random() < augment.flip_p if force_flip is None else force_flip
    if flip:
        out = hflip(out)
    return normalize(out)


# -- image directories ------------------------------------------------------------------

def _decode(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def load_image_dir(root) -> LabeledDataset:
    """Read ``root/<class_name>/<file>``; class ids follow sorted class names.

    Unreadable files are recorded in ``errors`` rather than silently dropped.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not class_dirs:
        raise DataError(f"no class directories under {root}")
    items, errors, names = [], [], {}
    for cid, cdir in enumerate(class_dirs):
        names[cid] = cdir.name
        files = sorted(p for p in cdir.iterdir()
                       if p.is_file() and not p.name.startswith(".")
                       and p.suffix.lower() in IMAGE_EXTENSIONS)
        good = 0
        for f in files:
            try:
                with Image.open(f) as im:
                    im.verify()
            except Exception as exc:  # PIL raises a variety of types
                errors.append((str(f), f"{type(exc).__name__}: {exc}"))
                continue
            items.append((str(f), cid))
            good += 1
        if good == 0:
            raise DataError(f"class directory {cdir} has no readable images")
    return LabeledDataset(tuple(items), names, _decode, None, tuple(errors))


# -- synthetic fine-grained data ----------------------------------------------------------

SHAPES = ("disk", "square", "triangle", "ring", "cross", "diamond")


@dataclass(frozen=True)
class SyntheticSpec:
    """Parametric coloured-shape classes; ``variation`` scales every per-image perturbation."""

    n_classes: int = 30
    images_per_class: int = 30
    variation: float = 0.15
    seed: int = 0
    size: int = IMAGE_SIZE


def _class_params(spec: SyntheticSpec, c: int):
    n_shapes = len(SHAPES)
    groups = -(-spec.n_classes // n_shapes)
    shape = SHAPES[c % n_shapes]
    hue = ((c // n_shapes) / groups + 0.07 * (c % n_shapes)) % 1.0
    base = np.random.default_rng([spec.seed, 7919, c])
    background = 0.25 + 0.5 * base.random(3)
    return shape, hue, background


def _shape_mask(shape: str, yy: np.ndarray, xx: np.ndarray, radius: float) -> np.ndarray:
    ay, ax = np.abs(yy), np.abs(xx)
    if shape == "disk":
        return yy ** 2 + xx ** 2 <= radius ** 2
    if shape == "square":
        return np.maximum(ay, ax) <= radius * 0.85
    if shape == "triangle":
        return (yy <= radius * 0.8) & (yy >= 2.0 * ax - radius)
    if shape == "ring":
        r2 = yy ** 2 + xx ** 2
        return (r2 <= radius ** 2) & (r2 >= (0.55 * radius) ** 2)
    if shape == "cross":
        arm = radius * 0.35
        return ((ay <= arm) & (ax <= radius)) | ((ax <= arm) & (ay <= radius))
    if shape == "diamond":
        return ay + ax <= radius
    raise ValueError(shape)


def render_synthetic(spec: SyntheticSpec, class_id: int, index: int) -> np.ndarray:
    """Deterministic HxWx3 image in [0, 1] for item ``index`` of ``class_id``."""
    shape, hue, background = _class_params(spec, class_id)
    v = spec.variation
    rng = np.random.default_rng([spec.seed, class_id, index])
    jitter = rng.standard_normal(8)
    n = spec.size
    cy = n / 2 + v * 12.0 * jitter[0]
    cx = n / 2 + v * 12.0 * jitter[1]
    radius = n * 0.3 * (1.0 + 0.3 * v * jitter[2])
    h = (hue + 0.08 * v * jitter[3]) % 1.0
    color = np.array(colorsys.hsv_to_rgb(h, 0.85, 0.9))
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    mask = _shape_mask(shape, yy - cy, xx - cx, radius)
    img = np.empty((n, n, 3))
    img[:] = np.clip(background + 0.15 * v * jitter[4:7], 0.0, 1.0)
    img[mask] = color
    if v > 0:
        img += 0.25 * v * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic(spec: SyntheticSpec) -> LabeledDataset:
    """Lazily rendered synthetic dataset; the same spec always yields the same pixels."""
    items = tuple(((c, i), c) for c in range(spec.n_classes) for i in range(spec.images_per_class))
    names = {c: f"{_class_params(spec, c)[0]}-{c:03d}" for c in range(spec.n_classes)}
    return LabeledDataset(items, names, lambda ref: render_synthetic(spec, ref[0], ref[1]))


def save_image_dir(dataset: LabeledDataset, root) -> None:
    """Write a dataset as ``root/<class_name>/<nnnn>.png`` (8-bit)."""
    root = Path(root)
    counters: Dict[int, int] = {}
    for i, (_, c) in enumerate(dataset.items):
        cdir = root / dataset.class_names[c]
        cdir.mkdir(parents=True, exist_ok=True)
        k = counters.get(c, 0)
        counters[c] = k + 1
        pixels = np.clip(np.rint(dataset.load(i) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(pixels).save(os.fspath(cdir / f"{k:04d}.png"))
