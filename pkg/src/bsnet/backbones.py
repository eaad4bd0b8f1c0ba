"""Convolutional embeddings (Conv4, Conv6, Conv8, Conv64F) for 3x84x84 images."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .autodiff import ConvBlock, DiffArray, Module, ShapeError
from .autodiff.tensor import as_diff

INPUT_SHAPE = (3, 84, 84)
FILTERS = 64


@dataclass(frozen=True)
class BlockSpec:
    padding: int
    pool: Optional[str]  # "max", "avg" or None
    slope: float = 0.0


@dataclass(frozen=True)
class BackboneSpec:
    kind: str
    blocks: Tuple[BlockSpec, ...]
    filters: int = FILTERS
    kernel: int = 3

    def output_shape(self, input_hw: Tuple[int, int] = INPUT_SHAPE[1:]) -> Tuple[int, int, int]:
        h, w = input_hw
        for b in self.blocks:
            h = h + 2 * b.padding - self.kernel + 1
            w = w + 2 * b.padding - self.kernel + 1
            if b.pool:
                h, w = (h - 2) // 2 + 1, (w - 2) // 2 + 1
        return self.filters, h, w


# 84 -> 42 -> 21 -> 21 -> 19
_CONV4 = (BlockSpec(1, "max"), BlockSpec(1, "max"), BlockSpec(1, None), BlockSpec(0, None))
# 84 -> 42 -> 21 -> 21 -> 21
_CONV64F = tuple(BlockSpec(1, pool, 0.2) for pool in ("max", "max", None, None))

BACKBONES = {
    "conv4": BackboneSpec("conv4", _CONV4),
    "conv6": BackboneSpec("conv6", _CONV4 + (BlockSpec(1, None),) * 2),
    "conv8": BackboneSpec("conv8", _CONV4 + (BlockSpec(1, None),) * 4),
    "conv64f": BackboneSpec("conv64f", _CONV64F),
}


def backbone_spec(kind: str) -> BackboneSpec:
    try:
        return BACKBONES[kind.lower()]
    except KeyError:
        raise ValueError(f"unknown backbone {kind!r}; expected one of {sorted(BACKBONES)}") from None


class Backbone(Module):
    """The shared embedding f_phi built from a :class:`BackboneSpec`."""

    def __init__(self, spec: BackboneSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        blocks: List[ConvBlock] = []
        cin = INPUT_SHAPE[0]
        for b in spec.blocks:
            blocks.append(ConvBlock(cin, spec.filters, b.padding, b.pool, rng, slope=b.slope,
                                    kernel=spec.kernel))
            cin = spec.filters
        self.block = blocks

    @property
    def output_shape(self) -> Tuple[int, int, int]:
        return self.spec.output_shape()

    def forward(self, batch) -> DiffArray:
        batch = as_diff(batch)
        if batch.ndim != 4 or batch.shape[1:] != INPUT_SHAPE:
            raise ShapeError(f"{self.spec.kind} expects input (N, 3, 84, 84), got {batch.shape}")
        x = batch
        for blk in self.block:
            x = blk(x)
        return x


def embed(backbone: Backbone, batch, mode: str = "eval") -> DiffArray:
    """Run ``batch`` through ``backbone`` in ``mode`` ("train" or "eval")."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    backbone.train(mode == "train")
    return backbone(batch)


def local_descriptors(feature) -> DiffArray:
    """(N, C, h, w) feature maps -> (N, h*w, C); row r is the channel vector at position r."""
    feature = as_diff(feature)
    if feature.ndim != 4:
        raise ShapeError(f"local_descriptors expects (N, C, h, w), got {feature.shape}")
    n, c, h, w = feature.shape
    return feature.reshape(n, c, h * w).transpose(0, 2, 1)


def from_local_descriptors(descriptors, h: int, w: int) -> DiffArray:
    descriptors = as_diff(descriptors)
    n, m, c = descriptors.shape
    if m != h * w:
        raise ShapeError(f"{m} descriptors cannot tile a {h}x{w} map")
    return descriptors.transpose(0, 2, 1).reshape(n, c, h, w)
