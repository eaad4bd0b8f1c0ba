"""Similarity heads: prototype, matching, relation, cosine and image-to-class.

Every head scores a batch of queries against the classes of one episode::

    head.score(support, query) -> (Q, C)

with ``support`` of shape (C, K, channels, h, w) and ``query`` of shape
(Q, channels, h, w).  The single-pair functions at the bottom of the module
(``prototype_score`` and friends) compute the same quantities for one query
and one :class:`ClassContext` and double as reference implementations in the
tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import ConvBlock, DiffArray, Linear, Module, ShapeError, concat
from .autodiff import functional as F
from .autodiff.tensor import as_diff
from .backbones import local_descriptors

HEAD_KINDS = ("prototype", "matching", "relation", "cosine", "image_to_class")
LOSS_KINDS = ("mse", "cross_entropy", "nll")


class ConfigurationError(ValueError):
    """A head cannot consume the backbone's feature shape (or similar build-time problem)."""


class SimilarityHead(Module):
    kind: str = ""
    loss: str = ""
    score_range: Tuple[float, float] = (-np.inf, np.inf)

    def score(self, support: DiffArray, query: DiffArray) -> DiffArray:
        raise NotImplementedError

    def forward(self, support, query):
        return self.score(support, query)


def _check_episode_features(support: DiffArray, query: DiffArray) -> None:
    if support.ndim != 5 or query.ndim != 4 or support.shape[2:] != query.shape[1:]:
        raise ShapeError(f"support {support.shape} (C, K, ch, h, w) and query {query.shape} "
                         "(Q, ch, h, w) do not describe one episode")


def prototypes(support: DiffArray) -> DiffArray:
    """Mean support feature per class: (C, K, ...) -> (C, ...)."""
    return support.mean(axis=1)


class PrototypeHead(SimilarityHead):
    """Negative squared Euclidean distance to the class prototype."""

    kind = "prototype"
    loss = "cross_entropy"
    score_range = (-np.inf, 0.0)

    def score(self, support, query):
        support, query = as_diff(support), as_diff(query)
        _check_episode_features(support, query)
        c, q = support.shape[0], query.shape[0]
        protos = prototypes(support).reshape(1, c, -1)
        diff = query.reshape(q, 1, -1) - protos
        return -(diff * diff).sum(axis=-1)


class MatchingHead(SimilarityHead):
    """Cosine attention over all support items; class probability = summed attention."""

    kind = "matching"
    loss = "nll"
    score_range = (0.0, 1.0)

    def cosines(self, support, query) -> DiffArray:
        c, k = support.shape[:2]
        q = query.shape[0]
        sup = F.l2_normalize(support.reshape(c * k, -1), axis=-1)
        qry = F.l2_normalize(query.reshape(q, -1), axis=-1)
        return (qry @ sup.transpose(1, 0)).reshape(q, c, k)

    def log_probs(self, support, query) -> DiffArray:
        support, query = as_diff(support), as_diff(query)
        _check_episode_features(support, query)
        cos = self.cosines(support, query)
        q, c, k = cos.shape
        per_class = F.logsumexp(cos, axis=-1)
        total = F.logsumexp(cos.reshape(q, c * k), axis=-1, keepdims=True)
        return per_class - total

    def score(self, support, query):
        support, query = as_diff(support), as_diff(query)
        _check_episode_features(support, query)
        cos = self.cosines(support, query)
        q, c, k = cos.shape
        attention = F.softmax(cos.reshape(q, c * k), axis=-1)
        return attention.reshape(q, c, k).sum(axis=-1)


class RelationHead(SimilarityHead):
    """Learned relation score g([prototype || query]) in (0, 1)."""

    kind = "relation"
    loss = "mse"
    score_range = (0.0, 1.0)
    feature_shape = (64, 19, 19)

    def __init__(self, rng: np.random.Generator, channels: int = 64, hidden: int = 8):
        super().__init__()
        self.channels = channels
        self.block1 = ConvBlock(2 * channels, 64, padding=0, pool="max", rng=rng)
        self.block2 = ConvBlock(64, 64, padding=0, pool="max", rng=rng)
        self.fc1 = Linear(64 * 3 * 3, hidden, rng)
        self.fc2 = Linear(hidden, 1, rng)

    def _check(self, shape: Tuple[int, ...]) -> None:
        if tuple(shape) != self.feature_shape:
            raise ShapeError(f"relation head needs {self.feature_shape} feature maps, got {tuple(shape)}")

    def _tail(self, first_conv: DiffArray) -> DiffArray:
        """Everything after block 1's convolution, for a batch of pairs."""
        b1 = self.block1
        x = F.maxpool2d(F.relu(b1.bn(first_conv)), 2)
        x = self.block2(x)
        x = x.reshape(x.shape[0], -1)
        x = F.relu(self.fc1(x))
        return F.sigmoid(self.fc2(x)).reshape(-1)

    def pair_scores(self, pairs) -> DiffArray:
        """Score already-concatenated (P, 2*channels, 19, 19) relation pairs."""
        pairs = as_diff(pairs)
        self._check((pairs.shape[1] // 2,) + pairs.shape[2:])
        return self._tail(self.block1.conv(pairs))

    def score(self, support, query):
        support, query = as_diff(support), as_diff(query)
        _check_episode_features(support, query)
        self._check(query.shape[1:])
        c, q = support.shape[0], query.shape[0]
        protos = prototypes(support)
        # conv over [p || q] channels splits into conv(p, W[:, :ch]) + conv(q, W[:, ch:])
        conv = self.block1.conv
        ch = self.channels
        proto_part = F.conv2d(protos, conv.weight[:, :ch], None, padding=conv.padding)
        query_part = F.conv2d(query, conv.weight[:, ch:], conv.bias, padding=conv.padding)
        h, w = query_part.shape[2:]
        summed = query_part.reshape(q, 1, 64, h, w) + proto_part.reshape(1, c, 64, h, w)
        return self._tail(summed.reshape(q * c, 64, h, w)).reshape(q, c)


class CosineHead(SimilarityHead):
    """Cosine similarity after a small shared conv embedding; mapped to [0, 1] for MSE."""

    kind = "cosine"
    loss = "mse"
    score_range = (0.0, 1.0)

    def __init__(self, rng: np.random.Generator, channels: int = 64, mapped: bool = True):
        super().__init__()
        self.block1 = ConvBlock(channels, 64, padding=1, pool="max", rng=rng)
        self.block2 = ConvBlock(64, 64, padding=1, pool="avg", rng=rng)
        self.mapped = mapped
        if not mapped:
            self.score_range = (-1.0, 1.0)

    def embed(self, features) -> DiffArray:
        x = self.block2(self.block1(as_diff(features)))
        return x.reshape(x.shape[0], -1)

    def raw_cosines(self, support, query) -> DiffArray:
        support, query = as_diff(support), as_diff(query)
        _check_episode_features(support, query)
        c, q = support.shape[0], query.shape[0]
        both = self.embed(concat([prototypes(support), query], axis=0))
        protos = F.l2_normalize(both[:c], axis=-1)
        queries = F.l2_normalize(both[c:c + q], axis=-1)
        return queries @ protos.transpose(1, 0)

    def score(self, support, query):
        cos = self.raw_cosines(support, query)
        return (cos + 1.0) * 0.5 if self.mapped else cos


class ImageToClassHead(SimilarityHead):
    """Sum over query local descriptors of the top-k cosine similarities in the class pool."""

    kind = "image_to_class"
    loss = "cross_entropy"

    def __init__(self, k: int = 3):
        super().__init__()
        self.k = k

    def score(self, support, query):
        support, query = as_diff(support), as_diff(query)
        _check_episode_features(support, query)
        c, kshot = support.shape[:2]
        q = query.shape[0]
        qd = F.l2_normalize(local_descriptors(query), axis=-1)            # (Q, m, ch)
        sd = F.l2_normalize(local_descriptors(support.reshape(c * kshot, *support.shape[2:])),
                            axis=-1)                                          # (C*K, m, ch)
        m, ch = sd.shape[1:]
        pools = sd.reshape(c, kshot * m, ch)
        columns = []
        for cls in range(c):
            sims = qd @ pools[cls].transpose(1, 0)                           # (Q, m, K*m)
            columns.append(F.topk_sum(sims, self.k, axis=-1).sum(axis=-1).reshape(q, 1))
        return concat(columns, axis=1)

    @property
    def score_bound(self) -> float:
        return float(self.k)


def build_head(kind: str, feature_shape: Tuple[int, int, int], rng: np.random.Generator) -> SimilarityHead:
    """Construct a head for features of ``feature_shape``; incompatible shapes are a ConfigurationError."""
    kind = kind.lower()
    if kind == "prototype":
        return PrototypeHead()
    if kind == "matching":
        return MatchingHead()
    if kind == "image_to_class":
        return ImageToClassHead()
    if kind == "relation":
        if tuple(feature_shape) != RelationHead.feature_shape:
            raise ConfigurationError(f"relation head needs {RelationHead.feature_shape} features "
                                     f"(576-wide FC input), backbone gives {tuple(feature_shape)}")
        return RelationHead(rng, channels=feature_shape[0])
    if kind == "cosine":
        if min(feature_shape[1:]) < 4:
            raise ConfigurationError(f"cosine head needs at least 4x4 features, got {feature_shape}")
        return CosineHead(rng, channels=feature_shape[0])
    raise ConfigurationError(f"unknown head kind {kind!r}; expected one of {HEAD_KINDS}")


# -- single-pair API ---------------------------------------------------------------

@dataclass
class ClassContext:
    """Support features of one class inside an episode."""

    label: int
    support: List[DiffArray]
    _prototype: Optional[DiffArray] = field(default=None, repr=False)

    def __post_init__(self):
        if not self.support:
            raise ValueError("a class context needs at least one support feature")
        self.support = [as_diff(s) for s in self.support]
        first = self.support[0].shape
        if any(s.shape != first for s in self.support):
            raise ShapeError(f"support features of class {self.label} differ in shape")

    @property
    def k(self) -> int:
        return len(self.support)

    def stacked(self) -> DiffArray:
        from .autodiff import stack
        return stack(self.support, axis=0)

    @property
    def prototype(self) -> DiffArray:
        if self._prototype is None:
            self._prototype = self.stacked().mean(axis=0)
        return self._prototype

    def descriptor_pool(self) -> DiffArray:
        """(K*h*w, ch) local descriptors of all support maps of this class."""
        s = self.stacked()
        return local_descriptors(s).reshape(-1, s.shape[1])


def prototype_score(query, ctx: ClassContext) -> DiffArray:
    query = as_diff(query)
    if query.shape != ctx.prototype.shape:
        raise ShapeError(f"query {query.shape} vs prototype {ctx.prototype.shape}")
    diff = query.reshape(-1) - ctx.prototype.reshape(-1)
    return -(diff * diff).sum()


def matching_score(query, contexts: Sequence[ClassContext]) -> DiffArray:
    """Per-class probability vector (length C) from cosine attention over all support items."""
    if len(contexts) < 2:
        raise ValueError("matching needs at least two classes")
    query = as_diff(query).reshape(1, -1)
    items, owner = [], []
    for i, ctx in enumerate(contexts):
        for s in ctx.support:
            items.append(s.reshape(1, -1))
            owner.append(i)
    cos = F.cosine_similarity(query, concat(items, axis=0), axis=-1)
    attention = F.softmax(cos, axis=-1)
    owner = np.asarray(owner)
    return concat([attention[np.flatnonzero(owner == i)].sum().reshape(1)
                   for i in range(len(contexts))], axis=0)


def relation_score(head: RelationHead, query, ctx: ClassContext) -> DiffArray:
    """Literal concat path: g([prototype || query])."""
    query = as_diff(query)
    head._check(query.shape)
    pair = concat([ctx.prototype, query], axis=0)
    return head.pair_scores(pair.reshape(1, *pair.shape)).reshape(())


def cosine_score(head: CosineHead, query, ctx: ClassContext, raw: bool = False) -> DiffArray:
    query = as_diff(query)
    both = head.embed(concat([ctx.prototype.reshape(1, *query.shape), query.reshape(1, *query.shape)],
                             axis=0))
    cos = F.cosine_similarity(both[0], both[1], axis=-1)
    if raw or not head.mapped:
        return cos
    return (cos + 1.0) * 0.5


def image_to_class_score(query_descriptors, pool, k: int = 3) -> DiffArray:
    """Sum over query descriptors (m, ch) of the top-``k`` cosines against ``pool`` (P, ch)."""
    query_descriptors, pool = as_diff(query_descriptors), as_diff(pool)
    if pool.shape[0] == 0:
        raise ValueError("empty descriptor pool")
    if k > pool.shape[0]:
        raise ValueError(f"k={k} exceeds pool size {pool.shape[0]}")
    sims = F.l2_normalize(query_descriptors, axis=-1) @ F.l2_normalize(pool, axis=-1).transpose(1, 0)
    return F.topk_sum(sims, k, axis=-1).sum()
