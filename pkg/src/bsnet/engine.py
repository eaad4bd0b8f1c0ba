"""Bi-similarity model: shared embedding, several heads, joint loss, averaged prediction."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Adam, DiffArray, Module
from .autodiff import log as dlog
from .autodiff import functional as F
from .autodiff.tensor import as_diff, get_numeric_mode
from .backbones import Backbone, backbone_spec
from .data import Augment, Episode, LabeledDataset, sample_episode
from .heads import ConfigurationError, SimilarityHead, build_head

log = logging.getLogger(__name__)

CI_Z = 1.96
# 1-shot / 5-shot training episodes for Conv4-based heads, and for image-to-class models
PAPER_TRAIN_EPISODES = {1: 60_000, 5: 40_000}
PAPER_DN4_TRAIN_EPISODES = 300_000
DN4_LR_HALVING = 100_000
DN4_EVAL_REPEATS = 5


class NumericError(RuntimeError):
    """Loss or gradient became non-finite."""


class BisimModel(Module):
    """One embedding f_phi followed by an ordered list of similarity heads."""

    def __init__(self, backbone: Backbone, heads: Sequence[SimilarityHead],
                 weights: Optional[Sequence[float]] = None):
        super().__init__()
        if not heads:
            raise ConfigurationError("a model needs at least one similarity head")
        weights = [1.0] * len(heads) if weights is None else [float(w) for w in weights]
        if len(weights) != len(heads):
            raise ConfigurationError(f"{len(heads)} heads but {len(weights)} loss weights")
        if any(not w > 0 for w in weights):
            raise ConfigurationError(f"loss weights must be positive, got {weights}")
        self.embed = backbone
        self.head = list(heads)
        self.weights = weights
        self.assign_names()

    @property
    def head_kinds(self) -> List[str]:
        return [h.kind for h in self.head]

    @property
    def loss_kinds(self) -> List[str]:
        return [h.loss for h in self.head]

    @property
    def uses_image_to_class(self) -> bool:
        return "image_to_class" in self.head_kinds

    def embed_episode(self, episode: Episode) -> Tuple[DiffArray, DiffArray]:
        """Embed support and query images in one pass; returns (C, K, ...) and (Q, ...)."""
        c, k = episode.support.shape[:2]
        images = np.concatenate([episode.support.reshape(c * k, *episode.support.shape[2:]),
                                 episode.query], axis=0)
        feats = self.embed(images)
        support = feats[:c * k].reshape(c, k, *feats.shape[1:])
        query = feats[c * k:]
        return support, query

    def head_scores(self, support, query) -> List[DiffArray]:
        return [h.score(support, query) for h in self.head]

    def forward(self, episode: Episode) -> List[DiffArray]:
        return self.head_scores(*self.embed_episode(episode))


def build_model(backbone: str = "conv4", heads: Sequence[str] = ("relation", "cosine"),
                weights: Optional[Sequence[float]] = None, seed: int = 0) -> BisimModel:
    """Build and initialize a model; parameters are drawn from ``default_rng(seed)``."""
    rng = np.random.default_rng(seed)
    spec = backbone_spec(backbone)
    bb = Backbone(spec, rng)
    built = [build_head(kind, spec.output_shape(), rng) for kind in heads]
    return BisimModel(bb, built, weights)


# -- scores and predictions --------------------------------------------------------------

@dataclass
class ScoreMatrix:
    """|Q| x C x H similarity scores of one episode."""

    scores: np.ndarray
    head_kinds: List[str]
    tensors: List[DiffArray] = field(default_factory=list, repr=False)

    @property
    def n_heads(self) -> int:
        return self.scores.shape[2]


def score_episode(model: BisimModel, episode: Episode, mode: str = "eval") -> ScoreMatrix:
    model.train(mode == "train")
    tensors = model(episode)
    scores = np.stack([t.data for t in tensors], axis=-1)
    return ScoreMatrix(scores, model.head_kinds, tensors)


def one_hot(index: int, n: int) -> np.ndarray:
    out = np.zeros(n, dtype=np.int64)
    out[index] = 1
    return out


def per_head_prediction(scores: np.ndarray) -> np.ndarray:
    """One-hot at the argmax of a length-C score vector; ties go to the lowest class index."""
    scores = np.asarray(scores)
    if scores.ndim != 1 or scores.size < 2:
        raise ValueError(f"need a score vector over C >= 2 classes, got shape {scores.shape}")
    return one_hot(int(np.argmax(scores)), scores.size)


def combined_prediction(scores: np.ndarray) -> np.ndarray:
    """One-hot at the argmax of the unweighted head mean of a (C, H) score block."""
    scores = np.asarray(scores)
    if scores.ndim == 1:
        scores = scores[:, None]
    return per_head_prediction(scores.mean(axis=1))


def predict(scores: np.ndarray) -> np.ndarray:
    """Combined class index for every query of a (Q, C, H) score matrix."""
    return np.argmax(np.asarray(scores).mean(axis=2), axis=1)


def literal_onehot_mse(scores: np.ndarray, labels: np.ndarray) -> float:
    """Sum over heads and queries of ||onehot(argmax) - onehot(y)||^2 / (C |Q|).

    This is the piecewise-constant reading of the training loss; it carries no
    gradient and is reported as a metric only.
    """
    q, c, h = scores.shape
    pred = np.argmax(scores, axis=1)                      # (Q, H)
    wrong = (pred != np.asarray(labels)[:, None]).sum()
    return 2.0 * wrong / (c * q)


# -- loss --------------------------------------------------------------------------------

def head_loss(scores: DiffArray, labels: np.ndarray, kind: str) -> DiffArray:
    """Per-query loss (length |Q|) of one head's (Q, C) scores."""
    scores = as_diff(scores)
    labels = np.asarray(labels)
    n_way = scores.shape[1]
    if kind == "mse":
        return F.squared_error(scores, np.eye(n_way)[labels])
    if kind == "cross_entropy":
        return F.cross_entropy(scores, labels)
    if kind == "nll":
        # scores are class probabilities here (matching head), so NLL is -log p[y]
        return -(dlog(scores) * np.eye(n_way)[labels]).sum(axis=-1)
    raise ValueError(f"unknown loss kind {kind!r}")


def training_loss(scores: Sequence[DiffArray], labels: np.ndarray, loss_kinds: Sequence[str],
                  weights: Sequence[float]) -> DiffArray:
    """Weighted sum over heads and queries of each head's native loss, divided by C |Q|."""
    if len(scores) != len(loss_kinds) or len(scores) != len(weights):
        raise ValueError("scores, loss kinds and weights must have one entry per head")
    if any(not w > 0 for w in weights):
        raise ValueError(f"loss weights must be positive, got {list(weights)}")
    q, c = scores[0].shape
    per_query = None
    for s, kind, w in zip(scores, loss_kinds, weights):
        term = head_loss(s, labels, kind) * float(w)
        per_query = term if per_query is None else per_query + term
    total = per_query.sum() / float(c * q)
    if not np.isfinite(total.data).all():
        raise NumericError(f"non-finite training loss {total.item()!r}")
    return total


# -- per-episode results -----------------------------------------------------------------

@dataclass
class EpisodeResult:
    per_head: np.ndarray       # (Q, H, C) one-hots
    combined: np.ndarray       # (Q, C) one-hots
    loss: float
    accuracy: float
    head_accuracy: List[float]


def episode_result(scores: np.ndarray, labels: np.ndarray, loss: float = float("nan")) -> EpisodeResult:
    q, c, h = scores.shape
    labels = np.asarray(labels)
    per_head = np.zeros((q, h, c), dtype=np.int64)
    combined = np.zeros((q, c), dtype=np.int64)
    hits = 0
    head_hits = np.zeros(h)
    for i in range(q):
        for d in range(h):
            per_head[i, d] = per_head_prediction(scores[i, :, d])
            head_hits[d] += per_head[i, d, labels[i]]
        combined[i] = combined_prediction(scores[i])
        hits += combined[i, labels[i]]
    return EpisodeResult(per_head, combined, loss, hits / q, list(head_hits / q))


# -- meta-training -------------------------------------------------------------------------

@dataclass
class TrainConfig:
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 16
    episodes: int = 60_000
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    augment: Augment = field(default_factory=Augment)
    halve_every: Optional[int] = None  # None: halve every 100k episodes only for image-to-class models
    checkpoint_every: int = 0


@dataclass
class TrainLogRow:
    episode: int
    loss: float
    accuracy: float
    lr: float
    wallclock_ms: float


@dataclass
class TrainResult:
    rows: List[TrainLogRow]
    events: List[str]
    optimizer: Adam
    last_episode: int

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([r.accuracy for r in self.rows])) if self.rows else float("nan")


def episode_rng(seed: int, stream: int, *index: int) -> np.random.Generator:
    """Independent generator for one episode; resuming or reordering never changes the draw."""
    return np.random.default_rng([seed, stream, *index])


def learning_rate(config: TrainConfig, model: BisimModel, episode: int) -> float:
    halve = config.halve_every
    if halve is None:
        halve = DN4_LR_HALVING if model.uses_image_to_class else 0
    if not halve:
        return config.lr
    return config.lr * 0.5 ** ((episode - 1) // halve)


def meta_train(model: BisimModel, train: LabeledDataset, config: TrainConfig,
               optimizer: Optional[Adam] = None, start_episode: int = 0,
               on_episode: Optional[Callable[[int, TrainLogRow], None]] = None) -> TrainResult:
    """Episodic training: one Adam step per sampled task.

    Episodes are numbered ``start_episode + 1 .. config.episodes``; episode
    ``i`` always draws its task from ``episode_rng(seed, 0, i)``.
    """
    if optimizer is None:
        optimizer = Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    rows: List[TrainLogRow] = []
    events: List[str] = []
    for i in range(start_episode + 1, config.episodes + 1):
        started = time.perf_counter()
        rng = episode_rng(config.seed, 0, i)
        episode = sample_episode(train, config.n_way, config.k_shot, config.n_query, rng,
                                 train_mode=True, augment=config.augment)
        optimizer.lr = learning_rate(config, model, i)
        model.train()
        optimizer.zero_grad()
        scores = model(episode)
        try:
            loss = training_loss(scores, episode.query_labels, model.loss_kinds, model.weights)
        except NumericError as exc:
            events.append(f"episode {i}: {exc}; episode skipped")
            log.warning(events[-1])
            continue
        loss.backward()
        if optimizer.grads_finite():
            optimizer.step()
        else:
            events.append(f"episode {i}: non-finite gradient; step skipped")
            log.warning(events[-1])
        stacked = np.stack([s.data for s in scores], axis=-1)
        acc = float(np.mean(predict(stacked) == episode.query_labels))
        row = TrainLogRow(i, float(loss.item()), acc, optimizer.lr,
                          (time.perf_counter() - started) * 1000.0)
        rows.append(row)
        if on_episode is not None:
            on_episode(i, row)
    return TrainResult(rows, events, optimizer, config.episodes)


# -- evaluation ------------------------------------------------------------------------------

def ci_half_width(std: float, n: int) -> float:
    return CI_Z * std / math.sqrt(n)


def summarize(accuracies: Sequence[float]) -> Tuple[float, float, float]:
    """Mean, sample standard deviation (0 for a single value) and 95% CI half-width."""
    acc = np.asarray(accuracies, dtype=np.float64)
    n = acc.size
    mean = float(acc.sum() / n)
    std = float(acc.std(ddof=1)) if n > 1 else 0.0
    return mean, std, ci_half_width(std, n)


@dataclass
class EvalReport:
    mean: float
    std: float
    ci_half_width: float
    n_episodes: int
    repeats: int
    head_kinds: List[str]
    head_accuracy: List[float]
    episode_accuracy: List[float] = field(repr=False)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "ci_half_width": self.ci_half_width,
                "n_episodes": self.n_episodes, "repeats": self.repeats,
                "per_head_accuracy": dict(zip(self.head_kinds, self.head_accuracy))}


def evaluate(model: BisimModel, split: LabeledDataset, n_episodes: int = 600, n_way: int = 5,
             k_shot: int = 1, n_query: int = 16, seed: int = 0, repeats: Optional[int] = None,
             jobs: int = 1) -> EvalReport:
    """Mean accuracy over randomly generated test episodes with a 95% confidence interval.

    Models containing the image-to-class head repeat the whole procedure
    five times by default and report the averages of the repeats.
    """
    if repeats is None:
        repeats = DN4_EVAL_REPEATS if model.uses_image_to_class else 1
    model.eval()

    def run(index: Tuple[int, int]):
        r, i = index
        rng = episode_rng(seed, 1, r, i)
        episode = sample_episode(split, n_way, k_shot, n_query, rng, train_mode=False)
        scores = np.stack([s.data for s in model(episode)], axis=-1)
        result = episode_result(scores, episode.query_labels)
        return result.accuracy, result.head_accuracy

    means, stds, cis, per_episode, head_sums = [], [], [], [], np.zeros(len(model.head))
    for r in range(repeats):
        indices = [(r, i) for i in range(n_episodes)]
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                outcomes = list(pool.map(run, indices))
        else:
            outcomes = [run(ix) for ix in indices]
        accs = [a for a, _ in outcomes]
        for _, heads in outcomes:
            head_sums += np.asarray(heads)
        m, s, ci = summarize(accs)
        means.append(m)
        stds.append(s)
        cis.append(ci)
        per_episode.extend(accs)
    total = repeats * n_episodes
    return EvalReport(float(np.mean(means)), float(np.mean(stds)), float(np.mean(cis)), n_episodes,
                      repeats, model.head_kinds, list(head_sums / total), per_episode)
