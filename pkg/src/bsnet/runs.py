"""Workflows behind the command-line subcommands.

Every workflow validates its inputs (config, dataset, checkpoint) before it
writes anything, and writes only inside its output directory.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .autodiff import Adam, load_checkpoint, save_checkpoint, set_numeric_mode
from .autodiff.checkpoint import CheckpointError
from .config import RunConfig, write_resolved
from .data import (
    Augment,
    DataError,
    LabeledDataset,
    SyntheticSpec,
    generate_synthetic,
    load_image_dir,
    save_image_dir,
    split_dataset,
    write_manifest,
)
from .engine import (
    PAPER_DN4_TRAIN_EPISODES,
    PAPER_TRAIN_EPISODES,
    BisimModel,
    EvalReport,
    NumericError,
    TrainConfig,
    TrainLogRow,
    build_model,
    episode_rng,
    evaluate,
    meta_train,
)
from .data import sample_episode

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.bsn"
LOG_NAME = "train_log.csv"
LOG_COLUMNS = ("episode", "loss", "accuracy", "lr", "wallclock_ms")
EPISODE_KEY = "train.episode"


# -- data ----------------------------------------------------------------------------------

def synthetic_spec(cfg: RunConfig) -> SyntheticSpec:
    s = cfg.data.synthetic
    return SyntheticSpec(s.n_classes, s.images_per_class, s.variation, s.seed)


def load_dataset(cfg: RunConfig) -> LabeledDataset:
    if cfg.data.source == "synthetic":
        return generate_synthetic(synthetic_spec(cfg))
    return load_image_dir(cfg.data.root)


def load_splits(cfg: RunConfig) -> Tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Load and split the dataset, then check that episodes can be drawn from the splits used."""
    train, val, test = split_dataset(load_dataset(cfg), cfg.data.split_ratio, cfg.data.split_seed)
    e = cfg.episodes
    for name, split, shots in (("train", train, e.k_shot + e.n_query), ("test", test, e.k_shot + e.eval_query)):
        groups = split.by_class()
        usable = sum(len(v) >= shots for v in groups.values())
        if usable < e.n_way:
            raise DataError(f"{name} split has {usable} classes with at least {shots} images; "
                            f"{e.n_way}-way episodes need {e.n_way}")
    return train, val, test


# -- model and checkpoints -------------------------------------------------------------------

def model_from_config(cfg: RunConfig) -> BisimModel:
    return build_model(cfg.model.backbone, cfg.model.heads, cfg.model.weights, cfg.seed)


def train_episodes(cfg: RunConfig) -> int:
    if cfg.episodes.train_episodes is not None:
        return cfg.episodes.train_episodes
    if "image_to_class" in cfg.model.heads:
        return PAPER_DN4_TRAIN_EPISODES
    return PAPER_TRAIN_EPISODES.get(cfg.episodes.k_shot, PAPER_TRAIN_EPISODES[5])


def train_config(cfg: RunConfig) -> TrainConfig:
    e, o = cfg.episodes, cfg.optim
    return TrainConfig(e.n_way, e.k_shot, e.n_query, train_episodes(cfg), o.lr, o.weight_decay,
                       cfg.seed, Augment(enabled=cfg.train.augment), o.halve_every,
                       cfg.train.checkpoint_every)


def save_training_state(path: Path, model: BisimModel, optimizer: Adam, episode: int, mode: str) -> None:
    state = dict(model.state_dict())
    state.update(optimizer.state_dict())
    state[EPISODE_KEY] = np.array([float(episode)])
    save_checkpoint(path, state, mode)


def model_state(state: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {k: v for k, v in state.items() if not k.startswith(("optim.", "train."))}


def load_model(cfg: RunConfig, checkpoint) -> BisimModel:
    """Model from ``checkpoint``; architecture mismatches raise with the full name/shape diff."""
    state, _ = load_checkpoint(checkpoint)
    model = model_from_config(cfg)
    model.load_state_dict(model_state(state))
    return model


# -- train -------------------------------------------------------------------------------------

@dataclass
class TrainOutcome:
    model: BisimModel
    rows: List[TrainLogRow]
    events: List[str]
    out_dir: Path
    checkpoint: Path


def _format_row(row: TrainLogRow) -> List[str]:
    return [str(row.episode), repr(row.loss), repr(row.accuracy), repr(row.lr), f"{row.wallclock_ms:.3f}"]


def run_train(cfg: RunConfig, out_dir: Path, resume: bool = False) -> TrainOutcome:
    set_numeric_mode(cfg.numeric_mode)
    train, val, test = load_splits(cfg)
    ckpt = out_dir / CHECKPOINT_NAME
    model = model_from_config(cfg)
    optimizer = Adam(model.parameters(), lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)
    start = 0
    if resume:
        if not ckpt.exists():
            raise CheckpointError(f"cannot resume: {ckpt} does not exist")
        state, _ = load_checkpoint(ckpt)
        model.load_state_dict(model_state(state))
        optimizer.load_state_dict(state)
        start = int(state[EPISODE_KEY][0])

    write_resolved(cfg, out_dir)
    for split in (train, val, test):
        write_manifest(split, out_dir / f"manifest_{split.split}.json")
    tcfg = train_config(cfg)
    log_path = out_dir / LOG_NAME
    fresh = not (resume and log_path.exists())
    with open(log_path, "w" if fresh else "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(LOG_COLUMNS)

        def on_episode(i, row):
            writer.writerow(_format_row(row))
            if tcfg.checkpoint_every and i % tcfg.checkpoint_every == 0:
                fh.flush()
                save_training_state(ckpt, model, optimizer, i, cfg.numeric_mode)

        result = meta_train(model, train, tcfg, optimizer, start, on_episode)
    if not all(np.all(np.isfinite(p.data)) for p in model.parameters()):
        raise NumericError("parameters became non-finite during training")
    save_training_state(ckpt, model, optimizer, max(start, tcfg.episodes), cfg.numeric_mode)
    if result.events:
        with open(out_dir / "events.log", "a") as fh:
            fh.write("\n".join(result.events) + "\n")
    return TrainOutcome(model, result.rows, result.events, out_dir, ckpt)


# -- eval ----------------------------------------------------------------------------------------

def run_eval(cfg: RunConfig, checkpoint, out_dir: Path, per_episode: bool = False,
             jobs: Optional[int] = None) -> EvalReport:
    set_numeric_mode(cfg.numeric_mode)
    _, _, test = load_splits(cfg)
    model = load_model(cfg, checkpoint)
    e = cfg.episodes
    report = evaluate(model, test, e.eval_episodes, e.n_way, e.k_shot, e.eval_query, cfg.seed,
                      e.eval_repeats, jobs or cfg.jobs)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    payload.update({"n_way": e.n_way, "k_shot": e.k_shot, "n_query": e.eval_query,
                    "seed": cfg.seed, "split": "test"})
    (out_dir / "eval_report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    if per_episode:
        with open(out_dir / "eval_episodes.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("repeat", "episode", "accuracy"))
            for j, acc in enumerate(report.episode_accuracy):
                writer.writerow((j // e.eval_episodes, j % e.eval_episodes, repr(acc)))
    return report


# -- rademacher ---------------------------------------------------------------------------------

def run_rademacher(cfg: RunConfig, out_dir: Path) -> dict:
    from .rademacher import check_theorem, linear_toy_families, mlp_toy_families

    r = cfg.rademacher
    families = linear_toy_families() if r.family == "linear" else mlp_toy_families()
    input_dim = 1 if r.family == "linear" else 2
    reports = []
    for s in range(r.samples):
        rng = np.random.default_rng([cfg.seed, s])
        X = rng.normal(size=(r.sample_size, input_dim))
        rep = check_theorem(X, families["I"], families["J"], families["Z"], families["P"],
                            r.n_sigma, r.restarts, r.steps, r.n_witness, rng)
        reports.append(rep.to_dict())
    verdict = {"family": r.family, "samples": reports,
               "holds_all": all(x["holds"] for x in reports),
               "witnesses_checked": sum(x["witnesses_checked"] for x in reports),
               "witnesses_exact": sum(x["witnesses_exact"] for x in reports)}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "rademacher.json").write_text(json.dumps(verdict, indent=2, sort_keys=True) + "\n")
    return verdict


# -- visualize ----------------------------------------------------------------------------------

def run_visualize(cfg: RunConfig, checkpoint, out_dir: Path) -> List[Path]:
    from .explain import write_episode_heatmaps

    set_numeric_mode(cfg.numeric_mode)
    _, _, test = load_splits(cfg)
    model = load_model(cfg, checkpoint)
    e, v = cfg.episodes, cfg.visualize
    paths = []
    for i in range(v.episodes):
        episode = sample_episode(test, e.n_way, e.k_shot, e.eval_query, episode_rng(cfg.seed, 2, i))
        paths += write_episode_heatmaps(model, episode, i, out_dir, v.queries, v.target)
    return paths


# -- synth --------------------------------------------------------------------------------------

def run_synth(cfg: RunConfig, out_dir: Path) -> LabeledDataset:
    ds = generate_synthetic(synthetic_spec(cfg))
    save_image_dir(ds, out_dir)
    written = load_image_dir(out_dir)
    write_manifest(written, out_dir / "manifest.json")
    return written
