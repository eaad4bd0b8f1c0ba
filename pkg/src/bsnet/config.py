"""Run configuration: a TOML file plus command-line overrides, validated before any compute."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, get_args, get_origin, get_type_hints

import tomli
import tomli_w

from .backbones import BACKBONES
from .heads import HEAD_KINDS

OUTPUT_ROOT_ENV = "BSNET_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"


class ConfigError(ValueError):
    """One or more configuration problems; ``problems`` lists every one of them."""

    def __init__(self, problems: List[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


@dataclass
class ModelConfig:
    backbone: str = "conv4"
    heads: List[str] = field(default_factory=lambda: ["relation", "cosine"])
    weights: Optional[List[float]] = None


@dataclass
class EpisodeConfig:
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 16
    train_episodes: Optional[int] = None   # None: the standard count for the shot and heads
    eval_episodes: int = 600
    eval_query: int = 16
    eval_repeats: Optional[int] = None


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 0.0
    halve_every: Optional[int] = None


@dataclass
class TrainSettings:
    augment: bool = True
    checkpoint_every: int = 0


@dataclass
class SyntheticConfig:
    n_classes: int = 30
    images_per_class: int = 30
    variation: float = 0.15
    seed: int = 0


@dataclass
class DataConfig:
    source: str = "synthetic"
    root: Optional[str] = None
    split_ratio: List[int] = field(default_factory=lambda: [2, 1, 1])
    split_seed: int = 0
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)


@dataclass
class RademacherConfig:
    family: str = "linear"
    sample_size: int = 10
    samples: int = 1
    n_sigma: int = 100
    restarts: int = 64
    steps: int = 100
    n_witness: int = 100


@dataclass
class VisualizeConfig:
    episodes: int = 1
    queries: Optional[List[int]] = None
    target: str = "predicted"


@dataclass
class RunConfig:
    seed: int = 0
    numeric_mode: str = "float64"
    output_dir: Optional[str] = None
    jobs: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    episodes: EpisodeConfig = field(default_factory=EpisodeConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    data: DataConfig = field(default_factory=DataConfig)
    rademacher: RademacherConfig = field(default_factory=RademacherConfig)
    visualize: VisualizeConfig = field(default_factory=VisualizeConfig)

    def to_dict(self) -> dict:
        return _strip_none(dataclasses.asdict(self))


# -- conversion -------------------------------------------------------------------------

def _strip_none(d):
    if isinstance(d, dict):
        return {k: _strip_none(v) for k, v in d.items() if v is not None}
    return d


def _check_type(value, hint, path: str, problems: List[str]):
    origin = get_origin(hint)
    args = get_args(hint)
    if origin is Optional or (origin is not None and type(None) in args):
        inner = [a for a in args if a is not type(None)][0]
        if value is None:
            return None
        return _check_type(value, inner, path, problems)
    if origin in (list, List):
        if not isinstance(value, list):
            problems.append(f"{path}: expected a list, got {type(value).__name__}")
            return None
        return [_check_type(v, args[0], f"{path}[{i}]", problems) for i, v in enumerate(value)]
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{path}: expected a number, got {value!r}")
            return None
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{path}: expected an integer, got {value!r}")
            return None
        return value
    if hint is bool:
        if not isinstance(value, bool):
            problems.append(f"{path}: expected true or false, got {value!r}")
            return None
        return value
    if hint is str:
        if not isinstance(value, str):
            problems.append(f"{path}: expected a string, got {value!r}")
            return None
        return value
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path, problems)
    raise TypeError(hint)


def _build(cls, raw, path: str, problems: List[str]):
    if not isinstance(raw, dict):
        problems.append(f"{path or 'config'}: expected a table, got {type(raw).__name__}")
        return cls()
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in sorted(set(raw) - names):
        problems.append(f"{path + '.' if path else ''}{key}: unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in raw:
            continue
        sub = f"{path + '.' if path else ''}{f.name}"
        checked = _check_type(raw[f.name], hints[f.name], sub, problems)
        if checked is not None or raw[f.name] is None:
            kwargs[f.name] = checked
    return cls(**kwargs)


def _validate(cfg: RunConfig, problems: List[str]) -> None:
    def need(cond, msg):
        if not cond:
            problems.append(msg)

    need(cfg.numeric_mode in ("float32", "float64"), f"numeric_mode: must be float32 or float64, got {cfg.numeric_mode!r}")
    need(cfg.jobs >= 1, "jobs: must be at least 1")
    m = cfg.model
    need(m.backbone in BACKBONES, f"model.backbone: unknown backbone {m.backbone!r} (choose from {sorted(BACKBONES)})")
    need(len(m.heads) >= 1, "model.heads: at least one similarity head is required")
    for h in m.heads:
        need(h in HEAD_KINDS, f"model.heads: unknown head {h!r} (choose from {list(HEAD_KINDS)})")
    if m.weights is not None:
        need(len(m.weights) == len(m.heads), f"model.weights: {len(m.weights)} weights for {len(m.heads)} heads")
        need(all(w is not None and w > 0 for w in m.weights), "model.weights: every weight must be positive")
    if "relation" in m.heads and m.backbone in BACKBONES:
        need(BACKBONES[m.backbone].output_shape() == (64, 19, 19),
             f"model: the relation head needs 64x19x19 features, {m.backbone} gives "
             f"{'x'.join(map(str, BACKBONES[m.backbone].output_shape()))}")
    e = cfg.episodes
    need(e.n_way >= 2, "episodes.n_way: must be at least 2")
    need(e.k_shot >= 1, "episodes.k_shot: must be at least 1")
    need(e.n_query >= 1, "episodes.n_query: must be at least 1")
    need(e.eval_query >= 1, "episodes.eval_query: must be at least 1")
    need(e.eval_episodes >= 1, "episodes.eval_episodes: must be at least 1")
    need(e.train_episodes is None or e.train_episodes >= 0, "episodes.train_episodes: must be non-negative")
    need(e.eval_repeats is None or e.eval_repeats >= 1, "episodes.eval_repeats: must be at least 1")
    need(cfg.optim.lr >= 0, "optim.lr: must be non-negative")
    need(cfg.optim.weight_decay >= 0, "optim.weight_decay: must be non-negative")
    need(cfg.optim.halve_every is None or cfg.optim.halve_every >= 0, "optim.halve_every: must be non-negative")
    need(cfg.train.checkpoint_every >= 0, "train.checkpoint_every: must be non-negative")
    d = cfg.data
    need(d.source in ("synthetic", "directory"), f"data.source: must be synthetic or directory, got {d.source!r}")
    need(d.source != "directory" or d.root is not None, "data.root: required when data.source is directory")
    need(len(d.split_ratio) == 3 and all(r is not None and r > 0 for r in d.split_ratio),
         "data.split_ratio: needs three positive integers")
    s = d.synthetic
    need(s.n_classes >= 4, "data.synthetic.n_classes: must be at least 4")
    need(s.images_per_class >= 1, "data.synthetic.images_per_class: must be at least 1")
    need(s.variation >= 0, "data.synthetic.variation: must be non-negative")
    r = cfg.rademacher
    need(r.family in ("linear", "mlp"), f"rademacher.family: must be linear or mlp, got {r.family!r}")
    for name in ("sample_size", "samples", "n_sigma", "restarts"):
        need(getattr(r, name) >= 1, f"rademacher.{name}: must be at least 1")
    need(r.steps >= 0 and r.n_witness >= 0, "rademacher.steps and rademacher.n_witness: must be non-negative")
    v = cfg.visualize
    need(v.episodes >= 1, "visualize.episodes: must be at least 1")
    need(v.target in ("predicted", "true"), f"visualize.target: must be predicted or true, got {v.target!r}")


def _set_dotted(raw: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = raw
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError([f"{dotted}: {k} is not a table"])
    node[keys[-1]] = value


def parse_override(text: str) -> Tuple[str, Any]:
    """``key.sub=value``; the value is read as a TOML value, falling back to a bare string."""
    if "=" not in text:
        raise ConfigError([f"override {text!r}: expected key=value"])
    key, value = text.split("=", 1)
    key = key.strip()
    try:
        parsed = tomli.loads(f"v = {value.strip()}")["v"]
    except tomli.TOMLDecodeError:
        parsed = value.strip()
    return key, parsed


def load_config(path: Optional[os.PathLike] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Read, merge and validate; raises :class:`ConfigError` listing every problem."""
    raw: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomli.load(fh)
        except FileNotFoundError:
            raise ConfigError([f"config file {path} not found"]) from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError([f"{path}: {exc}"]) from None
    for key, value in (overrides or {}).items():
        _set_dotted(raw, key, value)
    problems: List[str] = []
    cfg = _build(RunConfig, raw, "", problems)
    # ill-typed values fall back to defaults, so range checks still run on the rest
    _validate(cfg, problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))


def resolve_output_dir(cfg: RunConfig, command: str) -> Path:
    """Relative output directories live under the output root; the default is ``<root>/<command>``."""
    out = Path(cfg.output_dir) if cfg.output_dir else Path(command)
    return out if out.is_absolute() else output_root() / out


def dump_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def write_resolved(cfg: RunConfig, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.toml"
    path.write_text(dump_config(cfg))
    return path
