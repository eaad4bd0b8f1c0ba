"""Loss-weight sweep for a two-head model: one training run per (lambda, beta) row."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

from .data import LabeledDataset
from .engine import TrainConfig, build_model, evaluate, meta_train

# lambda weights the first head's loss, beta the second's; (1, 1) is the default
WEIGHT_ROWS: Tuple[Tuple[float, float], ...] = (
    (1.0, 0.1), (1.0, 0.3), (1.0, 0.5), (1.0, 0.7), (1.0, 0.9),
    (0.1, 1.0), (0.3, 1.0), (0.5, 1.0), (0.7, 1.0), (0.9, 1.0),
    (1.0, 1.0),
)


@dataclass
class SweepRow:
    lam: float
    beta: float
    mean: float
    ci_half_width: float
    final_loss: float
    seconds: float


def run_weight_sweep(train: LabeledDataset, test: LabeledDataset, config: TrainConfig,
                     heads: Sequence[str] = ("relation", "cosine"), backbone: str = "conv4",
                     rows: Sequence[Tuple[float, float]] = WEIGHT_ROWS, eval_episodes: int = 600,
                     eval_query: int = 16, seed: int = 0,
                     on_row: Optional[Callable[[SweepRow], None]] = None) -> List[SweepRow]:
    """Train and evaluate one model per weight pair, all from the same seed and episode stream."""
    if len(heads) != 2:
        raise ValueError("the weight sweep needs exactly two heads")
    out = []
    for lam, beta in rows:
        started = time.perf_counter()
        model = build_model(backbone, heads, [lam, beta], seed)
        result = meta_train(model, train, config)
        report = evaluate(model, test, eval_episodes, config.n_way, config.k_shot, eval_query, seed)
        row = SweepRow(lam, beta, report.mean, report.ci_half_width,
                       result.rows[-1].loss if result.rows else float("nan"),
                       time.perf_counter() - started)
        out.append(row)
        if on_row is not None:
            on_row(row)
    return out


def format_table(rows: Sequence[SweepRow], shot: int = 1) -> str:
    """Markdown table: lambda, beta, accuracy (%) with 95% interval; the best mean is bold."""
    best = max(r.mean for r in rows) if rows else None
    lines = ["| lambda | beta | 5-way %d-shot accuracy (%%) |" % shot, "|---|---|---|"]
    for r in rows:
        cell = f"{100 * r.mean:.2f} +- {100 * r.ci_half_width:.2f}"
        if r.mean == best:
            cell = f"**{cell}**"
        lines.append(f"| {r.lam:g} | {r.beta:g} | {cell} |")
    return "\n".join(lines)
