"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .tensor import DiffArray, get_numeric_mode


@dataclass
class GradCheckFailure:
    param: str
    index: Tuple[int, ...]
    analytic: float
    numeric: float
    error: float


@dataclass
class GradCheckReport:
    checked: int = 0
    max_error: float = 0.0
    failures: List[GradCheckFailure] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(f: Callable[[], DiffArray], params: Sequence[DiffArray], eps: float = 1e-5,
               tol: float = 1e-4, max_coords: Optional[int] = None,
               rng: Optional[np.random.Generator] = None,
               names: Optional[Sequence[str]] = None) -> GradCheckReport:
    """Compare backward gradients of the scalar ``f()`` against central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``max_coords`` limits the number of coordinates probed per parameter
    (chosen with ``rng``); by default every coordinate is probed.
    """
    if get_numeric_mode() != "float64":
        raise RuntimeError("grad_check requires float64 numeric mode")
    rng = rng if rng is not None else np.random.default_rng(0)
    if names is None:
        names = [getattr(p, "name", "") or f"param{i}" for i, p in enumerate(params)]

    for p in params:
        p.grad = None
    out = f()
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    report = GradCheckReport()
    for p, name, grad in zip(params, names, analytic):
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for c in coords:
            # p.data may be a view; write through the flat handle
            original = flat[c]
            flat[c] = original + eps
            plus = f().item()
            flat[c] = original - eps
            minus = f().item()
            flat[c] = original
            numeric = (plus - minus) / (2.0 * eps)
            value = grad.reshape(-1)[c]
            err = abs(value - numeric) / max(1.0, abs(numeric))
            report.checked += 1
            report.max_error = max(report.max_error, err)
            if err > tol:
                idx = tuple(int(i) for i in np.unravel_index(c, p.shape))
                report.failures.append(GradCheckFailure(name, idx, float(value), numeric, err))
    return report
