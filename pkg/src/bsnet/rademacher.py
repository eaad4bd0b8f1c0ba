"""Monte-Carlo estimates of empirical Rademacher complexity for small function families.

A family is a box of parameters plus a batched evaluator. The supremum in the
definition is approximated by projected gradient ascent from random starts, so
every estimate is a lower bound on the true complexity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Adam, DiffArray, Parameter, numeric_mode, tanh
from .autodiff.tensor import as_diff
from .engine import NumericError
from .heads import ConfigurationError

KINDS = ("SingleSim-I", "SingleSim-J", "Shared-Z", "Average-P")


# -- building blocks ---------------------------------------------------------------------

@dataclass(frozen=True)
class Block:
    """A parameter block with its own box.

    Embedding blocks map ``(w (R, k), X (M, p))`` to features ``(R, M, e)``;
    scorer blocks map ``(w (R, k), E (R, M, e))`` to scores ``(R, M)``.
    """

    name: str
    dim: int
    fn: Callable = field(compare=False)
    lower: float = -1.0
    upper: float = 1.0

    def same_structure(self, other: "Block") -> bool:
        return (self.dim, self.fn, self.lower, self.upper) == (other.dim, other.fn, other.lower, other.upper)


def _linear_embed(w, X):
    # e_i = w . x_i, one feature
    return (as_diff(w) @ np.asarray(X).T).reshape(w.shape[0], X.shape[0], 1)


def _linear_score(w, E):
    return (E * w.reshape(w.shape[0], 1, w.shape[1])).sum(axis=-1)


def _affine_score(w, E):
    r, k = w.shape
    return (E * w[:, :k - 1].reshape(r, 1, k - 1)).sum(axis=-1) + w[:, k - 1:]


def _tanh_embed(hidden: int):
    def fn(w, X):
        r = w.shape[0]
        p = X.shape[1]
        weight = w[:, :p * hidden].reshape(r, p, hidden)
        bias = w[:, p * hidden:].reshape(r, 1, hidden)
        return tanh(np.asarray(X) @ weight + bias)
    return fn


def _tanh_score(w, E):
    r, k = w.shape
    weight = w[:, :k - 1].reshape(r, k - 1, 1)
    return tanh((E @ weight).reshape(r, E.shape[1]) + w[:, k - 1:])


def linear_embedding(input_dim: int = 1, bound: float = 1.0) -> Block:
    return Block("linear_embedding", input_dim, _linear_embed, -bound, bound)


def linear_scorer(width: int = 1, bound: float = 1.0) -> Block:
    return Block("linear_scorer", width, _linear_score, -bound, bound)


def affine_scorer(width: int = 1, bound: float = 1.0) -> Block:
    return Block("affine_scorer", width + 1, _affine_score, -bound, bound)


_TANH_EMBEDS: Dict[int, Callable] = {}


def tanh_embedding(input_dim: int, hidden: int, bound: float = 1.0) -> Block:
    fn = _TANH_EMBEDS.setdefault(hidden, _tanh_embed(hidden))
    return Block("tanh_embedding", input_dim * hidden + hidden, fn, -bound, bound)


def tanh_scorer(width: int, bound: float = 1.0) -> Block:
    return Block("tanh_scorer", width + 1, _tanh_score, -bound, bound)


# -- families ------------------------------------------------------------------------------

class FunctionFamily:
    """Box-bounded parametric family with a batched evaluator ``(R, d), (M, p) -> (R, M)``."""

    def __init__(self, kind: str, blocks: Sequence[Block],
                 evaluator: Callable[[List[DiffArray], np.ndarray], DiffArray],
                 embeddings: Sequence[Block] = (), scorers: Sequence[Block] = ()):
        self.kind = kind
        self.blocks = tuple(blocks)
        self._evaluator = evaluator
        self.embeddings = tuple(embeddings)
        self.scorers = tuple(scorers)
        self.lower = np.concatenate([np.full(b.dim, b.lower, dtype=np.float64) for b in blocks]) \
            if blocks else np.zeros(0)
        self.upper = np.concatenate([np.full(b.dim, b.upper, dtype=np.float64) for b in blocks]) \
            if blocks else np.zeros(0)

    @property
    def dim(self) -> int:
        return int(self.lower.size)

    def split(self, params) -> List[DiffArray]:
        params = as_diff(params)
        out, start = [], 0
        for b in self.blocks:
            out.append(params[:, start:start + b.dim])
            start += b.dim
        return out

    def evaluate(self, params, X) -> DiffArray:
        """Differentiable outputs ``(R, M)`` for ``R`` parameter rows."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        params = as_diff(params)
        return self._evaluator(self.split(params), X)

    def __call__(self, params, X) -> np.ndarray:
        params = np.atleast_2d(np.asarray(params, dtype=np.float64))
        return self.evaluate(params, X).data

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.lower + rng.random((n, self.dim)) * (self.upper - self.lower)


def single_family(kind: str, embedding: Block, scorer: Block) -> FunctionFamily:
    """I(x; W_em, W_s) = scorer(embedding(x))."""
    def evaluator(parts, X):
        w_em, w_s = parts
        return scorer.fn(w_s, embedding.fn(w_em, X))
    return FunctionFamily(kind, [embedding, scorer], evaluator, [embedding], [scorer])


def shared_family(embedding: Block, scorer1: Block, scorer2: Block) -> FunctionFamily:
    """Z(x; W_s1, W_s2, W_em): one embedding feeding both scorers, outputs averaged."""
    def evaluator(parts, X):
        w_s1, w_s2, w_em = parts
        e = embedding.fn(w_em, X)
        return (scorer1.fn(w_s1, e) + scorer2.fn(w_s2, e)) * 0.5
    return FunctionFamily("Shared-Z", [scorer1, scorer2, embedding], evaluator,
                          [embedding], [scorer1, scorer2])


def average_family(embedding: Block, scorer1: Block, scorer2: Block) -> FunctionFamily:
    """P(x; W_s1, W_s2, W_em1, W_em2) = (I(x) + J(x)) / 2 with independent embeddings."""
    def evaluator(parts, X):
        w_s1, w_s2, w_em1, w_em2 = parts
        return (scorer1.fn(w_s1, embedding.fn(w_em1, X)) + scorer2.fn(w_s2, embedding.fn(w_em2, X))) * 0.5
    return FunctionFamily("Average-P", [scorer1, scorer2, embedding, embedding], evaluator,
                          [embedding, embedding], [scorer1, scorer2])


def theorem_families(embedding: Block, scorer1: Block, scorer2: Block) -> Dict[str, FunctionFamily]:
    return {"I": single_family("SingleSim-I", embedding, scorer1),
            "J": single_family("SingleSim-J", embedding, scorer2),
            "Z": shared_family(embedding, scorer1, scorer2),
            "P": average_family(embedding, scorer1, scorer2)}


def linear_toy_families(bound: float = 1.0) -> Dict[str, FunctionFamily]:
    """Scalar input; embedding e = w x; I scores a e, J scores b e + c."""
    return theorem_families(linear_embedding(1, bound), linear_scorer(1, bound), affine_scorer(1, bound))


def mlp_toy_families(input_dim: int = 2, hidden: int = 4, bound: float = 1.0) -> Dict[str, FunctionFamily]:
    """One tanh layer as embedding; a linear and a tanh scorer on top."""
    emb = tanh_embedding(input_dim, hidden, bound)
    return theorem_families(emb, linear_scorer(hidden, bound), tanh_scorer(hidden, bound))


def constant_family(lower: float = -1.0, upper: float = 1.0) -> FunctionFamily:
    """{f = c : c in [lower, upper]}."""
    block = Block("constant", 1, None, lower, upper)

    def evaluator(parts, X):
        return parts[0] * np.ones((1, X.shape[0]))
    return FunctionFamily("constant", [block], evaluator)


def zero_family() -> FunctionFamily:
    """The singleton family {f = 0}."""
    def evaluator(parts, X):
        return DiffArray(np.zeros((0, X.shape[0])))
    return FunctionFamily("zero", [], evaluator)


# -- estimation ----------------------------------------------------------------------------

@dataclass
class RademacherEstimate:
    """Mean over sigma draws of the best correlation found; a lower bound on the true sup."""

    value: float
    stderr: float
    n_sigma: int
    restarts: int
    steps: int
    per_draw: np.ndarray = field(repr=False)
    lower_bound: bool = True

    def to_dict(self) -> dict:
        return {"estimate": self.value, "stderr": self.stderr, "n_sigma": self.n_sigma,
                "restarts": self.restarts, "steps": self.steps, "lower_bound": self.lower_bound}


def rademacher_signs(n_sigma: int, m: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(np.array([-1.0, 1.0]), size=(n_sigma, m))


def _check_finite(values: np.ndarray, params: np.ndarray, kind: str) -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        row = int(np.argwhere(bad)[0][0])
        raise NumericError(f"{kind} evaluator is non-finite at parameters {params[row].tolist()}")


def estimate_complexity(family: FunctionFamily, X, n_sigma: int = 100, restarts: int = 64,
                        steps: int = 100, rng: Optional[np.random.Generator] = None,
                        sigma: Optional[np.ndarray] = None, lr: float = 0.05) -> RademacherEstimate:
    """Approximate E_sigma[sup_f (1/M) sum_i sigma_i f(x_i)].

    For every sign draw the sup is searched by ``restarts`` uniform random
    starts in the box, each followed by ``steps`` projected Adam ascent
    steps (in box-normalized coordinates, so ``lr`` is a fraction of each
    side). The best value seen at any visited point is kept.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    m = X.shape[0]
    if m < 1:
        raise ValueError("the sample must contain at least one point")
    if restarts < 1 or steps < 0:
        raise ValueError("sup search needs at least one restart and a non-negative step count")
    rng = np.random.default_rng() if rng is None else rng
    if sigma is None:
        sigma = rademacher_signs(n_sigma, m, rng)
    sigma = np.asarray(sigma, dtype=np.float64)
    n_sigma = sigma.shape[0]

    with numeric_mode("float64"):
        if family.dim == 0:
            vals = family.evaluate(np.zeros((1, 0)), X).data
            out = np.zeros((1, m)) if vals.size == 0 else vals
            _check_finite(out, np.zeros((1, 0)), family.kind)
            best = (sigma * out).sum(axis=1) / m
        else:
            best = _ascend(family, X, sigma, restarts, steps, rng, lr)

    value = float(best.sum() / n_sigma)
    stderr = float(best.std(ddof=1) / math.sqrt(n_sigma)) if n_sigma > 1 else 0.0
    return RademacherEstimate(value, stderr, n_sigma, restarts, steps, best)


def _ascend(family, X, sigma, restarts, steps, rng, lr):
    n_sigma, m = sigma.shape
    rows = n_sigma * restarts
    lo, width = family.lower, family.upper - family.lower
    signs = np.repeat(sigma, restarts, axis=0)                # (rows, M)
    u = Parameter(rng.random((rows, family.dim)))
    opt = Adam([u], lr=lr)
    best = np.full(rows, -np.inf)
    for step in range(steps + 1):
        params = u * width + lo
        out = family.evaluate(params, X)
        _check_finite(out.data, params.data, family.kind)
        corr = (out * signs).sum(axis=1) * (1.0 / m)
        np.maximum(best, corr.data, out=best)
        if step == steps:
            break
        opt.zero_grad()
        (-corr.sum()).backward()
        opt.step()
        np.clip(u.data, 0.0, 1.0, out=u.data)
    return best.reshape(n_sigma, restarts).max(axis=1)


# -- theorem check -------------------------------------------------------------------------

@dataclass
class TheoremReport:
    estimates: Dict[str, RademacherEstimate]
    bound: float
    combined_stderr: float
    margin: float
    holds: bool
    witnesses_checked: int
    witnesses_exact: int

    def to_dict(self) -> dict:
        return {"estimates": {k: v.to_dict() for k, v in self.estimates.items()},
                "bound": self.bound, "combined_stderr": self.combined_stderr,
                "margin": self.margin, "holds": self.holds,
                "witnesses_checked": self.witnesses_checked,
                "witnesses_exact": self.witnesses_exact}


def _check_structure(I: FunctionFamily, J: FunctionFamily, Z: FunctionFamily) -> None:
    problems = []
    if len(Z.embeddings) != 1 or len(Z.scorers) != 2:
        problems.append("the shared family needs one embedding block and two scorer blocks")
    else:
        for name, fam, scorer in (("I", I, Z.scorers[0]), ("J", J, Z.scorers[1])):
            if len(fam.embeddings) != 1 or len(fam.scorers) != 1:
                problems.append(f"{name} must have exactly one embedding and one scorer block")
                continue
            if not fam.embeddings[0].same_structure(Z.embeddings[0]):
                problems.append(f"{name} embedding differs in structure from the shared embedding")
            if not fam.scorers[0].same_structure(scorer):
                problems.append(f"{name} scorer differs in structure from its counterpart in the shared family")
    if problems:
        raise ConfigurationError("; ".join(problems))


def containment_witness(Z: FunctionFamily, params: np.ndarray) -> np.ndarray:
    """P parameters reproducing Z: copy the shared embedding into both embedding slots."""
    s1, s2, em = (b.dim for b in Z.blocks)
    params = np.atleast_2d(params)
    return np.concatenate([params[:, :s1 + s2], params[:, s1 + s2:], params[:, s1 + s2:]], axis=1)


def check_containment(Z: FunctionFamily, P: FunctionFamily, X, n: int,
                      rng: np.random.Generator) -> int:
    """Number of ``n`` random Z points whose P witness matches Z bitwise on the sample."""
    with numeric_mode("float64"):
        exact = 0
        for theta in Z.sample(n, rng):
            z = Z(theta[None], X)
            p = P(containment_witness(Z, theta[None]), X)
            exact += int(np.array_equal(z, p))
    return exact


def check_theorem(X, I: FunctionFamily, J: FunctionFamily, Z: FunctionFamily,
                  P: Optional[FunctionFamily] = None, n_sigma: int = 100, restarts: int = 64,
                  steps: int = 100, n_witness: int = 100,
                  rng: Optional[np.random.Generator] = None) -> TheoremReport:
    """Estimate all three complexities with shared sign draws and test the inequality.

    The verdict allows ``2 * combined_stderr``, where the combined error adds
    the three standard errors in quadrature with the 1/2 weights of the bound.
    """
    _check_structure(I, J, Z)
    rng = np.random.default_rng() if rng is None else rng
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    sigma = rademacher_signs(n_sigma, X.shape[0], rng)
    est = {name: estimate_complexity(fam, X, restarts=restarts, steps=steps, rng=rng, sigma=sigma)
           for name, fam in (("I", I), ("J", J), ("Z", Z))}
    bound = 0.5 * (est["I"].value + est["J"].value)
    se = math.sqrt(est["Z"].stderr ** 2 + 0.25 * (est["I"].stderr ** 2 + est["J"].stderr ** 2))
    margin = bound + 2.0 * se - est["Z"].value
    if P is None:
        P = average_family(Z.embeddings[0], *Z.scorers)
    exact = check_containment(Z, P, X, n_witness, rng) if n_witness else 0
    return TheoremReport(est, bound, se, margin, margin >= 0, n_witness, exact)
