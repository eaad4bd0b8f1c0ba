"""
Does sharing the embedding shrink the function family?
======================================================

The bi-similarity family Z averages two scorers on a shared embedding. Its
empirical Rademacher complexity should not exceed the mean complexity of the
two single-similarity families I and J. We estimate all three on toy families.
"""

import numpy as np

from bsnet.rademacher import check_theorem, estimate_complexity, constant_family, linear_toy_families, mlp_toy_families

rng = np.random.default_rng(0)

###############################################################################
# Sanity check: the constant family {f = c, |c| <= 1} has complexity exactly 1.

print("constant family:", estimate_complexity(constant_family(), np.zeros(1), n_sigma=50, rng=rng).value)

###############################################################################
# Linear toys: e = w x, I = a e, J = b e + c. Here the bound is tight.

for name, families, dim in (("linear", linear_toy_families(), 1), ("tanh mlp", mlp_toy_families(), 2)):
    X = rng.normal(size=(12, dim))
    rep = check_theorem(X, families["I"], families["J"], families["Z"], families["P"], rng=rng)
    est = rep.estimates
    print(f"{name:9s} I {est['I'].value:.4f}  J {est['J'].value:.4f}  Z {est['Z'].value:.4f}  "
          f"bound {rep.bound:.4f}  holds {rep.holds}  witnesses {rep.witnesses_exact}/{rep.witnesses_checked}")
