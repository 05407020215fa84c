"""
Gradients through the discrete subset
=====================================

Score-function estimates against exhaustive enumeration, the masked bound
that evaluates any subset on the full candidate set, and the Concrete
relaxation.
"""

# %%
import numpy as np

from ppgp import gp_core
from ppgp.estimators import (BaselineState, enumerate_expectation, masked_bound, relaxed_mask,
                             sf_gradient)
from ppgp.point_process import PppPosterior

rng = np.random.default_rng(2)
X = rng.uniform(-3, 3, (15, 1))
y = np.sin(X[:, 0]) + 0.1 * rng.standard_normal(15)
model = gp_core.SvgpModel.init(np.linspace(-3, 3, 6)[:, None], noise=0.1)


def bound(subset):
    return float(gp_core.collapsed_elbo(model, subset, X, y).value)


post = PppPosterior(rng.standard_normal(6))
value, exact = enumerate_expectation(post, bound)
print("expected bound", round(value, 4))
print("exact gradient ", np.round(exact, 3))

# %% [markdown]
# Single-sample estimates are unbiased; a decaying baseline cuts their
# variance without moving the mean.

# %%
for label, baseline in (("plain", None), ("baseline", BaselineState(decay=0.9))):
    draws = []
    for _ in range(5000):
        g, _, baseline, _ = sf_gradient(post, bound, 1, baseline, rng)
        draws.append(g)
    draws = np.array(draws)
    print(f"{label:8s} mean {np.round(draws.mean(0), 3)}  total variance {draws.var(0).sum():.1f}")

# %% [markdown]
# The masked bound with a binary mask equals the bound on that subset.

# %%
b = np.array([1.0, 0, 1, 1, 0, 0])
print(masked_bound(model, b, X, y).value, bound(np.flatnonzero(b)))

# %% [markdown]
# Concrete samples approach binary masks as the temperature falls.

# %%
for tau in (1.0, 0.1, 0.01):
    m = relaxed_mask(post.logits, tau, rng).value
    print(f"tau {tau:4.2f}:", np.round(m, 3))
