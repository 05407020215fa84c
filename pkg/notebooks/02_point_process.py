"""
The point process over candidate sets
=====================================

Inclusion probabilities, the distribution of the subset size and the KL
to the size-penalising prior.
"""

# %%
import numpy as np

from ppgp.point_process import (PppPosterior, PriorSpec, cardinality_stats, kl_to_prior, log_pmf,
                                sample)
from ppgp import adgrad as ad

rng = np.random.default_rng(1)
post = PppPosterior(rng.normal(0.0, 2.0, 20))
E, V = cardinality_stats(post)
sizes = [len(sample(post, rng)) for _ in range(20000)]
print(f"E|Z| = {E:.3f} (sampled {np.mean(sizes):.3f}),  Var|Z| = {V:.3f} (sampled {np.var(sizes):.3f})")

# %% [markdown]
# The prior weight of a set decays like exp(-alpha |Z|^2); larger alpha
# penalises large sets harder.

# %%
for alpha in (0.0, 0.01, 0.1, 1.0):
    print(f"alpha {alpha:5.2f}: KL = {float(ad.forward(kl_to_prior(post, PriorSpec(alpha, 20)))):8.3f}")

# %% [markdown]
# Log-probability of one subset is a sum over candidates.

# %%
z = sample(post, rng)
print("subset", z, "log q =", float(ad.forward(log_pmf(post, z))))
