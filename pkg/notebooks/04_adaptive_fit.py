"""
Letting the data choose the number of inducing points
=====================================================

A three-phase fit: a plain sparse GP fit, a phase that learns inclusion
probabilities for every candidate, and a refit on the extracted subset.
Stronger priors keep fewer points.
"""

# %%
import numpy as np

from ppgp import gp_core
from ppgp.point_process import cardinality_stats
from ppgp.trainer import TrainConfig, run_training

rng = np.random.default_rng(3)
X = np.sort(rng.uniform(-3, 3, 100))[:, None]
y = np.sin(2 * X[:, 0]) + 0.2 * rng.standard_normal(100)
Z = X[np.sort(rng.choice(100, 30, replace=False))]

# %%
for alpha in (0.0, 0.05, 1.0):
    cfg = TrainConfig(n_pre=100, n_ppp=300, n_post=100, alpha=alpha, extraction="top", seed=0)
    model, post, hist = run_training(gp_core.SvgpModel.init(Z), (X, y), config=cfg)
    E, V = cardinality_stats(post)
    print(f"alpha {alpha:4.2f}: E|Z| = {E:5.2f} +- {np.sqrt(V):.2f}, kept {len(hist.selected):2d}, "
          f"final bound {hist.records[-1].elbo:8.3f}")

# %% [markdown]
# The retained candidates and their inclusion probabilities.

# %%
order = np.argsort(post.probs)[::-1]
for k in order[:8]:
    print(f"z = {Z[k, 0]:6.3f}  lambda = {post.probs[k]:.3f}")
