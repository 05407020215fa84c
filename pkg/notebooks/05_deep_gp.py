"""
Inducing points per layer in a deep GP
======================================

A three-layer doubly-stochastic deep GP on a square wave, with one
candidate set and one point process per layer.
"""

# %%
import numpy as np

from ppgp import data, dgp

ds = data.square_wave_generate(200, seed=0)
X, y = ds.Xs, ds.ys
model = dgp.init_dgp(X, depth=3, num_candidates=25, rng=np.random.default_rng(0))
cfg = dgp.DgpConfig(n_layer_pre=100, n_pre=300, n_ppp=300, n_post=200, alpha=0.2, seed=0)
fitted, posts, subsets, hist = dgp.dgp_train(model, None, (X, y), config=cfg)

# %%
for i, (p, s) in enumerate(zip(posts, subsets)):
    print(f"layer {i + 1}: E|Z| = {p.probs.sum():5.2f}, kept {len(s)}")
print("final objective", round(hist.records[-1].elbo, 2))

# %% [markdown]
# Predictions are moment-matched over Monte-Carlo passes through the layers.

# %%
Xt = ds.standardize_x(np.linspace(-1, 1, 9))
mean, var = dgp.dgp_predict(fitted, dgp.full_subsets(fitted), Xt, 256)
for x, m, v in zip(np.linspace(-1, 1, 9), ds.unstandardize_y(mean), ds.unstandardize_var(var)):
    print(f"x = {x:5.2f}  mean {m:6.3f}  sd {np.sqrt(v):.3f}")
