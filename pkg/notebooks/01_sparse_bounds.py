"""
Sparse GP bounds and their gradients
====================================

The exact marginal likelihood, the collapsed bound and the uncollapsed
bound on one small regression problem, plus a finite-difference check of
the reverse-mode gradients.
"""

# %%
import numpy as np

from ppgp import adgrad as ad
from ppgp import gp_core

rng = np.random.default_rng(0)
X = np.sort(rng.uniform(-3, 3, 40))[:, None]
y = np.sin(2 * X[:, 0]) + 0.2 * rng.standard_normal(40)

# %% [markdown]
# Candidates on a grid.  With every candidate on a data input the collapsed
# bound equals the exact log marginal likelihood.

# %%
model = gp_core.SvgpModel.init(np.linspace(-3, 3, 12)[:, None], lengthscale=0.7, noise=0.05)
exact = gp_core.exact_lml(model.kernel, model.log_noise, X, y).value
for k in (0, 2, 4, 8, 12):
    sub = np.linspace(0, 11, k).round().astype(int) if k else []
    print(f"|Z| = {k:2d}  collapsed {gp_core.collapsed_elbo(model, sub, X, y).value:9.3f}  exact {exact:9.3f}")

# near-duplicate candidates trigger jitter, which costs a little accuracy;
# every fourth input is far enough apart to factorise cleanly
Xs, ys = X[::4], y[::4]
on_data = gp_core.SvgpModel.init(Xs, lengthscale=0.7, noise=0.05)
print("Z = X gap:", gp_core.exact_lml(on_data.kernel, on_data.log_noise, Xs, ys).value
      - gp_core.collapsed_elbo(on_data, np.arange(len(Xs)), Xs, ys).value)

# %% [markdown]
# The uncollapsed bound at the optimal q equals the collapsed bound; any
# other q sits below it.

# %%
m, S = gp_core.collapsed_q_u(model, np.arange(12), X, y)
unc = gp_core.SvgpModel(model.Z, model.kernel, model.log_noise, mode="uncollapsed").with_q(m, S)
print("uncollapsed at optimal q:", gp_core.uncollapsed_elbo(unc, np.arange(12), X, y).value)
print("collapsed:               ", gp_core.collapsed_elbo(model, np.arange(12), X, y).value)
print("uncollapsed at prior q:  ",
      gp_core.uncollapsed_elbo(gp_core.SvgpModel.init(model.Z, "uncollapsed", 0.7, 1.0, 0.05),
                               np.arange(12), X, y).value)

# %% [markdown]
# Gradients: reverse mode against central differences.

# %%
names = ("Z", "log_lengthscales", "log_variance", "log_noise")
err = ad.check_gradients(lambda p: gp_core.collapsed_elbo(model.with_params(p), np.arange(12), X, y),
                         {n: model.params()[n] for n in names})
print(f"largest relative FD disagreement: {err:.2e}")
