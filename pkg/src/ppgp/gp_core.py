"""Exact GP marginal likelihood and sparse variational bounds over candidate subsets.

Every bound is evaluated for a subset ``I`` of the candidate inducing inputs
``Z*``.  In the uncollapsed mode the variational Gaussian over the subset is
the marginal of the one over all candidates, ``N(m*[I], S*[I, I])``.

Functions return :class:`adgrad.Node` expressions; use ``.value`` or
``float()`` for the number, or :func:`value_and_grad` for gradients.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from . import adgrad as ad
from .kernel import KernelParams, gram, gram_diag

LOG_2PI = np.log(2.0 * np.pi)
MODES = ("collapsed", "uncollapsed")

PARAM_NAMES = ("log_lengthscales", "log_variance", "log_noise", "Z", "q_mu", "q_sqrt_raw")
HYPER_NAMES = ("log_lengthscales", "log_variance", "log_noise")


@dataclass
class SvgpModel:
    """Sparse GP over a candidate set ``Z`` (K x d).

    ``q_sqrt_raw`` parameterises the Cholesky factor of ``S*``: strictly lower
    entries are used as-is and the diagonal is exponentiated.
    """

    Z: object
    kernel: KernelParams
    log_noise: object = 0.0
    q_mu: object = None
    q_sqrt_raw: object = None
    mode: str = "collapsed"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        Z = ad.forward(self.Z)
        if Z.ndim != 2 or Z.shape[0] < 1:
            raise ValueError(f"Z must be a non-empty K x d array, got shape {Z.shape}")
        K = Z.shape[0]
        if self.q_mu is None:
            self.q_mu = np.zeros(K)
        if self.q_sqrt_raw is None:
            self.q_sqrt_raw = np.zeros((K, K))

    @classmethod
    def init(cls, Z, mode="collapsed", lengthscale=1.0, variance=1.0, noise=1.0, prior_q=True):
        """Hyperparameters at the given values; ``q`` starts at the prior ``N(0, K_ZZ)``."""
        Z = np.array(Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        kern = KernelParams.init(Z.shape[1], lengthscale, variance)
        model = cls(Z, kern, np.log(noise), mode=mode)
        if prior_q:
            model = model.with_q(np.zeros(len(Z)), gram(kern, Z).value)
        return model

    @property
    def num_candidates(self):
        return ad.forward(self.Z).shape[0]

    @property
    def noise(self):
        return float(np.exp(ad.forward(self.log_noise)))

    @property
    def q_sqrt(self):
        return q_factor(self.q_sqrt_raw).value

    @property
    def q_cov(self):
        R = self.q_sqrt
        return R @ R.T

    def params(self):
        return {
            "log_lengthscales": np.array(ad.forward(self.kernel.log_lengthscales), dtype=float),
            "log_variance": np.array(ad.forward(self.kernel.log_variance), dtype=float),
            "log_noise": np.array(ad.forward(self.log_noise), dtype=float),
            "Z": np.array(ad.forward(self.Z), dtype=float),
            "q_mu": np.array(ad.forward(self.q_mu), dtype=float),
            "q_sqrt_raw": np.array(ad.forward(self.q_sqrt_raw), dtype=float),
        }

    def with_params(self, values):
        """Copy with some fields replaced; values may be arrays or graph nodes."""
        p = {**self.params(), **values}
        kern = KernelParams(p["log_lengthscales"], p["log_variance"])
        return replace(self, Z=p["Z"], kernel=kern, log_noise=p["log_noise"],
                       q_mu=p["q_mu"], q_sqrt_raw=p["q_sqrt_raw"])

    def leaves(self, names=PARAM_NAMES):
        """Copy whose named fields are differentiable leaves."""
        p = self.params()
        return self.with_params({n: ad.leaf(p[n], n) for n in names})

    def with_q(self, m, S, subset=None):
        """Set ``m*``/``S*`` (on ``subset`` only, if given; other blocks keep their marginals)."""
        mu = np.array(ad.forward(self.q_mu), dtype=float)
        if subset is None:
            mu, cov = np.asarray(m, dtype=float).copy(), np.asarray(S, dtype=float)
        else:
            idx = as_subset(subset, self.num_candidates)
            cov = self.q_cov
            rest = np.setdiff1d(np.arange(self.num_candidates), idx)
            new = np.zeros_like(cov)
            new[np.ix_(rest, rest)] = cov[np.ix_(rest, rest)]
            new[np.ix_(idx, idx)] = S
            mu[idx] = m
            cov = new
        return replace(self, q_mu=mu, q_sqrt_raw=raw_from_cov(cov))

    def restrict(self, subset):
        """Model over the chosen candidates only (point process removed)."""
        idx = as_subset(subset, self.num_candidates)
        if idx.size == 0:
            raise ValueError("cannot restrict a model to an empty inducing set")
        Z = np.array(ad.forward(self.Z))[idx]
        S = self.q_cov[np.ix_(idx, idx)]
        mu = np.array(ad.forward(self.q_mu))[idx]
        out = replace(self, Z=Z, q_mu=mu, q_sqrt_raw=raw_from_cov(S))
        out.meta = dict(self.meta)
        return out


def q_factor(raw):
    """Lower-triangular factor with a positive diagonal from unconstrained entries."""
    return ad.add(ad.tril(raw, -1), ad.diag_embed(ad.exp(ad.diag(raw))))


def raw_from_cov(S):
    L = ad.cholesky(np.asarray(S, dtype=float)).value
    raw = np.tril(L, -1)
    raw[np.diag_indices_from(raw)] = np.log(np.diag(L))
    return raw


def as_subset(subset, K):
    """Validated, sorted, distinct indices into the candidate set."""
    idx = np.asarray(subset, dtype=int).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= K):
        raise IndexError(f"subset indices must lie in [0, {K})")
    if np.any(np.diff(idx) <= 0):
        if np.unique(idx).size != idx.size:
            raise ValueError("subset indices must be distinct")
        idx = np.sort(idx)
    return idx


def full_subset(model):
    return np.arange(model.num_candidates)


def value_and_grad(fn, model, *args, wrt=PARAM_NAMES, **kwargs):
    """Evaluate ``fn(model, *args)`` and its gradient with respect to ``wrt``."""
    expr = fn(model.leaves(wrt), *args, **kwargs)
    grads = ad.backward(expr)
    p = model.params()
    return float(ad.forward(expr)), {n: grads.get(n, np.zeros_like(p[n])) for n in wrt}


def _noise_var(log_noise):
    return ad.exp(log_noise)


def _col(y):
    return np.asarray(y, dtype=float).reshape(-1)


# ---------------------------------------------------------------- exact GP

def exact_lml(kernel, log_noise, X, y):
    """log N(y | 0, K_NN + noise I)."""
    y = _col(y)
    N = y.size
    if N < 1:
        raise ValueError("exact_lml needs at least one observation")
    Kxx = gram(kernel, X)
    C = ad.add(Kxx, ad.mul(_noise_var(log_noise), np.eye(N)))
    L = ad.cholesky(C)
    w = ad.solve_triangular(L, y)
    return -0.5 * ad.sum(ad.square(w)) - ad.sum(ad.log(ad.diag(L))) - 0.5 * N * LOG_2PI


def gaussian_kl(m0, S0, m1, S1):
    """KL[N(m0, S0) || N(m1, S1)]."""
    m0, m1 = ad._wrap(m0), ad._wrap(m1)
    n = m0.shape[0]
    L0 = ad.cholesky(S0)
    L1 = ad.cholesky(S1)
    return _kl_factors(m0, L0, m1, L1, n)


def _kl_factors(m0, L0, m1, L1, n):
    tr = ad.sum(ad.square(ad.solve_triangular(L1, L0)))
    maha = ad.sum(ad.square(ad.solve_triangular(L1, ad.sub(m1, m0))))
    logdets = ad.sum(ad.log(ad.diag(L1))) - ad.sum(ad.log(ad.diag(L0)))
    return 0.5 * (tr + maha - n) + logdets


# ---------------------------------------------------------------- collapsed bound

def _subset_Z(model, idx):
    return ad.take(model.Z, idx, axis=0)


def _collapsed_from_grams(Kmm, Kmn, knn_trace, log_noise, y):
    y = _col(y)
    N = y.size
    noise = _noise_var(log_noise)
    base = (-0.5 * N * LOG_2PI - 0.5 * N * ad._wrap(log_noise)
            - 0.5 * float(y @ y) / noise - 0.5 * knn_trace / noise)
    if Kmm is None:
        return base
    M = Kmm.shape[0]
    sigma = ad.sqrt(noise)
    L = ad.cholesky(Kmm)
    A = ad.div(ad.solve_triangular(L, Kmn), sigma)
    B = ad.add(np.eye(M), ad.matmul(A, ad.transpose(A)))
    LB = ad.cholesky(B)
    c = ad.div(ad.solve_triangular(LB, ad.matmul(A, y)), sigma)
    return (base - ad.sum(ad.log(ad.diag(LB))) + 0.5 * ad.sum(ad.square(c))
            + 0.5 * ad.sum(ad.square(A)))


def collapsed_elbo(model, subset, X, y):
    """Titsias bound for the inducing inputs ``Z*[subset]``.

    log N(y | 0, Q_NN + noise I) - tr(K_NN - Q_NN) / (2 noise); for the empty
    subset Q_NN = 0.
    """
    idx = as_subset(subset, model.num_candidates)
    knn_trace = ad.sum(gram_diag(model.kernel, X))
    if idx.size == 0:
        return _collapsed_from_grams(None, None, knn_trace, model.log_noise, y)
    Zs = _subset_Z(model, idx)
    Kmm = gram(model.kernel, Zs)
    Kmn = gram(model.kernel, Zs, X)
    return _collapsed_from_grams(Kmm, Kmn, knn_trace, model.log_noise, y)


def collapsed_q_u(model, subset, X, y):
    """Optimal ``(m, S)`` of the collapsed bound for the given subset (numpy values)."""
    idx = as_subset(subset, model.num_candidates)
    if idx.size == 0:
        raise ValueError("collapsed_q_u needs a non-empty subset; use collapsed_elbo for the empty set")
    y = _col(y)
    Zs = ad.forward(model.Z)[idx]
    kern = KernelParams(ad.forward(model.kernel.log_lengthscales), ad.forward(model.kernel.log_variance))
    sigma = np.sqrt(model.noise)
    Lm = ad.cholesky(gram(kern, Zs).value).value
    A = ad.solve_triangular(Lm, gram(kern, Zs, X).value).value / sigma
    LB = ad.cholesky(np.eye(len(idx)) + A @ A.T).value
    V = ad.solve_triangular(LB, Lm.T).value          # LB^{-1} Lm^T
    S = V.T @ V
    c = ad.solve_triangular(LB, A @ y).value / sigma
    m = V.T @ c
    return m, 0.5 * (S + S.T)


# ---------------------------------------------------------------- uncollapsed bound

def _q_subset(model, idx, q):
    if q is not None:
        m, S = q
        return ad._wrap(m), ad.cholesky(S)
    m = ad.take(model.q_mu, idx)
    R = ad.take(q_factor(model.q_sqrt_raw), idx, axis=0)
    if idx.size == model.num_candidates:
        return m, R
    return m, ad.cholesky(ad.matmul(R, ad.transpose(R)))


def marginals(model, subset, X, q=None, return_kl=False):
    """Per-point mean and variance of q(f_i) under ``q(u | Z) = N(m, S)``.

    mean_i = beta_i m, var_i = k(x_i, x_i) - beta_i (K_MM - S) beta_i^T with
    beta_i = k(x_i, Z) K_MM^{-1}.
    """
    idx = as_subset(subset, model.num_candidates)
    kdiag = gram_diag(model.kernel, X)
    if idx.size == 0:
        mean = ad.const(np.zeros(kdiag.shape[0]))
        return (mean, kdiag, ad.const(0.0)) if return_kl else (mean, kdiag)
    Zs = _subset_Z(model, idx)
    Kmm = gram(model.kernel, Zs)
    Kmn = gram(model.kernel, Zs, X)
    Lm = ad.cholesky(Kmm)
    A = ad.solve_triangular(Lm, Kmn)
    Bt = ad.solve_triangular(Lm, A, trans=True)        # K_MM^{-1} K_MN
    m, Lq = _q_subset(model, idx, q)
    mean = ad.matmul(ad.transpose(Bt), m)
    var = kdiag - ad.sum(ad.square(A), axis=0) + ad.sum(ad.square(ad.matmul(ad.transpose(Lq), Bt)), axis=0)
    if not return_kl:
        return mean, var
    kl = _kl_factors(m, Lq, np.zeros(idx.size), Lm, idx.size)
    return mean, var, kl


def expected_loglik(mean, var, log_noise, y):
    """sum_i E_{N(f | mean_i, var_i)} log N(y_i | f, noise)."""
    y = _col(y)
    noise = _noise_var(log_noise)
    resid = ad.sum(ad.square(ad.sub(mean, y))) + ad.sum(var)
    return -0.5 * y.size * (LOG_2PI + ad._wrap(log_noise)) - 0.5 * resid / noise


def uncollapsed_elbo(model, subset, X, y, scale=1.0, q=None):
    """Hensman bound: ``scale * sum_i E log p(y_i | f_i) - KL[q(u|Z) || p(u|Z)]``.

    ``q`` optionally overrides the stored variational Gaussian for the subset.
    The KL term is never scaled.
    """
    mean, var, kl = marginals(model, subset, X, q=q, return_kl=True)
    return scale * expected_loglik(mean, var, model.log_noise, y) - kl


def elbo(model, subset, X, y, scale=1.0):
    """L(Z) in the model's bound mode."""
    if model.mode == "collapsed":
        if scale != 1.0:
            raise ValueError("the collapsed bound cannot be evaluated on a minibatch")
        return collapsed_elbo(model, subset, X, y)
    return uncollapsed_elbo(model, subset, X, y, scale=scale)


def predict(model, subset, q, X_test):
    """Predictive mean and latent variance at ``X_test``; add ``model.noise`` for observations.

    ``q=None`` uses the stored ``(m*, S*)`` restricted to the subset.
    """
    idx = as_subset(subset, model.num_candidates)
    if idx.size == 0:
        raise ValueError("predict needs a non-empty subset")
    mean, var = marginals(model, idx, X_test, q=q)
    return mean.value.copy(), np.maximum(var.value, 0.0)
