"""RBF kernel with one lengthscale per input dimension (ARD)."""
from dataclasses import dataclass

import numpy as np

from . import adgrad as ad


@dataclass
class KernelParams:
    """Hyperparameters stored on the log scale.

    ``log_lengthscales`` has one entry per input dimension.  Either field may
    hold an :class:`adgrad.Node` while a graph is being recorded.
    """

    log_lengthscales: object
    log_variance: object = 0.0

    @classmethod
    def init(cls, dim, lengthscale=1.0, variance=1.0):
        return cls(np.full(dim, np.log(lengthscale)), np.log(variance))

    @property
    def lengthscales(self):
        return np.exp(ad.forward(self.log_lengthscales))

    @property
    def variance(self):
        return float(np.exp(ad.forward(self.log_variance)))

    @property
    def dim(self):
        return int(np.size(ad.forward(self.log_lengthscales)))

    def check(self):
        vals = np.append(ad.forward(self.log_lengthscales), ad.forward(self.log_variance))
        if not np.all(np.isfinite(np.exp(vals))) or np.any(np.exp(vals) <= 0):
            raise ValueError("kernel hyperparameters must map to finite positive values")


def _as_matrix(X):
    if isinstance(X, ad.Node):
        return X if X.ndim == 2 else ad.reshape(X, (-1, 1))
    X = np.asarray(X, dtype=float)
    return X if X.ndim == 2 else X.reshape(-1, 1)


def gram(params, X, X2=None):
    """k(x_i, x'_j) = v exp(-1/2 sum_d (x_id - x'_jd)^2 / l_d^2).

    Pairwise differences are formed explicitly, so the result is exactly
    symmetric for ``X2 is X`` and carries no cancellation error.
    """
    X = _as_matrix(X)
    X2 = X if X2 is None else _as_matrix(X2)
    d, d2 = X.shape[1], X2.shape[1]
    if d != d2 or d != params.dim:
        raise ad.ShapeError(
            f"input dimensions {d} and {d2} do not match kernel dimension {params.dim}")
    inv_ls = ad.exp(ad.neg(params.log_lengthscales))
    A = ad.mul(X, inv_ls)
    B = ad.mul(X2, inv_ls)
    diff = ad.sub(ad.reshape(A, (X.shape[0], 1, d)), ad.reshape(B, (1, X2.shape[0], d)))
    sq = ad.sum(ad.square(diff), axis=2)
    return ad.exp(ad.sub(params.log_variance, ad.mul(0.5, sq)))


def gram_diag(params, X):
    """diag(gram(X, X)) in O(n): the signal variance repeated."""
    n = _as_matrix(X).shape[0]
    return ad.mul(ad.exp(params.log_variance), np.ones(n))
