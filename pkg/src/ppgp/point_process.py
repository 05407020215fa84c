"""Discrete Poisson point process over a candidate set and a squared-cardinality prior.

The variational process includes candidate ``k`` independently with
probability ``lam_k = logistic(logit_k)``; the prior is
``p(Z) = C exp(-alpha |Z|^2)``.  Because ``|Z|`` is Poisson-binomial under
the posterior, the KL divergence between them is closed form.
"""
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from . import adgrad as ad


@dataclass
class PppPosterior:
    logits: object

    @classmethod
    def init(cls, K, prob=0.5):
        return cls(np.full(K, np.log(prob) - np.log1p(-prob)))

    @property
    def K(self):
        return int(np.size(ad.forward(self.logits)))

    @property
    def probs(self):
        return _sigmoid(ad.forward(self.logits))


@dataclass
class PriorSpec:
    alpha: float
    K: int

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"prior strength must be non-negative, got {self.alpha}")
        if self.K < 1:
            raise ValueError("the candidate set must be non-empty")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def subset_mask(subset, K):
    b = np.zeros(K)
    b[np.asarray(subset, dtype=int)] = 1.0
    return b


def log_pmf(post, subset):
    """log q(Z) = sum_{k in Z} log lam_k + sum_{k not in Z} log(1 - lam_k)."""
    b = subset_mask(subset, post.K)
    # log lam = -softplus(-x), log(1 - lam) = -softplus(x)
    x = post.logits
    return -ad.sum(ad.add(ad.mul(b, ad.softplus(ad.neg(x))), ad.mul(1.0 - b, ad.softplus(x))))


def score(post, subset):
    """Gradient of log q(Z) with respect to the logits: ``b - lam``."""
    return subset_mask(subset, post.K) - post.probs


def sample(post, rng):
    """Independent inclusion of each candidate; returns sorted indices."""
    return np.flatnonzero(rng.random(post.K) < post.probs)


def cardinality_stats(post):
    """Mean and variance of |Z| (Poisson-binomial)."""
    lam = post.probs
    return float(lam.sum()), float(np.sum(lam * (1.0 - lam)))


def entropy(post):
    """sum_k -lam_k log lam_k - (1 - lam_k) log(1 - lam_k), differentiable in the logits."""
    x = post.logits
    lam = ad.logistic(x)
    # -lam log lam - (1-lam) log(1-lam) = lam softplus(-x) + (1-lam) softplus(x)
    return ad.sum(ad.add(ad.mul(lam, ad.softplus(ad.neg(x))),
                         ad.mul(ad.sub(1.0, lam), ad.softplus(x))))


def log_normalizer(prior):
    """log C = -log sum_{k=0}^K binom(K, k) exp(-alpha k^2), in log space.

    The empty set is part of the support, since the posterior gives it mass.
    """
    K = prior.K
    k = np.arange(K + 1)
    log_binom = gammaln(K + 1) - gammaln(k + 1) - gammaln(K - k + 1)
    return float(-logsumexp(log_binom - prior.alpha * k.astype(float) ** 2))


def cross_entropy(post, prior):
    """-E_q log p(Z) = -log C + alpha (Var|Z| + E|Z|^2)."""
    lam = ad.logistic(post.logits)
    E = ad.sum(lam)
    V = ad.sum(ad.mul(lam, ad.sub(1.0, lam)))
    return -log_normalizer(prior) + prior.alpha * ad.add(V, ad.square(E))


def kl_to_prior(post, prior):
    """KL[q || p] = cross-entropy - entropy."""
    if post.K != prior.K:
        raise ValueError(f"posterior has {post.K} candidates, prior expects {prior.K}")
    return ad.sub(cross_entropy(post, prior), entropy(post))


def kl_and_grad(post, prior):
    """KL value and its gradient with respect to the logits."""
    expr = kl_to_prior(PppPosterior(ad.leaf(ad.forward(post.logits), "logits")), prior)
    g = ad.backward(expr).get("logits", np.zeros(post.K))
    return float(expr.value), g
