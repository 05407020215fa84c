"""Gradient estimators for E_q[L(Z)] under the point-process posterior.

* :func:`sf_gradient`: score-function (REINFORCE) estimator with a decaying
  average baseline; GP parameter gradients are averaged over the samples.
* :func:`concrete_gradient`: pathwise estimator through a binary Concrete
  relaxation of the inclusion mask, using :func:`masked_bound`.
* :func:`enumerate_expectation`: exact sum over all 2^K subsets, for testing.
"""
import itertools
from dataclasses import dataclass, replace

import numpy as np

from . import adgrad as ad
from . import gp_core
from .kernel import gram, gram_diag
from .point_process import sample, score

MAX_ENUMERATION_K = 20


class BoundEvaluationError(RuntimeError):
    def __init__(self, subset, cause):
        super().__init__(f"bound evaluation failed for subset {list(map(int, subset))}: {cause}")
        self.subset = np.asarray(subset)


@dataclass(frozen=True)
class BaselineState:
    """Decaying average of sampled bound values.

    An uninitialised state is seeded with the first batch mean before it is
    used, so the very first step is centred as well.
    """

    value: float = 0.0
    decay: float = 0.9
    initialized: bool = False

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError(f"baseline decay must lie in (0, 1), got {self.decay}")

    def update(self, batch_mean):
        if not self.initialized:
            return replace(self, value=float(batch_mean), initialized=True)
        return replace(self, value=self.decay * self.value + (1.0 - self.decay) * float(batch_mean))


@dataclass(frozen=True)
class ConcreteConfig:
    """Temperature schedule ``max(final, initial * decay**epoch)``."""

    initial: float = 1.0
    final: float = 0.1
    decay: float = 0.999

    def __post_init__(self):
        if self.initial <= 0 or self.final <= 0:
            raise ValueError("Concrete temperatures must be strictly positive")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("temperature decay must lie in (0, 1]")

    @property
    def temperature(self):
        return self.initial

    def at(self, epoch):
        return max(self.final, self.initial * self.decay ** epoch)


def _call(bound_fn, subset):
    try:
        out = bound_fn(subset)
    except Exception as exc:  # noqa: BLE001 - re-raised with context
        raise BoundEvaluationError(subset, exc) from exc
    if isinstance(out, tuple):
        return float(out[0]), out[1]
    return float(out), {}


def sf_gradient(post, bound_fn, S, baseline, rng):
    """Score-function gradient of E_q[L(Z)] with respect to the logits.

    ``bound_fn(subset)`` returns ``L(subset)`` or ``(L(subset), grads)``.
    ``baseline`` is a :class:`BaselineState` or ``None`` for no centring.

    Returns ``(logit_grad, param_grads, new_baseline, mean_value)``.
    """
    if S < 1:
        raise ValueError("need at least one sample")
    subsets = [sample(post, rng) for _ in range(S)]
    values, grads = [], {}
    for z in subsets:
        v, g = _call(bound_fn, z)
        values.append(v)
        for k, gk in g.items():
            grads[k] = grads[k] + gk if k in grads else np.array(gk, dtype=float)
    values = np.array(values)
    mean_value = float(values.mean())
    if baseline is None:
        centre, new_baseline = 0.0, None
    else:
        if not baseline.initialized:
            baseline = baseline.update(mean_value)
        centre = baseline.value
        new_baseline = baseline.update(mean_value)
    logit_grad = np.zeros(post.K)
    for v, z in zip(values, subsets):
        logit_grad += (v - centre) * score(post, z)
    logit_grad /= S
    return logit_grad, {k: g / S for k, g in grads.items()}, new_baseline, mean_value


def all_subsets(K):
    for bits in itertools.product((0, 1), repeat=K):
        yield np.flatnonzero(bits)


def enumerate_expectation(post, bound_fn):
    """Exact ``sum_Z q(Z) L(Z)`` and its gradient with respect to the logits."""
    K = post.K
    if K > MAX_ENUMERATION_K:
        raise ValueError(f"enumeration over 2^{K} subsets is not supported (K <= {MAX_ENUMERATION_K})")
    lam = post.probs
    x = np.asarray(ad.forward(post.logits), dtype=float)
    log_lam, log_not = -np.logaddexp(0.0, -x), -np.logaddexp(0.0, x)
    total = 0.0
    grad = np.zeros(K)
    for z in all_subsets(K):
        b = np.zeros(K)
        b[z] = 1.0
        q = np.exp(np.sum(b * log_lam + (1.0 - b) * log_not))
        v, _ = _call(bound_fn, z)
        total += q * v
        grad += q * v * (b - lam)
    return total, grad


def _masked_grams(model, b):
    Z = model.Z
    Kzz = gram(model.kernel, Z)
    kzz = gram_diag(model.kernel, Z)
    bb = ad.mul(ad.reshape(b, (-1, 1)), ad.reshape(b, (1, -1)))
    # off-diagonal k b_i b_j; diagonal b (k - 1) + 1
    diag_fix = ad.sub(ad.add(ad.mul(b, ad.sub(kzz, 1.0)), 1.0), ad.mul(ad.square(b), kzz))
    Kmm = ad.add(ad.mul(Kzz, bb), ad.diag_embed(diag_fix))
    return Kmm


def masked_bound(model, b, X, y):
    """Collapsed bound over all candidates of a GP whose inducing variables are masked.

    Candidate ``k`` enters the kernel scaled by ``b_k``; its prior variance
    becomes ``b_k (k(z_k, z_k) - 1) + 1``, so a masked-out point is an
    independent standard normal that carries no information.  For binary
    ``b`` this equals ``collapsed_elbo`` on ``{k : b_k = 1}``.  The mask acts
    on candidate identity, never on data inputs that happen to coincide.
    """
    if model.mode != "collapsed":
        raise ValueError("the masked bound assumes the collapsed variational distribution")
    b = ad._wrap(b)
    if b.shape != (model.num_candidates,):
        raise ad.ShapeError(f"mask must have length {model.num_candidates}, got {b.shape}")
    bv = b.value
    if np.any(bv < 0) or np.any(bv > 1):
        raise ValueError("mask entries must lie in [0, 1]")
    Kmm = _masked_grams(model, b)
    Kmn = ad.mul(ad.reshape(b, (-1, 1)), gram(model.kernel, model.Z, X))
    knn_trace = ad.sum(gram_diag(model.kernel, X))
    return gp_core._collapsed_from_grams(Kmm, Kmn, knn_trace, model.log_noise, y)


def relaxed_mask(logits, temperature, rng):
    """Binary Concrete sample ``logistic((logits + logistic noise) / temperature)``."""
    K = np.size(ad.forward(logits))
    u = rng.uniform(np.finfo(float).tiny, 1.0, size=K)
    noise = np.log(u) - np.log1p(-u)
    return ad.logistic(ad.div(ad.add(logits, noise), temperature))


def concrete_gradient(model, post, config, X, y, rng, wrt=gp_core.PARAM_NAMES, temperature=None):
    """Pathwise gradient of the relaxed masked bound.

    Returns ``(logit_grad, param_grads, relaxed_value)``.
    """
    tau = config.temperature if temperature is None else temperature
    logits = ad.leaf(ad.forward(post.logits), "logits")
    b = relaxed_mask(logits, tau, rng)
    expr = masked_bound(model.leaves(wrt), b, X, y)
    grads = ad.backward(expr)
    params = model.params()
    pgrads = {n: grads.get(n, np.zeros_like(params[n])) for n in wrt}
    return grads.get("logits", np.zeros(post.K)), pgrads, float(expr.value)
