"""Doubly-stochastic deep GP with one candidate set and one point process per layer.

Each layer maps its input through ``D`` independent output dimensions that
share inducing inputs and a kernel but own their variational Gaussians
``N(m[:, d], S_d)``.  Given a layer input the inducing outputs are integrated
out analytically; layers are chained with one reparameterised sample per
data point.  The top layer's Gaussian likelihood expectation is closed form.
"""
import logging
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import adgrad as ad
from . import gp_core
from .kernel import KernelParams, gram, gram_diag
from .point_process import PppPosterior, PriorSpec, cardinality_stats, kl_and_grad
from .estimators import BaselineState, sf_gradient
from .trainer import (EpochRecord, TrainConfig, TrainHistory, TrainingError, _clock, _elapsed,
                      _neg, _xy, adam_init, adam_step, extract_subset, minibatch_iter)

log = logging.getLogger(__name__)

LAYER_FIELDS = ("Z", "log_lengthscales", "log_variance", "q_mu", "q_sqrt_raw")
MIN_VARIANCE = 1e-12


@dataclass
class DgpLayer:
    Z: object                 # K x d_in
    kernel: KernelParams
    q_mu: object              # K x D
    q_sqrt_raw: object        # D x K x K

    @property
    def num_candidates(self):
        return ad.forward(self.Z).shape[0]

    @property
    def width(self):
        return ad.forward(self.q_mu).shape[1]

    def q_sqrt(self, d):
        return gp_core.q_factor(self.q_sqrt_raw[d] if isinstance(self.q_sqrt_raw, ad.Node)
                                else self.q_sqrt_raw[d])

    def restrict(self, subset):
        idx = gp_core.as_subset(subset, self.num_candidates)
        raws = []
        for d in range(self.width):
            R = self.q_sqrt(d).value[idx]
            raws.append(gp_core.raw_from_cov(R @ R.T))
        return DgpLayer(np.array(ad.forward(self.Z))[idx], self.kernel,
                        np.array(ad.forward(self.q_mu))[idx], np.stack(raws))


@dataclass
class DgpModel:
    layers: list
    log_noise: object = 0.0
    concat_input: bool = True

    @property
    def depth(self):
        return len(self.layers)

    def params(self):
        out = {"log_noise": np.array(ad.forward(self.log_noise), dtype=float)}
        for i, layer in enumerate(self.layers):
            out[f"l{i}.Z"] = np.array(ad.forward(layer.Z), dtype=float)
            out[f"l{i}.log_lengthscales"] = np.array(ad.forward(layer.kernel.log_lengthscales), dtype=float)
            out[f"l{i}.log_variance"] = np.array(ad.forward(layer.kernel.log_variance), dtype=float)
            out[f"l{i}.q_mu"] = np.array(ad.forward(layer.q_mu), dtype=float)
            out[f"l{i}.q_sqrt_raw"] = np.array(ad.forward(layer.q_sqrt_raw), dtype=float)
        return out

    def with_params(self, values):
        p = {**self.params(), **values}
        layers = [DgpLayer(p[f"l{i}.Z"], KernelParams(p[f"l{i}.log_lengthscales"], p[f"l{i}.log_variance"]),
                           p[f"l{i}.q_mu"], p[f"l{i}.q_sqrt_raw"]) for i in range(self.depth)]
        return replace(self, layers=layers, log_noise=p["log_noise"])

    def leaves(self, names=None):
        p = self.params()
        names = list(p) if names is None else names
        return self.with_params({n: ad.leaf(p[n], n) for n in names})

    def restrict(self, subsets):
        return replace(self, layers=[l.restrict(s) for l, s in zip(self.layers, subsets)])

    @property
    def noise(self):
        return float(np.exp(ad.forward(self.log_noise)))


def init_dgp(X, depth=2, width=1, num_candidates=25, concat_input=True, rng=None,
             hidden_init=None):
    """Layers at unit hyperparameters with candidates drawn from the training inputs.

    Hidden coordinates of deeper candidate sets start at ``hidden_init``
    (rows aligned with ``X``) or at zero.
    """
    rng = rng or np.random.default_rng(0)
    X = np.asarray(X, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    N, dx = X.shape
    Ks = [num_candidates] * depth if np.isscalar(num_candidates) else list(num_candidates)
    layers = []
    for i in range(depth):
        D = 1 if i == depth - 1 else width
        rows = rng.choice(N, size=min(Ks[i], N), replace=False)
        if i == 0:
            Z = X[rows]
        else:
            h = np.zeros((len(rows), width)) if hidden_init is None else np.asarray(hidden_init)[rows]
            Z = np.column_stack([h, X[rows]]) if concat_input else h
        kern = KernelParams.init(Z.shape[1])
        L = ad.cholesky(gram(kern, Z).value).value
        raw = np.tril(L, -1)
        raw[np.diag_indices_from(raw)] = np.log(np.diag(L))
        layers.append(DgpLayer(Z, kern, np.zeros((len(rows), D)), np.stack([raw] * D)))
    return DgpModel(layers, 0.0, concat_input)


# ---------------------------------------------------------------- propagation

def layer_moments(layer, subset, F, return_kl=False):
    """Per-point means and variances of every output dimension given layer input ``F``.

    Returns lists over dimensions (and the summed KL over dimensions).
    """
    idx = gp_core.as_subset(subset, layer.num_candidates)
    kdiag = gram_diag(layer.kernel, F)
    n = kdiag.shape[0]
    D = layer.width
    if idx.size == 0:
        mus = [ad.const(np.zeros(n))] * D
        vs = [kdiag] * D
        return (mus, vs, ad.const(0.0)) if return_kl else (mus, vs)
    Zs = ad.take(layer.Z, idx, axis=0)
    Lm = ad.cholesky(gram(layer.kernel, Zs))
    A = ad.solve_triangular(Lm, gram(layer.kernel, Zs, F))
    Bt = ad.solve_triangular(Lm, A, trans=True)
    prior_red = ad.sub(kdiag, ad.sum(ad.square(A), axis=0))
    mus, vs, kl = [], [], ad.const(0.0)
    full = idx.size == layer.num_candidates
    for d in range(D):
        m = ad.take(_col(layer.q_mu, d), idx)
        R = ad.take(layer.q_sqrt(d), idx, axis=0)
        Lq = R if full else ad.cholesky(ad.matmul(R, ad.transpose(R)))
        mus.append(ad.matmul(ad.transpose(Bt), m))
        vs.append(ad.add(prior_red, ad.sum(ad.square(ad.matmul(ad.transpose(Lq), Bt)), axis=0)))
        if return_kl:
            kl = kl + gp_core._kl_factors(m, Lq, np.zeros(idx.size), Lm, idx.size)
    return (mus, vs, kl) if return_kl else (mus, vs)


def _col(a, d):
    return a[:, d] if isinstance(a, ad.Node) else np.asarray(a)[:, d]


def layer_propagate(layer, subset, F, rng=None, eps=None):
    """One reparameterised draw of the layer output for every input row.

    Returns ``(F_out, means, variances)`` with ``F_out`` of shape N x D.
    """
    mus, vs = layer_moments(layer, subset, F)
    n = mus[0].shape[0]
    if eps is None:
        eps = rng.standard_normal((n, len(mus)))
    cols = []
    for d, (mu, v) in enumerate(zip(mus, vs)):
        sd = ad.sqrt(ad.clip(v, MIN_VARIANCE, np.inf))
        cols.append(ad.reshape(ad.add(mu, ad.mul(sd, eps[:, d])), (n, 1)))
    F_out = cols[0] if len(cols) == 1 else ad.concatenate(cols, axis=1)
    return F_out, mus, vs


def _layer_input(model, i, F, X):
    if i == 0:
        return X
    if model.concat_input:
        return ad.concatenate([F, X], axis=1)
    return F


def _top_moments(model, subsets, X, rng, eps=None):
    F = None
    for i, layer in enumerate(model.layers[:-1]):
        inp = _layer_input(model, i, F, X)
        F, _, _ = layer_propagate(layer, subsets[i], inp, rng, None if eps is None else eps[i])
    inp = _layer_input(model, model.depth - 1, F, X)
    return layer_moments(model.layers[-1], subsets[-1], inp)


def dgp_elbo(model, subsets, X, y, scale=1.0, rng=None, eps=None):
    """Single-sample estimate of ``E log p(y | F^L) - sum_l sum_d KL[q(u^{l,d}) || p(u^{l,d})]``.

    ``eps`` (a list of N x D arrays, one per hidden layer) freezes the noise.
    """
    X = np.asarray(X, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    y = np.asarray(y, dtype=float).reshape(-1)
    F, kl = None, ad.const(0.0)
    for i, layer in enumerate(model.layers):
        inp = _layer_input(model, i, F, X)
        if i < model.depth - 1:
            _, _, kl_i = layer_moments(layer, subsets[i], inp, return_kl=True)
            F, _, _ = layer_propagate(layer, subsets[i], inp, rng, None if eps is None else eps[i])
        else:
            mus, vs, kl_i = layer_moments(layer, subsets[i], inp, return_kl=True)
        kl = kl + kl_i
    ell = ad.const(0.0)
    for mu, v in zip(mus, vs):
        ell = ell + gp_core.expected_loglik(mu, v, model.log_noise, y)
    return ad.sub(ad.mul(scale, ell), kl)


def layer_kls(model, subsets):
    """Per-layer KL terms (input-independent)."""
    out = []
    for layer, s in zip(model.layers, subsets):
        _, _, kl = layer_moments(layer, s, np.asarray(ad.forward(layer.Z))[:1], return_kl=True)
        out.append(float(kl.value))
    return out


def dgp_predict(model, subsets, X_test, n_samples=512, rng=None):
    """Moment-matched predictive mean and latent variance from ``n_samples`` passes."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    rng = rng or np.random.default_rng(0)
    X_test = np.asarray(X_test, dtype=float)
    X_test = X_test[:, None] if X_test.ndim == 1 else X_test
    means, second = 0.0, 0.0
    for _ in range(n_samples if model.depth > 1 else 1):
        mus, vs = _top_moments(model, subsets, X_test, rng)
        mu, v = mus[0].value, np.maximum(vs[0].value, 0.0)
        means = means + mu
        second = second + v + mu * mu
    n = n_samples if model.depth > 1 else 1
    mean = means / n
    return mean, np.maximum(second / n - mean * mean, 0.0)


def full_subsets(model):
    return [np.arange(l.num_candidates) for l in model.layers]


def value_and_grad(model, subsets, X, y, scale=1.0, rng=None, wrt=None, eps=None):
    p = model.params()
    wrt = list(p) if wrt is None else list(wrt)
    expr = dgp_elbo(model.leaves(wrt), subsets, X, y, scale, rng, eps)
    grads = ad.backward(expr)
    return float(expr.value), {n: grads.get(n, np.zeros_like(p[n])) for n in wrt}


# ---------------------------------------------------------------- training

@dataclass
class DgpConfig(TrainConfig):
    n_pre: int = 1000
    n_ppp: int = 500
    n_post: int = 1500
    alpha: float = 0.1
    n_layer_pre: int = 200
    depth: int = 2
    width: int = 1
    num_candidates: int = 25
    concat_input: bool = True
    n_pred_samples: int = 512

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown DGP option(s): {sorted(unknown)}")
        return cls(**d)


def _trainable(model, optimize_z=True, hypers=True):
    names = []
    for name in model.params():
        base = name.split(".", 1)[-1]
        if base == "Z" and not optimize_z:
            continue
        if base in ("log_lengthscales", "log_variance", "log_noise") and not hypers:
            continue
        names.append(name)
    return names


def _fit(model, subsets, X, y, epochs, config, rng, names, history=None, phase="pre", offset=0):
    N = len(y)
    params = model.params()
    state = adam_init({k: params[k] for k in names})
    for epoch in range(epochs):
        t0 = _clock()
        vals = []
        for batch in minibatch_iter(N, config.batch_size, rng):
            try:
                v, g = value_and_grad(model, subsets, X[batch], y[batch], N / len(batch), rng, names)
            except np.linalg.LinAlgError as exc:
                raise TrainingError(f"{phase} phase, epoch {offset + epoch}: {exc}") from exc
            params, state = adam_step(params, _neg(g), state, config.lr)
            model = model.with_params(params)
            vals.append(v)
        if history is not None:
            history.append(EpochRecord(offset + epoch, phase, float(np.mean(vals)), 0.0,
                                       float(sum(len(s) for s in subsets)), _elapsed(t0, config)))
    return model


def pretrain_layers(model, X, y, epochs, config, rng):
    """Fit each layer on its own with the layers above acting as identity.

    Layer ``l`` is trained as a one-layer model from its (mean) input to
    ``y``; its predictive mean then fills the hidden coordinates of the next
    layer's candidates and inputs.
    """
    if epochs <= 0:
        return model
    layers = list(model.layers)
    F = None
    for i, layer in enumerate(layers):
        inp = X if i == 0 else (np.column_stack([F, X]) if model.concat_input else F)
        if i > 0:
            layer = _refresh_hidden(layer, inp, rng)
        single = DgpModel([layer], model.log_noise, concat_input=False)
        names = _trainable(single)
        single = _fit(single, [np.arange(layer.num_candidates)], inp, y, epochs, config, rng, names)
        layers[i] = single.layers[0]
        mus, _ = layer_moments(layers[i], np.arange(layers[i].num_candidates), inp)
        F = np.column_stack([m.value for m in mus])
    return replace(model, layers=layers)


def _refresh_hidden(layer, inp, rng):
    """Place the hidden part of the candidates at propagated training rows."""
    Z = np.array(ad.forward(layer.Z))
    rows = rng.choice(inp.shape[0], size=Z.shape[0], replace=False)
    Z = inp[rows]
    L = ad.cholesky(gram(layer.kernel, Z).value).value
    raw = np.tril(L, -1)
    raw[np.diag_indices_from(raw)] = np.log(np.diag(L))
    return DgpLayer(Z, layer.kernel, np.zeros_like(np.asarray(ad.forward(layer.q_mu))),
                    np.stack([raw] * layer.width))


def _split(joint, offsets):
    return [joint[(joint >= lo) & (joint < hi)] - lo for lo, hi in zip(offsets[:-1], offsets[1:])]


def dgp_train(model, layer_ppps, data, prior_alpha=None, config=None):
    """Layer-wise pre-training, then the pre / point-process / post phases.

    The joint point process is the product of the per-layer processes, so a
    joint sample is one independent sample per layer and the joint log-pmf
    is the sum of the per-layer ones.  Each layer has its own prior with the
    shared ``alpha``.

    Returns ``(model, layer_ppps, subsets, history)``.
    """
    config = config or DgpConfig()
    X, y = _xy(data)
    alpha = config.alpha if prior_alpha is None else prior_alpha
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    Ks = [l.num_candidates for l in model.layers]
    offsets = np.cumsum([0] + Ks)
    if layer_ppps is None:
        layer_ppps = [PppPosterior.init(K, config.init_prob) for K in Ks]
    priors = [PriorSpec(alpha, K) for K in Ks]

    model = pretrain_layers(model, X, y, config.n_layer_pre, config, rng)
    subsets = full_subsets(model)
    model = _fit(model, subsets, X, y, config.n_pre, config, rng, _trainable(model), history, "pre")

    if config.n_ppp > 0:
        model, layer_ppps = _dgp_ppp_phase(model, layer_ppps, priors, offsets, X, y, config, rng,
                                           history)
        subsets = [extract_subset(p, config.extraction, rng) for p in layer_ppps]
        model = model.restrict(subsets)
    model = _fit(model, full_subsets(model), X, y, config.n_post, config, rng, _trainable(model),
                 history, "post", offset=config.n_pre + config.n_ppp)
    history.selected = subsets
    return model, layer_ppps, subsets, history


def _dgp_ppp_phase(model, ppps, priors, offsets, X, y, config, rng, history):
    N = len(y)
    names = _trainable(model, optimize_z=config.optimize_z_ppp, hypers=config.train_hypers_ppp)
    params = model.params()
    logits = np.concatenate([np.asarray(p.logits, dtype=float) for p in ppps])
    state = adam_init({**{k: params[k] for k in names}, "logits": logits})
    lrs = {**{k: config.lr for k in names}, "logits": config.lr_ppp}
    baseline = BaselineState(decay=config.baseline_decay)
    for epoch in range(config.n_ppp):
        t0 = _clock()
        vals = []
        for batch in minibatch_iter(N, config.batch_size, rng):
            Xb, yb, scale = X[batch], y[batch], N / len(batch)

            def bound_fn(joint, model=model):
                return value_and_grad(model, _split(joint, offsets), Xb, yb, scale, rng, names)

            try:
                g_logits, g_params, baseline, val = sf_gradient(
                    PppPosterior(logits), bound_fn, config.n_samples, baseline, rng)
            except Exception as exc:
                raise TrainingError(f"ppp phase, epoch {config.n_pre + epoch}: {exc}") from exc
            kl_total = 0.0
            for j, prior in enumerate(priors):
                sl = slice(offsets[j], offsets[j + 1])
                kl, g_kl = kl_and_grad(PppPosterior(logits[sl]), prior)
                g_logits[sl] -= g_kl
                kl_total += kl
            new, state = adam_step({**params, "logits": logits}, _neg({**g_params, "logits": g_logits}),
                                   state, lrs)
            logits = new.pop("logits")
            params = new
            model = model.with_params(params)
            vals.append(val - kl_total)
        layer_posts = [PppPosterior(logits[offsets[j]:offsets[j + 1]]) for j in range(len(priors))]
        E = sum(cardinality_stats(p)[0] for p in layer_posts)
        kl = sum(kl_and_grad(p, pr)[0] for p, pr in zip(layer_posts, priors))
        history.append(EpochRecord(config.n_pre + epoch, "ppp", float(np.mean(vals)), kl, E,
                                   _elapsed(t0, config)))
    return model, [PppPosterior(logits[offsets[j]:offsets[j + 1]]) for j in range(len(priors))]
