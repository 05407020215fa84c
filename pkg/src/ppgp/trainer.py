"""Joint optimisation of a sparse GP and its inducing-point process.

Training runs in three phases:

1. ``pre``: fit the GP on the full candidate set.
2. ``ppp``: maximise ``E_q[L(Z)] - KL[q || p]``; the score-function estimator
   (or the Concrete relaxation) drives the logits while sample-averaged
   gradients update the GP parameters.
3. ``post``: extract one subset, drop the point process and refit.
"""
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import gp_core
from .estimators import BaselineState, ConcreteConfig, concrete_gradient, sf_gradient
from .point_process import PppPosterior, PriorSpec, cardinality_stats, kl_and_grad, sample

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

EXTRACTION_MODES = ("threshold", "sample", "top")
ESTIMATORS = ("score", "concrete")


@dataclass
class TrainConfig:
    n_pre: int = 200
    n_ppp: int = 600
    n_post: int = 200
    lr: float = 0.01
    lr_ppp: float = 0.2
    n_samples: int = 4
    baseline_decay: float = 0.9
    batch_size: int = 0
    seed: int = 0
    alpha: float = 0.05
    extraction: str = "threshold"
    optimize_z_ppp: bool = False
    train_hypers_ppp: bool = True
    init_prob: float = 0.5
    estimator: str = "score"
    concrete_initial: float = 1.0
    concrete_final: float = 0.1
    concrete_decay: float = 0.999
    record_time: bool = True

    def __post_init__(self):
        for name in ("n_pre", "n_ppp", "n_post"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lr <= 0 or self.lr_ppp <= 0:
            raise ValueError("learning rates must be positive")
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")
        if self.batch_size < 0:
            raise ValueError("batch_size must be non-negative (0 means full batch)")
        if self.extraction not in EXTRACTION_MODES:
            raise ValueError(f"extraction must be one of {EXTRACTION_MODES}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        if not 0.0 < self.init_prob < 1.0:
            raise ValueError("init_prob must lie strictly between 0 and 1")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training option(s): {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    @property
    def concrete(self):
        return ConcreteConfig(self.concrete_initial, self.concrete_final, self.concrete_decay)


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    elbo: float
    ppp_kl: float
    expected_M: float
    wall_ms: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    selected: np.ndarray = None

    def append(self, rec):
        self.records.append(rec)
        log.debug("epoch %d [%s] elbo=%.6g kl=%.6g E=%.3f", rec.epoch, rec.phase,
                  rec.elbo, rec.ppp_kl, rec.expected_M)

    def phase(self, name):
        return [r for r in self.records if r.phase == name]

    def to_records(self, timing=True):
        """Plain dicts; ``timing=False`` zeroes ``wall_ms`` so reruns compare equal."""
        out = []
        for r in self.records:
            d = asdict(r)
            if not timing:
                d["wall_ms"] = 0.0
            out.append(d)
        return out


# ---------------------------------------------------------------- Adam

def adam_init(params):
    return {"t": 0,
            "m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()}}


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam step minimising the objective whose gradient is ``grads``.

    ``lr`` is a float or a mapping from parameter name to rate.  Parameters
    without a gradient are left alone.  A step with any non-finite gradient
    is skipped.
    """
    if any(not np.all(np.isfinite(g)) for g in grads.values()):
        log.warning("non-finite gradient at Adam step %d; step skipped", state["t"] + 1)
        return params, state
    t = state["t"] + 1
    new_params, m_all, v_all = dict(params), dict(state["m"]), dict(state["v"])
    for k, g in grads.items():
        m = ADAM_BETA1 * m_all.get(k, np.zeros_like(g)) + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v_all.get(k, np.zeros_like(g)) + (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1 ** t)
        v_hat = v / (1 - ADAM_BETA2 ** t)
        rate = lr[k] if isinstance(lr, dict) else lr
        new_params[k] = params[k] - rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        m_all[k], v_all[k] = m, v
    return new_params, {"t": t, "m": m_all, "v": v_all}


# ---------------------------------------------------------------- helpers

def minibatch_iter(data, size, rng):
    """Random partition of ``range(N)`` into batches of ``size`` (last may be short)."""
    N = data if isinstance(data, (int, np.integer)) else len(_xy(data)[1])
    if size <= 0 or size >= N:
        return [np.arange(N)]
    perm = rng.permutation(N)
    return [perm[i:i + size] for i in range(0, N, size)]


def extract_subset(post, mode, rng):
    """Inducing subset to keep after the point-process phase; never empty.

    ``threshold`` keeps candidates with inclusion probability >= 0.5,
    ``sample`` draws one subset from the posterior and ``top`` keeps the
    ``round(E|Z|)`` most probable candidates.
    """
    if mode == "threshold":
        idx = np.flatnonzero(post.probs >= 0.5)
    elif mode == "sample":
        idx = sample(post, rng)
    elif mode == "top":
        # the round(E) most probable candidates
        n = int(round(float(post.probs.sum())))
        idx = np.sort(np.argsort(-post.probs, kind="stable")[:n])
    else:
        raise ValueError(f"unknown extraction mode {mode!r}")
    if idx.size == 0:
        idx = np.array([int(np.argmax(post.probs))])
    return idx


def _xy(data):
    if hasattr(data, "X") and hasattr(data, "y"):
        return np.asarray(data.X, dtype=float), np.asarray(data.y, dtype=float)
    X, y = data
    X = np.asarray(X, dtype=float)
    return (X if X.ndim == 2 else X[:, None]), np.asarray(y, dtype=float).reshape(-1)


def trainable(model, optimize_z=True, hypers=True):
    names = []
    if hypers:
        names += list(gp_core.HYPER_NAMES)
    if optimize_z:
        names.append("Z")
    if model.mode == "uncollapsed":
        names += ["q_mu", "q_sqrt_raw"]
    return tuple(names)


def _check_batching(model, batch_size, N):
    if batch_size > N:
        raise ValueError(f"batch size {batch_size} exceeds the number of data points {N}")
    if 0 < batch_size < N and model.mode == "collapsed":
        raise ValueError("minibatching requires the uncollapsed bound")


def _neg(grads):
    return {k: -g for k, g in grads.items()}


def _clock():
    return time.perf_counter()


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- fitting

def fit_svgp(model, X, y, epochs, config, rng, history=None, phase="pre", subset=None,
             epoch_offset=0):
    """Maximise L(subset) over the GP parameters for ``epochs`` passes."""
    N = len(y)
    subset = gp_core.full_subset(model) if subset is None else subset
    names = trainable(model)
    params = {k: v for k, v in model.params().items()}
    state = adam_init({k: params[k] for k in names})
    K = model.num_candidates
    for epoch in range(epochs):
        t0 = _clock()
        values = []
        for batch in minibatch_iter(N, config.batch_size, rng):
            scale = N / len(batch)
            try:
                val, grads = gp_core.value_and_grad(
                    gp_core.elbo, model, subset, X[batch], y[batch], scale=scale, wrt=names)
            except np.linalg.LinAlgError as exc:
                raise TrainingError(f"{phase} phase, epoch {epoch_offset + epoch}: {exc}") from exc
            params, state = adam_step(params, _neg(grads), state, config.lr)
            model = model.with_params(params)
            values.append(val)
        if history is not None:
            history.append(EpochRecord(epoch_offset + epoch, phase, float(np.mean(values)), 0.0,
                                       float(len(subset) if subset is not None else K),
                                       _elapsed(t0, config)))
    return model


def _elapsed(t0, config):
    return round((_clock() - t0) * 1e3, 3) if config.record_time else 0.0


def _ppp_phase(model, post, prior, X, y, config, rng, history, epoch_offset):
    N = len(y)
    names = trainable(model, optimize_z=config.optimize_z_ppp, hypers=config.train_hypers_ppp)
    params = model.params()
    logits = np.array(post.logits, dtype=float)
    state = adam_init({**{k: params[k] for k in names}, "logits": logits})
    lrs = {**{k: config.lr for k in names}, "logits": config.lr_ppp}
    baseline = BaselineState(decay=config.baseline_decay)
    for epoch in range(config.n_ppp):
        t0 = _clock()
        values = []
        for batch in minibatch_iter(N, config.batch_size, rng):
            Xb, yb = X[batch], y[batch]
            scale = N / len(batch)
            post = PppPosterior(logits)
            if config.estimator == "score":
                def bound_fn(subset, model=model):
                    return gp_core.value_and_grad(gp_core.elbo, model, subset, Xb, yb,
                                                  scale=scale, wrt=names)
                try:
                    g_logits, g_params, baseline, val = sf_gradient(
                        post, bound_fn, config.n_samples, baseline, rng)
                except Exception as exc:
                    raise TrainingError(f"ppp phase, epoch {epoch_offset + epoch}: {exc}") from exc
            else:
                tau = config.concrete.at(epoch)
                g_logits, g_params, val = concrete_gradient(
                    model, post, config.concrete, Xb, yb, rng, wrt=names, temperature=tau)
            kl, g_kl = kl_and_grad(post, prior)
            grads = {**g_params, "logits": g_logits - g_kl}
            new, state = adam_step({**params, "logits": logits}, _neg(grads), state, lrs)
            logits = new.pop("logits")
            params = new
            model = model.with_params(params)
            values.append(val - kl)
        post = PppPosterior(logits)
        E, _ = cardinality_stats(post)
        kl, _ = kl_and_grad(post, prior)
        history.append(EpochRecord(epoch_offset + epoch, "ppp", float(np.mean(values)), kl, E,
                                   _elapsed(t0, config)))
    return model, PppPosterior(logits)


def run_training(model, data, prior=None, config=None):
    """Three-phase fit.  Returns ``(model, posterior, history)``.

    The returned model holds only the extracted inducing points when the
    point-process phase ran; ``history.selected`` lists their candidate
    indices.  In collapsed mode the stored ``(m*, S*)`` is set to the optimal
    Gaussian so the model file can predict on its own.
    """
    config = config or TrainConfig()
    X, y = _xy(data)
    _check_batching(model, config.batch_size, len(y))
    K = model.num_candidates
    prior = prior or PriorSpec(config.alpha, K)
    if prior.K != K:
        raise ValueError(f"prior is over {prior.K} candidates, model has {K}")
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    post = PppPosterior.init(K, config.init_prob)

    model = fit_svgp(model, X, y, config.n_pre, config, rng, history, "pre")
    selected = np.arange(K)
    if config.n_ppp > 0:
        model, post = _ppp_phase(model, post, prior, X, y, config, rng, history, config.n_pre)
        selected = extract_subset(post, config.extraction, rng)
        model = model.restrict(selected)
    model = fit_svgp(model, X, y, config.n_post, config, rng, history, "post",
                     epoch_offset=config.n_pre + config.n_ppp)
    if model.mode == "collapsed":
        model = model.with_q(*gp_core.collapsed_q_u(model, gp_core.full_subset(model), X, y))
    history.selected = selected
    return model, post, history
