import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ppgp import adgrad as ad
from ppgp import gp_core
from ppgp.gp_core import (SvgpModel, collapsed_elbo, collapsed_q_u, exact_lml, gaussian_kl,
                          marginals, predict, uncollapsed_elbo)
from ppgp.kernel import KernelParams, gram
from conftest import gauss_jordan_inverse, random_spd, spread_inputs, toy_regression


def random_model(rng, X, K, mode="collapsed", random_q=True):
    d = X.shape[1]
    # candidates about 0.6 lengthscales apart: no jitter needed, so the
    # exact-arithmetic identities hold to tight tolerances
    Z = spread_inputs(rng, K, d, spacing=0.6)
    model = SvgpModel.init(Z, mode=mode, lengthscale=np.exp(0.3 * rng.standard_normal()),
                           variance=np.exp(0.3 * rng.standard_normal()),
                           noise=np.exp(rng.uniform(-3, 0)))
    if random_q:
        S = random_spd(rng, K, 0.1) * 0.1
        model = model.with_q(rng.standard_normal(K), S)
    return model


def dense_lml(K, noise, y):
    C = K + noise * np.eye(len(y))
    Cinv = gauss_jordan_inverse(C)
    _, logdet = np.linalg.slogdet(C)
    return -0.5 * y @ Cinv @ y - 0.5 * logdet - 0.5 * len(y) * np.log(2 * np.pi)


class TestExactLml:
    def test_single_point(self):
        v = exact_lml(KernelParams.init(1), 0.0, np.zeros((1, 1)), np.zeros(1)).value
        np.testing.assert_allclose(v, -0.5 * np.log(4 * np.pi), rtol=1e-14)
        np.testing.assert_allclose(v, -1.26551, atol=1e-5)

    def test_density_maximised_at_mean(self, rng):
        X = rng.standard_normal((2, 1))
        k = KernelParams.init(1)
        assert exact_lml(k, 0.0, X, np.zeros(2)).value >= exact_lml(k, 0.0, X, np.full(2, 10.0)).value

    def test_dense_inverse_oracle(self, rng):
        X, y = toy_regression(rng, N=8, d=2)
        k = KernelParams(np.log([0.8, 1.4]), np.log(1.3))
        ref = dense_lml(gram(k, X).value, 0.05, y)
        np.testing.assert_allclose(exact_lml(k, np.log(0.05), X, y).value, ref, rtol=1e-9)


class TestGaussianKl:
    def test_identical(self, rng):
        S = random_spd(rng, 3)
        m = rng.standard_normal(3)
        assert abs(gaussian_kl(m, S, m, S).value) < 1e-12

    def test_shifted_unit_gaussians(self):
        np.testing.assert_allclose(gaussian_kl([1.0], [[1.0]], [0.0], [[1.0]]).value, 0.5, rtol=1e-14)

    def test_monte_carlo_oracle(self, rng):
        m0, m1 = rng.standard_normal(3), rng.standard_normal(3)
        S0, S1 = random_spd(rng, 3), random_spd(rng, 3)
        x = rng.multivariate_normal(m0, S0, size=1_000_000)

        def logpdf(x, m, S):
            L = np.linalg.cholesky(S)
            w = np.linalg.solve(L, (x - m).T)
            return -0.5 * np.sum(w * w, 0) - np.log(np.diag(L)).sum() - 1.5 * np.log(2 * np.pi)

        r = logpdf(x, m0, S0) - logpdf(x, m1, S1)
        se = r.std() / np.sqrt(r.size)
        assert abs(r.mean() - gaussian_kl(m0, S0, m1, S1).value) < 3 * se


class TestCollapsedQu:
    def test_interpolation_limit(self, rng):
        X, y = toy_regression(rng, N=6)
        model = SvgpModel.init(X, noise=1e-8)
        m, _ = collapsed_q_u(model, np.arange(6), X, y)
        np.testing.assert_allclose(m, y, atol=1e-4)

    def test_zero_outputs(self, rng):
        X, _ = toy_regression(rng, N=6)
        m, _ = collapsed_q_u(SvgpModel.init(X[:3], noise=0.1), np.arange(3), X, np.zeros(6))
        assert np.all(m == 0.0)

    def test_local_optimum_of_uncollapsed_bound(self, rng):
        X, y = toy_regression(rng, N=6)
        model = SvgpModel.init(X[:3] + 0.05, mode="uncollapsed", noise=0.1)
        sub = np.arange(3)
        m, S = collapsed_q_u(model, sub, X, y)
        best = uncollapsed_elbo(model, sub, X, y, q=(m, S)).value
        for _ in range(20):
            dm = rng.standard_normal(3)
            dS = rng.standard_normal((3, 3))
            dS = dS + dS.T
            scale = 1e-2 / np.sqrt(dm @ dm + np.sum(dS * dS))
            other = uncollapsed_elbo(model, sub, X, y, q=(m + scale * dm, S + scale * dS)).value
            assert other < best


class TestCollapsedElbo:
    def test_equals_exact_when_inducing_on_data(self, rng):
        X = spread_inputs(rng, 10)
        y = np.sin(X[:, 0]) + 0.1 * rng.standard_normal(10)
        model = SvgpModel.init(X, noise=0.3)
        np.testing.assert_allclose(collapsed_elbo(model, np.arange(10), X, y).value,
                                   exact_lml(model.kernel, model.log_noise, X, y).value, atol=1e-8)

    def test_empty_subset_single_point(self):
        # prior-marginal expected log-likelihood: log N(0 | 0, 1) - k(x, x) / 2
        model = SvgpModel.init(np.ones((1, 1)))
        v = collapsed_elbo(model, [], np.zeros((1, 1)), np.zeros(1)).value
        np.testing.assert_allclose(v, -0.5 * np.log(2 * np.pi) - 0.5, rtol=1e-14)
        np.testing.assert_allclose(v, -1.41894, atol=1e-5)
        u = uncollapsed_elbo(model.with_params({"q_mu": np.zeros(1)}), [], np.zeros((1, 1)), np.zeros(1))
        np.testing.assert_allclose(u.value, v, rtol=1e-14)

    def test_nested_subsets_monotone(self, rng):
        X, y = toy_regression(rng, N=12)
        model = SvgpModel.init(X[:6] + 0.01, noise=0.2)
        values = [collapsed_elbo(model, np.arange(M), X, y).value for M in range(0, 7)]
        assert np.all(np.diff(values) >= -1e-9)


class TestUncollapsedElbo:
    def test_collapsed_optimum(self, rng):
        X, y = toy_regression(rng, N=10)
        model = random_model(rng, X, 4, "uncollapsed", random_q=False)
        sub = np.arange(4)
        model = model.with_q(*collapsed_q_u(model, sub, X, y))
        np.testing.assert_allclose(uncollapsed_elbo(model, sub, X, y).value,
                                   collapsed_elbo(model, sub, X, y).value, atol=1e-8)

    def test_prior_q_has_zero_kl(self, rng):
        X, _ = toy_regression(rng, N=10)
        model = random_model(rng, X, 4, "uncollapsed", random_q=False)
        _, _, kl = marginals(model, np.arange(4), X, return_kl=True)
        assert abs(kl.value) < 1e-10

    def test_random_q_below_collapsed(self, rng):
        X, y = toy_regression(rng, N=10)
        model = random_model(rng, X, 4, "uncollapsed")
        sub = np.arange(4)
        assert uncollapsed_elbo(model, sub, X, y).value <= collapsed_elbo(model, sub, X, y).value

    def test_scale_multiplies_data_term_only(self, rng):
        X, y = toy_regression(rng, N=10)
        model = random_model(rng, X, 4, "uncollapsed")
        sub = np.arange(4)
        _, _, kl = marginals(model, sub, X, return_kl=True)
        l1 = uncollapsed_elbo(model, sub, X, y).value
        l3 = uncollapsed_elbo(model, sub, X, y, scale=3.0).value
        np.testing.assert_allclose(l3, 3 * (l1 + kl.value) - kl.value, rtol=1e-12)

    def test_collapsed_mode_rejects_minibatch_scale(self, rng):
        X, y = toy_regression(rng, N=10)
        with pytest.raises(ValueError):
            gp_core.elbo(random_model(rng, X, 3), np.arange(3), X, y, scale=2.0)


class TestPredict:
    def test_prior_reversion(self, rng):
        X, y = toy_regression(rng, N=10)
        model = random_model(rng, X, 4)
        mean, var = predict(model, np.arange(4), None, np.array([[1e3]]))
        assert abs(mean[0]) < 1e-6
        np.testing.assert_allclose(var[0], model.kernel.variance, atol=1e-6)

    def test_interpolation(self, rng):
        Z = np.array([[-1.0], [0.0], [1.5]])
        model = SvgpModel.init(Z, mode="uncollapsed")
        u0 = np.array([0.3, -0.7, 1.1])
        mean, var = predict(model, np.arange(3), (u0, 1e-10 * np.eye(3)), Z)
        np.testing.assert_allclose(mean, u0, atol=1e-6)
        assert np.all(var < 1e-6)

    def test_exact_gp_predictive_oracle(self, rng):
        # well-separated inputs keep K_ZZ factorisable without jitter
        X = np.linspace(-10, 10, 20)[:, None] + 0.1 * rng.standard_normal((20, 1))
        y = np.sin(X[:, 0]) + 0.1 * rng.standard_normal(20)
        model = SvgpModel.init(X, noise=0.1)
        sub = np.arange(20)
        q = collapsed_q_u(model, sub, X, y)
        Xt = np.linspace(-11, 11, 7)[:, None]
        k = model.kernel
        Kinv = gauss_jordan_inverse(gram(k, X).value + 0.1 * np.eye(20))
        Ks = gram(k, Xt, X).value
        ref_mean = Ks @ Kinv @ y
        ref_var = 1.0 - np.sum(Ks @ Kinv * Ks, axis=1)
        mean, var = predict(model, sub, q, Xt)
        np.testing.assert_allclose(mean, ref_mean, atol=1e-6)
        np.testing.assert_allclose(var, ref_var, atol=1e-6)

    def test_variance_non_negative(self, rng):
        X, y = toy_regression(rng, N=10)
        model = random_model(rng, X, 5)
        _, var = predict(model, np.arange(5), None, rng.uniform(-4, 4, size=(50, 1)))
        assert np.all(var >= 0)


class TestSubsetting:
    def test_restrict_keeps_marginal_block(self, rng):
        X, _ = toy_regression(rng, N=10)
        model = random_model(rng, X, 5, "uncollapsed")
        sub = np.array([0, 2, 3])
        small = model.restrict(sub)
        np.testing.assert_allclose(small.q_cov, model.q_cov[np.ix_(sub, sub)], atol=1e-12)
        np.testing.assert_array_equal(small.q_mu, model.q_mu[sub])

    def test_subset_bound_equals_restricted_model_bound(self, rng):
        X, y = toy_regression(rng, N=10)
        model = random_model(rng, X, 5, "uncollapsed")
        sub = np.array([1, 4])
        np.testing.assert_allclose(uncollapsed_elbo(model, sub, X, y).value,
                                   uncollapsed_elbo(model.restrict(sub), np.arange(2), X, y).value,
                                   atol=1e-10)

    def test_bad_indices(self, rng):
        X, y = toy_regression(rng, N=10)
        model = random_model(rng, X, 3)
        with pytest.raises(IndexError):
            collapsed_elbo(model, [5], X, y)
        with pytest.raises(ValueError):
            collapsed_elbo(model, [1, 1], X, y)


BOUNDS = {
    "exact": lambda m, s, X, y: exact_lml(m.kernel, m.log_noise, X, y),
    "collapsed": collapsed_elbo,
    "uncollapsed": uncollapsed_elbo,
}


class TestGradients:
    @pytest.mark.parametrize("name", sorted(BOUNDS))
    def test_finite_differences(self, name):
        rng = np.random.default_rng(7)
        for _ in range(3):
            X, y = toy_regression(rng, N=10)
            model = random_model(rng, X, 4, "uncollapsed")
            sub = np.array([0, 1, 3])
            names = list(gp_core.PARAM_NAMES)
            f = lambda p: BOUNDS[name](model.with_params(p), sub, X, y)
            assert ad.check_gradients(f, {n: model.params()[n] for n in names}) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(3, 15), st.integers(1, 6))
def test_bound_ordering(seed, N, K):
    rng = np.random.default_rng(seed)
    X, y = toy_regression(rng, N=N)
    K = min(K, N)
    model = random_model(rng, X, K, "uncollapsed")
    sub = np.sort(rng.choice(K, size=rng.integers(0, K + 1), replace=False))
    u = uncollapsed_elbo(model, sub, X, y).value
    c = collapsed_elbo(model, sub, X, y).value
    e = exact_lml(model.kernel, model.log_noise, X, y).value
    assert u <= c + 1e-8
    assert c <= e + 1e-8


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_subset_monotonicity(seed):
    rng = np.random.default_rng(seed)
    X, y = toy_regression(rng, N=12)
    model = random_model(rng, X, 6)
    order = rng.permutation(6)
    values = [collapsed_elbo(model, np.sort(order[:M]), X, y).value for M in range(7)]
    assert np.all(np.diff(values) >= -1e-9)
