import logging
import math

import numpy as np
import pytest
from scipy import stats

from bsfp.data import MultiOmicDataset, OutcomeSpec, NO_OUTCOME
from bsfp.gibbs import (DecompositionState, NumericalError, PriorSpec, cond_indiv_loadings,
                        cond_indiv_scores, cond_joint_loadings, cond_joint_scores,
                        cond_latent_probit, cond_noise_var, cond_regression,
                        default_iterations, gibbs_sweep, impute_entries, impute_outcome,
                        log_joint, make_rng, mvn_rows, regression_posterior, run_sampler,
                        truncated_normal)
from bsfp.unifac import PenaltySpec, unifac_decompose

N_DRAWS = 50_000
PRIOR = PriorSpec(0.5, [0.8, 1.3], alpha0_sq=4.0, alpha_sq=2.0, a=1.5, b=2.0)


def assert_moments(draws, mean, cov, k=3.0):
    """Empirical mean/covariance within k Monte-Carlo standard errors."""
    draws = np.asarray(draws)
    m = len(draws)
    mean = np.broadcast_to(mean, draws.shape)
    d = draws - mean
    emp_mean = d.mean(axis=0)
    se = np.sqrt(np.diag(cov) / m)
    assert np.all(np.abs(emp_mean) < k * se), (emp_mean, se)
    emp_cov = d.T @ d / m
    se_cov = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov ** 2) / m)
    assert np.all(np.abs(emp_cov - cov) < k * se_cov), (emp_cov, cov)


def _instance(kind="continuous", seed=0):
    """3 samples, two sources of 2 features, r = 2, r_s = 1."""
    rng = np.random.default_rng(seed)
    n, dims = 3, [2, 2]
    st = DecompositionState(
        rng.normal(size=(n, 2)), [rng.normal(size=(p, 2)) for p in dims],
        [rng.normal(size=(n, 1)) for _ in dims], [rng.normal(size=(p, 1)) for p in dims],
        [rng.normal(size=(p, n)) for p in dims])
    if kind != "none":
        st.beta = rng.normal(size=5)
        st.y = rng.normal(size=n)
        if kind == "continuous":
            st.tau_sq = 0.7
        else:
            st.y = (st.y > 0).astype(float)
            st.z = np.where(st.y > 0, 1, -1) * np.abs(rng.normal(size=n))
    return st


def _resp(st):
    # working response and noise variance for the outcome rows of the oracle
    if st.beta is None:
        return None, None
    return (st.z, 1.0) if st.z is not None else (st.y, st.tau_sq)


def _oracle_V(st, prior):
    """Per-row (mean, cov) written out sample by sample."""
    r = st.V.shape[1]
    y, t2 = _resp(st)
    out = []
    for i in range(st.V.shape[0]):
        P = np.eye(r) / prior.lambda_inv_joint
        b = np.zeros(r)
        for s in range(len(st.X)):
            P += st.U[s].T @ st.U[s]
            b += st.U[s].T @ (st.X[s][:, i] - st.W[s] @ st.Vs[s][i])
        if y is not None:
            bj = st.beta[1:1 + r]
            rest = y[i] - st.beta[0] - st.Vs[0][i] @ st.beta[3:4] - st.Vs[1][i] @ st.beta[4:5]
            P += np.outer(bj, bj) / t2
            b += bj * rest / t2
        C = np.linalg.inv(P)
        out.append((C @ b, C))
    return out


def _draw(n_draws, fn, reset, grab, seed=1):
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n_draws):
        reset()
        fn(rng)
        rows.append(grab())
    return np.array(rows)


@pytest.mark.parametrize("kind", ["none", "continuous", "binary"])
def test_joint_scores_moments(kind):
    st = _instance(kind)
    orc = _oracle_V(st, PRIOR)
    draws = _draw(N_DRAWS, lambda g: cond_joint_scores(st, PRIOR, g), lambda: None,
                  lambda: st.V.copy())
    for i, (m, C) in enumerate(orc):
        assert_moments(draws[:, i], m, C)


def test_joint_loadings_moments():
    st = _instance("none")
    V = st.V
    P = V.T @ V + np.eye(2) / PRIOR.lambda_inv_joint
    C = np.linalg.inv(P)
    draws = _draw(N_DRAWS, lambda g: cond_joint_loadings(st, PRIOR, g), lambda: None,
                  lambda: np.vstack(st.U).copy())
    for s in range(2):
        for j in range(2):
            resid = st.X[s][j] - st.W[s][j] @ st.Vs[s].T
            assert_moments(draws[:, 2 * s + j], C @ (V.T @ resid), C)


@pytest.mark.parametrize("kind", ["none", "continuous", "binary"])
def test_indiv_scores_moments(kind):
    st = _instance(kind)
    base = [v.copy() for v in st.Vs]
    y, t2 = _resp(st)

    def reset():
        st.Vs = [v.copy() for v in base]

    draws = _draw(N_DRAWS, lambda g: cond_indiv_scores(st, PRIOR, g), reset,
                  lambda: np.hstack(st.Vs).copy())
    for s in range(2):
        W = st.W[s]
        lam = 1.0 / PRIOR.lambda_inv_indiv[s]
        bs = st.beta[3 + s] if y is not None else 0.0
        P = W.T @ W + lam + (bs * bs / t2 if y is not None else 0.0)
        C = np.linalg.inv(P)
        other = 1 - s
        for i in range(3):
            lin = W.T @ (st.X[s][:, i] - st.U[s] @ st.V[i])
            if y is None:
                mean = (C @ lin)[None, :]
            else:
                # source 1 sees the freshly drawn source-0 scores
                vo = np.full(N_DRAWS, base[1][i, 0]) if s == 0 else _vs_draws(draws, 0, i)
                rest = y[i] - st.beta[0] - st.V[i] @ st.beta[1:3] - vo * st.beta[3 + other]
                mean = (C @ (lin[:, None] + bs * rest[None, :] / t2)).T
            assert_moments(_vs_draws(draws, s, i)[:, None], mean, C)


def _vs_draws(draws, s, i):
    # draws[t] is hstack(Vs) of shape (n, q) with r_s = 1
    return draws[:, i, s]


def test_indiv_loadings_moments():
    st = _instance("none")
    draws = _draw(N_DRAWS, lambda g: cond_indiv_loadings(st, PRIOR, g), lambda: None,
                  lambda: np.vstack(st.W).copy())
    for s in range(2):
        Vs = st.Vs[s]
        C = np.linalg.inv(Vs.T @ Vs + np.eye(1) / PRIOR.lambda_inv_indiv[s])
        for j in range(2):
            resid = st.X[s][j] - st.U[s][j] @ st.V.T
            assert_moments(draws[:, 2 * s + j], C @ (Vs.T @ resid), C)


@pytest.mark.parametrize("kind", ["continuous", "binary"])
def test_regression_moments(kind):
    st = _instance(kind)
    D = np.hstack([np.ones((3, 1)), st.V, *st.Vs])
    y, t2 = _resp(st)
    Sig = np.diag([4.0, 2, 2, 2, 2])
    C = np.linalg.inv(D.T @ D / t2 + np.linalg.inv(Sig))
    draws = _draw(N_DRAWS, lambda g: cond_regression(st, PRIOR, g), lambda: None,
                  lambda: st.beta.copy())
    assert_moments(draws, C @ D.T @ y / t2, C)


def test_noise_var_moments():
    st = _instance("continuous")
    resid = st.y - st.design() @ st.beta
    shape, scale = PRIOR.a + 1.5, PRIOR.b + 0.5 * resid @ resid
    draws = _draw(N_DRAWS, lambda g: cond_noise_var(st, PRIOR, g), lambda: None,
                  lambda: st.tau_sq)
    mean = scale / (shape - 1)
    var = scale ** 2 / ((shape - 1) ** 2 * (shape - 2))
    assert abs(draws.mean() - mean) < 3 * math.sqrt(var / N_DRAWS)
    # distributional check against the inverse-gamma law itself
    assert stats.kstest(draws, stats.invgamma(shape, scale=scale).cdf).pvalue > 0.001


def test_latent_probit_moments():
    st = _instance("binary")
    y = st.y.copy()
    y[2] = np.nan
    out = OutcomeSpec("binary", y)
    mu = st.design() @ st.beta
    draws = _draw(N_DRAWS, lambda g: cond_latent_probit(st, out, g), lambda: None,
                  lambda: st.z.copy())
    for i in range(3):
        if np.isnan(y[i]):
            lo, hi = -np.inf, np.inf
        elif y[i] == 1:
            lo, hi = -mu[i], np.inf
        else:
            lo, hi = -np.inf, -mu[i]
        d = stats.truncnorm(lo, hi, loc=mu[i])
        assert_moments(draws[:, i:i + 1], d.mean(), np.array([[d.var()]]))
        if y[i] == 1:
            assert np.all(draws[:, i] > 0)
        elif y[i] == 0:
            assert np.all(draws[:, i] < 0)


def test_truncated_normal_examples():
    rng = np.random.default_rng(3)
    assert np.all(truncated_normal(rng, np.zeros(10_000), np.ones(10_000, bool)) > 0)
    far = truncated_normal(rng, np.full(10_000, 10.0), np.ones(10_000, bool))
    assert abs(far.mean() - 10) < 0.05
    neg = truncated_normal(rng, np.full(10_000, -10.0), np.zeros(10_000, bool))
    assert np.all(neg < 0) and abs(neg.mean() + 10) < 0.05


@pytest.mark.parametrize("mean", [-8.0, -30.0])
def test_truncated_normal_deep_tail(mean):
    # constraint against the mean: draws pile up just above 0 with the tail law
    rng = np.random.default_rng(4)
    z = truncated_normal(rng, np.full(20_000, mean), np.ones(20_000, bool))
    assert np.all(z > 0) and np.all(np.isfinite(z))
    d = stats.truncnorm(-mean, np.inf, loc=mean)
    assert abs(z.mean() - d.mean()) < 4 * d.std() / math.sqrt(len(z))


def test_scalar_closed_forms():
    rng = np.random.default_rng(0)
    prior = PriorSpec(1.0, [1.0])
    st = DecompositionState(np.zeros((1, 1)), [np.ones((1, 1))], [np.zeros((1, 0))],
                            [np.zeros((1, 0))], [np.array([[2.0]])])
    draws = np.array([cond_joint_scores(st, prior, rng).V[0, 0] for _ in range(N_DRAWS)])
    assert_moments(draws[:, None], 1.0, np.array([[0.5]]))
    # orthonormal V with residual row equal to its first column
    V = np.linalg.qr(np.random.default_rng(1).normal(size=(4, 2)))[0]
    lam = 3.0
    st = DecompositionState(V, [np.zeros((1, 2))], [np.zeros((4, 0))], [np.zeros((1, 0))],
                            [V[:, :1].T.copy()])
    prior = PriorSpec(1 / lam, [1.0])
    P, lin = V.T @ V + lam * np.eye(2), V.T @ V[:, 0]
    np.testing.assert_allclose(np.linalg.solve(P, lin), [1 / (1 + lam), 0], atol=1e-12)
    draws = np.array([cond_joint_loadings(st, prior, rng).U[0][0] for _ in range(N_DRAWS)])
    assert_moments(draws, [1 / (1 + lam), 0], np.eye(2) / (1 + lam))


def test_prior_recovery_when_loadings_zero():
    rng = np.random.default_rng(5)
    st = DecompositionState(np.zeros((4, 2)), [np.zeros((3, 2))], [np.zeros((4, 1))],
                            [np.zeros((3, 1))], [np.ones((3, 4))])
    prior = PriorSpec(0.25, [2.0])
    v = np.array([cond_joint_scores(st, prior, rng).V.copy() for _ in range(20_000)])
    assert_moments(v.reshape(-1, 2), 0.0, 0.25 * np.eye(2))
    vs = np.array([cond_indiv_scores(st, prior, rng).Vs[0].copy() for _ in range(20_000)])
    assert_moments(vs.reshape(-1, 1), 0.0, np.array([[2.0]]))
    st.V[:] = 0
    u = np.array([cond_joint_loadings(st, prior, rng).U[0].copy() for _ in range(20_000)])
    assert_moments(u.reshape(-1, 2), 0.0, 0.25 * np.eye(2))


def test_regression_matches_textbook_posterior():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(5, 3))
    y = rng.normal(size=5)
    s2, pv = 0.6, np.array([9.0, 1.5, 0.7])
    # textbook form: Sigma_post = (X'X/s2 + S0^-1)^-1, mu = Sigma_post X'y / s2
    S0inv = np.diag(1 / pv)
    cov = np.linalg.inv(X.T @ X / s2 + S0inv)
    mu = cov @ X.T @ y / s2
    P, mean = regression_posterior(X, y, s2, pv)
    np.testing.assert_allclose(mean, mu, rtol=0, atol=1e-10)
    np.testing.assert_allclose(np.linalg.inv(P), cov, rtol=0, atol=1e-10)


class _ZeroNoise:
    def standard_normal(self, size):
        return np.zeros(size)


def test_cond_regression_mean_is_closed_form():
    st = _instance("continuous", seed=9)
    D = st.design()
    pv = PRIOR.beta_var(st.ranks)
    mu = np.linalg.solve(D.T @ D / st.tau_sq + np.diag(1 / pv), D.T @ st.y / st.tau_sq)
    cond_regression(st, PRIOR, _ZeroNoise())
    np.testing.assert_allclose(st.beta, mu, rtol=0, atol=1e-10)


def test_regression_examples():
    st = DecompositionState(np.zeros((1, 0)), [np.zeros((1, 0))], [np.zeros((1, 0))],
                            [np.zeros((1, 0))], [np.zeros((1, 1))], beta=np.zeros(1),
                            tau_sq=1.0, y=np.array([2.0]))
    cond_regression(st, PriorSpec(1.0, [1.0]), _ZeroNoise())
    assert st.beta[0] == pytest.approx(2 / (1 + 1e-6), abs=1e-12)
    st.y = np.array([0.0])
    cond_regression(st, PriorSpec(1.0, [1.0]), _ZeroNoise())
    assert st.beta[0] == 0.0


def test_noise_var_examples():
    st = DecompositionState(np.zeros((2, 0)), [np.zeros((1, 0))], [np.zeros((2, 0))],
                            [np.zeros((1, 0))], [np.zeros((1, 2))], beta=np.zeros(1),
                            tau_sq=1.0, y=np.array([1.0, -1.0]))
    prior = PriorSpec(1.0, [1.0], a=1.0, b=1.0)

    class Rec:
        def gamma(self, shape):
            self.shape = shape
            return 1.0
    rec = Rec()
    cond_noise_var(st, prior, rec)
    assert rec.shape == 2.0 and st.tau_sq == 2.0     # IG(2, 2)
    st.y = np.zeros(2)
    cond_noise_var(st, prior, rec)
    assert rec.shape == 2.0 and st.tau_sq == 1.0     # IG(a + n/2, b)


def test_impute_entries_examples():
    rng = np.random.default_rng(0)
    x = np.zeros((2, 3))
    mask = np.zeros((2, 3), bool)
    mask[0, 1] = True
    st = DecompositionState(np.zeros((3, 0)), [np.zeros((2, 0))], [np.zeros((3, 1))],
                            [np.zeros((2, 1))], [x.copy()])
    draws = np.array([impute_entries(st, [mask], rng).X[0][0, 1] for _ in range(10_000)])
    assert 0.97 <= draws.std() <= 1.03
    st.W[0][0, 0], st.Vs[0][1, 0] = 1.5, 2.0
    draws = np.array([impute_entries(st, [mask], rng).X[0][0, 1] for _ in range(10_000)])
    assert abs(draws.mean() - 3) < 0.04
    assert np.all(st.X[0][~mask] == 0)
    before = st.X[0].copy()
    impute_entries(st, [np.zeros((2, 3), bool)], rng)
    np.testing.assert_array_equal(st.X[0], before)


def test_impute_outcome_examples():
    rng = np.random.default_rng(1)
    y = np.array([1.0, np.nan, 0.0])
    st = DecompositionState(np.zeros((3, 0)), [np.zeros((1, 0))], [np.zeros((3, 0))],
                            [np.zeros((1, 0))], [np.zeros((1, 3))], beta=np.array([5.0]),
                            tau_sq=1e-8, y=np.where(np.isnan(y), 0, y))
    out = OutcomeSpec("continuous", y)
    vals = [impute_outcome(st, out, rng).y.copy() for _ in range(1000)]
    np.testing.assert_allclose(np.array(vals)[:, 1], 5.0, atol=1e-3)
    assert all(v[0] == 1 and v[2] == 0 for v in vals)
    full = OutcomeSpec("continuous", np.array([1.0, 2.0, 3.0]))
    st.y = np.array([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(impute_outcome(st, full, rng).y, [1, 2, 3])
    # binary with zero linear predictor: half the imputations are 1
    st.beta, st.tau_sq = np.array([0.0]), None
    bout = OutcomeSpec("binary", y)
    hits = []
    for _ in range(10_000):
        cond_latent_probit(st, bout, rng)
        hits.append(impute_outcome(st, bout, rng).y[1])
    assert abs(np.mean(hits) - 0.5) < 0.02


def _slow_log_joint(st, prior, outcome):
    norm = stats.norm.logpdf
    tot = 0.0
    for s, x in enumerate(st.X):
        for j in range(x.shape[0]):
            for i in range(x.shape[1]):
                fit = st.U[s][j] @ st.V[i] + st.W[s][j] @ st.Vs[s][i]
                tot += norm(x[j, i], fit, 1.0)
        tot += sum(norm(u, 0, math.sqrt(prior.lambda_inv_joint)) for u in st.U[s].ravel())
        sd = math.sqrt(prior.lambda_inv_indiv[s])
        tot += sum(norm(w, 0, sd) for w in st.W[s].ravel())
        tot += sum(norm(v, 0, sd) for v in st.Vs[s].ravel())
    tot += sum(norm(v, 0, math.sqrt(prior.lambda_inv_joint)) for v in st.V.ravel())
    if outcome.present:
        pv = [prior.alpha0_sq] + [prior.alpha_sq] * (len(st.beta) - 1)
        tot += sum(norm(b, 0, math.sqrt(v)) for b, v in zip(st.beta, pv))
        D = np.column_stack([np.ones(len(st.V)), st.V, *st.Vs])
        for i in range(len(st.V)):
            mu = D[i] @ st.beta
            if outcome.kind == "binary":
                tot += norm(st.z[i], mu, 1.0)
            else:
                tot += norm(st.y[i], mu, math.sqrt(st.tau_sq))
        if outcome.kind == "continuous":
            tot += stats.invgamma.logpdf(st.tau_sq, prior.a, scale=prior.b)
    return tot


@pytest.mark.parametrize("kind", ["none", "continuous", "binary"])
def test_log_joint_matches_direct_summation(kind):
    st = _instance(kind, seed=4)
    out = NO_OUTCOME if kind == "none" else OutcomeSpec(kind, st.y)
    assert log_joint(st, PRIOR, out) == pytest.approx(_slow_log_joint(st, PRIOR, out),
                                                      rel=0, abs=1e-9)


def test_log_joint_zero_state_and_outlier():
    prior = PriorSpec(0.5, [2.0])
    st = DecompositionState(np.zeros((3, 1)), [np.zeros((2, 1))], [np.zeros((3, 1))],
                            [np.zeros((2, 1))], [np.zeros((2, 3))])
    c = -0.5 * math.log(2 * math.pi)
    expect = (6 * c                                            # data
              + 5 * (c - 0.5 * math.log(0.5))                  # U and V
              + 5 * (c - 0.5 * math.log(2.0)))                 # W and V_s
    assert log_joint(st, prior) == pytest.approx(expect, abs=1e-12)
    st.X[0][1, 2] = 50.0
    assert log_joint(st, prior) < expect


def test_mvn_rows_guards(caplog):
    rng = np.random.default_rng(0)
    with pytest.raises(NumericalError):
        mvn_rows(rng, np.array([[np.nan]]), np.zeros((1, 1)))
    assert mvn_rows(rng, np.zeros((0, 0)), np.zeros((4, 0))).shape == (4, 0)
    with caplog.at_level(logging.WARNING):
        out = mvn_rows(rng, np.array([[1.0, 1.0], [1.0, 1.0]]), np.zeros((2, 2)))
    assert np.all(np.isfinite(out)) and "jitter" in caplog.text
    with pytest.raises(NumericalError):
        mvn_rows(rng, -np.eye(2), np.zeros((1, 2)))


def _small_data(seed=0, missing=0.0):
    rng = np.random.default_rng(seed)
    V = rng.normal(size=(12, 1))
    X = [3 * rng.normal(size=(p, 1)) @ V.T + rng.normal(size=(p, 12)) for p in (8, 6)]
    if missing:
        X[0][rng.random(X[0].shape) < missing] = np.nan
    ds = MultiOmicDataset(X)
    pen = PenaltySpec(3.0, [2.5, 2.5])
    return ds, unifac_decompose(ds, pen), PriorSpec.from_penalties(pen)


def test_run_sampler_reproducible_and_finite():
    ds, mode, prior = _small_data(missing=0.1)
    y = np.random.default_rng(1).normal(size=12)
    y[3] = np.nan
    out = OutcomeSpec("continuous", y)
    a = run_sampler(ds, mode, prior, out, iters=60, burn_in=20, seed=7)
    b = run_sampler(ds, mode, prior, out, iters=60, burn_in=20, seed=7)
    for name in ("V", "beta", "tau_sq", "imputed_y", "log_joint"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert np.array_equal(a.imputed_X[0], b.imputed_X[0])
    assert np.all(np.isfinite(a.log_joint))
    assert len(a) == 60 and list(a.kept) == list(range(20, 60))
    assert a.imputed_X[0].shape == (60, int(ds.masks[0].sum()))
    c = run_sampler(ds, mode, prior, out, iters=60, burn_in=20, seed=8)
    assert not np.array_equal(a.V, c.V)


def test_sweep_preserves_observed_and_shapes():
    ds, mode, prior = _small_data(missing=0.2)
    from bsfp.gibbs import initial_state
    y = np.random.default_rng(2).integers(0, 2, 12).astype(float)
    y[0] = np.nan
    out = OutcomeSpec("binary", y)
    rng = make_rng(0)
    st = initial_state(mode, ds, prior, out, rng)
    shapes = [st.V.shape, st.U[0].shape, st.W[1].shape, st.beta.shape]
    obs = ~ds.masks[0]
    for _ in range(20):
        gibbs_sweep(st, ds, prior, out, rng)
        assert [st.V.shape, st.U[0].shape, st.W[1].shape, st.beta.shape] == shapes
        np.testing.assert_array_equal(st.X[0][obs], ds.sources[0][obs])
        np.testing.assert_array_equal(st.y[1:], y[1:])
        assert np.all((st.z[1:] > 0) == (y[1:] == 1))


def test_rank_zero_with_outcome_warns(caplog):
    ds = MultiOmicDataset([np.random.default_rng(0).normal(size=(3, 5))])
    pen = PenaltySpec(100.0, [100.0])
    mode = unifac_decompose(ds, pen)
    out = OutcomeSpec("continuous", np.arange(5.0))
    with caplog.at_level(logging.WARNING):
        ch = run_sampler(ds, mode, PriorSpec.from_penalties(pen), out, iters=5, burn_in=1)
    assert "intercept-only" in caplog.text
    assert ch.beta.shape == (5, 1)


def test_sampler_argument_checks():
    ds, mode, prior = _small_data()
    with pytest.raises(ValueError):
        run_sampler(ds, mode, prior, iters=10, burn_in=10)
    with pytest.raises(ValueError):
        PriorSpec(0.0, [1.0])
    assert default_iterations(ds) == (2000, 1000)
    ds2, _, _ = _small_data(missing=0.1)
    assert default_iterations(ds2) == (10000, 5000)
