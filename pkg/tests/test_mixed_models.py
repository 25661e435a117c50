import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize
from scipy.linalg import block_diag

import curemark.mixed_models as mm
from curemark.data_model import CovariateSlice
from curemark.mixed_models import (
    BoundaryError,
    BoundaryFitWarning,
    MixedModelFit,
    MixedModelSpec,
    fit_glmm_pql,
    fit_lmm,
    predict_random_effects,
    reml_criterion,
)


def make_slice(group, time, y):
    group = np.asarray(group)
    m = int(group.max()) + 1
    order = np.lexsort((time, group))
    return CovariateSlice(np.array([f"s{i}" for i in range(m)]), group[order],
                          np.asarray(time, float)[order], np.asarray(y, float)[order])


def simulate_lmm(rng, m, n_per, gamma=(0.5, -0.3), D=((1.0, 0.0), (0.0, 0.7)), sigma2=1.0, t_max=3.0):
    group = np.repeat(np.arange(m), n_per)
    t = np.tile(np.linspace(0, t_max, n_per), m)
    b = rng.multivariate_normal(np.zeros(2), np.asarray(D), size=m)
    y = gamma[0] + gamma[1] * t + b[group, 0] + b[group, 1] * t + rng.normal(0, np.sqrt(sigma2), len(t))
    return make_slice(group, t, y)


# -- independent dense oracles ---------------------------------------------------


def dense_reml(data, D, s2):
    """-2 REML log-likelihood from the full marginal covariance matrix."""
    W = np.column_stack([np.ones_like(data.time), data.time])
    blocks = []
    for i in range(data.n_subjects):
        Vi = W[data.group == i]
        blocks.append(Vi @ D @ Vi.T + s2 * np.eye(len(Vi)))
    Vm = block_diag(*blocks)
    Vinv = np.linalg.inv(Vm)
    XtVX = W.T @ Vinv @ W
    beta = np.linalg.solve(XtVX, W.T @ Vinv @ data.y)
    r = data.y - W @ beta
    n, p = W.shape
    return (n - p) * np.log(2 * np.pi) + np.linalg.slogdet(Vm)[1] + np.linalg.slogdet(XtVX)[1] + r @ Vinv @ r


def grid_reml_oracle(data):
    """Coarse grid over (sd0, sd1, corr, sigma) followed by Nelder-Mead refinement."""

    def unpack(th):
        s0, s1, s = np.exp(th[0]), np.exp(th[1]), np.exp(th[3])
        rho = np.tanh(th[2])
        D = np.array([[s0**2, rho * s0 * s1], [rho * s0 * s1, s1**2]])
        return D, s**2

    def f(th):
        return dense_reml(data, *unpack(th))

    axes = [np.linspace(-2.5, 1.5, 9), np.linspace(-2.5, 1.5, 9), np.linspace(-1.5, 1.5, 7), np.linspace(-2, 1.5, 8)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 4)
    best = mesh[np.argmin([f(th) for th in mesh])]
    res = optimize.minimize(f, best, method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-13, "maxiter": 40000, "maxfev": 40000})
    D, s2 = unpack(res.x)
    return D, s2, res.fun


def closed_form_blup(data, gamma, D, s2):
    """Direct per-subject evaluation of D V'(V D V' + s2 I)^-1 (y - W gamma)."""
    out = []
    for i in range(data.n_subjects):
        t = data.time[data.group == i]
        V = np.column_stack([np.ones_like(t), t])[:, : D.shape[0]]
        W = np.column_stack([np.ones_like(t), t])
        r = data.y[data.group == i] - W @ gamma
        out.append(D @ V.T @ np.linalg.solve(V @ D @ V.T + s2 * np.eye(len(t)), r))
    return np.array(out)


def joint_density_mode(data, gamma, D, s2):
    """Maximize log p(y, b) over all subjects' b by numerical optimization."""
    m, q = data.n_subjects, D.shape[0]
    Dinv = np.linalg.inv(D)
    W = np.column_stack([np.ones_like(data.time), data.time])

    def negll(bflat):
        b = bflat.reshape(m, q)
        r = data.y - W @ gamma - np.einsum("ij,ij->i", W[:, :q], b[data.group])
        return 0.5 * (r @ r / s2 + np.einsum("ka,ab,kb->", b, Dinv, b))

    res = optimize.minimize(negll, np.zeros(m * q), method="BFGS", options={"gtol": 1e-12})
    return res.x.reshape(m, q)


# -- fit_lmm ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def five_subject_fixture():
    # seed chosen so the REML optimum is interior (both eigenvalues of D well above zero)
    rng = np.random.default_rng(2)
    return simulate_lmm(rng, m=5, n_per=4, D=((1.0, 0.3), (0.3, 0.7)))


def test_reml_matches_grid_search_oracle(five_subject_fixture):
    data = five_subject_fixture
    fit = fit_lmm(data)
    D_o, s2_o, crit_o = grid_reml_oracle(data)
    assert not fit.boundary
    scale = np.abs(D_o).max()
    np.testing.assert_allclose(fit.sigma_b, D_o, rtol=1e-3, atol=1e-3 * scale)
    assert fit.sigma_eps_sq == pytest.approx(s2_o, rel=1e-3)
    assert fit.reml_criterion == pytest.approx(crit_o, rel=1e-3)
    # the sufficient-statistic criterion is the dense one, constants included
    assert reml_criterion(data, fit.spec, fit.sigma_b, fit.sigma_eps_sq) == pytest.approx(
        dense_reml(data, fit.sigma_b, fit.sigma_eps_sq), rel=1e-10)


def test_criterion_reproduced_on_reevaluation(five_subject_fixture):
    fit = fit_lmm(five_subject_fixture)
    again = reml_criterion(five_subject_fixture, fit.spec, fit.sigma_b, fit.sigma_eps_sq)
    assert abs(again - fit.reml_criterion) <= 1e-10 * max(1.0, abs(again))


def test_reml_trace_is_nonincreasing():
    rng = np.random.default_rng(3)
    data = simulate_lmm(rng, 40, 6)
    fit = fit_lmm(data)
    tr = np.asarray(fit.trace)
    assert np.all(np.diff(tr) <= 1e-9 * np.abs(tr[:-1]))
    # from a poor start the optimizer takes many steps, none of them uphill
    W, V = MixedModelSpec().design(data)
    st = mm._stats(W, V, data.y, data.group, data.n_subjects)
    res = mm._fit_reml(st, 2, theta0=np.array([20.0, 5.0, 0.01, 2.0]))
    tr = np.asarray(res["trace"])
    assert len(tr) > 5
    assert np.all(np.diff(tr) <= 1e-9 * np.abs(tr[:-1]))
    assert res["crit"] == pytest.approx(fit.reml_criterion, abs=1e-6)


def test_noiseless_identical_lines():
    t = np.tile(np.linspace(0, 3, 4), 5)
    data = make_slice(np.repeat(np.arange(5), 4), t, 2 + 1 * t)
    with pytest.warns(BoundaryFitWarning):
        fit = fit_lmm(data)
    np.testing.assert_allclose(fit.gamma, [2, 1], atol=1e-6)
    assert fit.sigma_eps_sq == pytest.approx(0, abs=1e-6)
    np.testing.assert_allclose(fit.sigma_b, 0, atol=1e-6)
    assert fit.boundary


def test_singular_fixed_design():
    data = make_slice(np.repeat(np.arange(4), 3), np.zeros(12), np.arange(12.0))
    with pytest.raises(np.linalg.LinAlgError):
        fit_lmm(data)


def test_json_roundtrip(five_subject_fixture):
    fit = fit_lmm(five_subject_fixture)
    back = MixedModelFit.from_dict(fit.to_dict())
    np.testing.assert_allclose(back.sigma_b, fit.sigma_b, rtol=1e-14, atol=1e-15)
    np.testing.assert_array_equal(back.gamma, fit.gamma)
    assert back.spec == fit.spec


@pytest.mark.slow
def test_variance_components_monte_carlo_recovery():
    """REML estimates average to the generating (1, 0.7, 1) within the MC 95% interval."""
    rng = np.random.default_rng(2024)
    est = []
    for _ in range(200):
        fit = fit_lmm(simulate_lmm(rng, 1000, 10))
        est.append([fit.sigma_b[0, 0], fit.sigma_b[1, 1], fit.sigma_eps_sq])
    est = np.asarray(est)
    mean, se = est.mean(0), est.std(0, ddof=1) / np.sqrt(len(est))
    assert np.all(np.abs(mean - [1.0, 0.7, 1.0]) <= 1.96 * se + 1e-12), (mean, se)


# -- predict_random_effects --------------------------------------------------------


def _fit_with(spec, gamma, D, s2):
    D = np.atleast_2d(np.asarray(D, dtype=float))
    L = np.linalg.cholesky(D) if np.any(D) else np.zeros_like(D)
    return MixedModelFit(spec, np.asarray(gamma, float), D, float(s2), L)


def test_blup_hand_case_single_observation():
    spec = MixedModelSpec(fixed_degree=0, random_degree=0)
    data = make_slice([0], [1.0], [2.0])
    b = predict_random_effects(_fit_with(spec, [0.0], [[1.0]], 1.0), data)
    assert b[0, 0] == pytest.approx(1.0, abs=1e-14)


def test_blup_zero_residual_and_zero_covariance(five_subject_fixture):
    data = five_subject_fixture
    spec = MixedModelSpec()
    exact = make_slice(data.group, data.time, 0.5 - 0.3 * data.time)
    b = predict_random_effects(_fit_with(spec, [0.5, -0.3], np.eye(2), 1.0), exact)
    np.testing.assert_allclose(b, 0, atol=1e-14)
    b = predict_random_effects(_fit_with(spec, [0.5, -0.3], np.zeros((2, 2)), 1.0), data)
    np.testing.assert_array_equal(b, 0)


def test_blup_singular_marginal_covariance_flags():
    spec = MixedModelSpec()
    data = make_slice([0, 0], [0.0, 1.0], [1.0, 2.0])
    with pytest.warns(BoundaryFitWarning):
        b = predict_random_effects(_fit_with(spec, [0.0, 0.0], np.zeros((2, 2)), 0.0), data)
    np.testing.assert_array_equal(b, 0)


def test_blup_matches_closed_form_and_joint_density_mode():
    rng = np.random.default_rng(5)
    data = simulate_lmm(rng, 2, 5)
    fit = fit_lmm(simulate_lmm(rng, 50, 5))
    b = predict_random_effects(fit, data)
    np.testing.assert_allclose(b, closed_form_blup(data, fit.gamma, fit.sigma_b, fit.sigma_eps_sq), atol=1e-10)
    np.testing.assert_allclose(b, joint_density_mode(data, fit.gamma, fit.sigma_b, fit.sigma_eps_sq), atol=1e-6)


def test_blup_estimating_equation_identity():
    rng = np.random.default_rng(8)
    data = simulate_lmm(rng, 60, 6)
    fit = fit_lmm(data)
    b = predict_random_effects(fit, data)
    # GLS normal equations on V ⊆ W imply the BLUPs sum to zero
    assert np.abs(b.sum(axis=0)).max() <= 1e-8 * max(1.0, np.abs(b).sum())


def test_blup_for_new_subjects_uses_training_parameters():
    rng = np.random.default_rng(9)
    fit = fit_lmm(simulate_lmm(rng, 50, 5))
    new = simulate_lmm(rng, 3, 4)
    np.testing.assert_allclose(predict_random_effects(fit, new),
                               closed_form_blup(new, fit.gamma, fit.sigma_b, fit.sigma_eps_sq), atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(
    sb2=st.floats(0.01, 5.0),
    s2=st.floats(0.01, 5.0),
    counts=st.lists(st.integers(1, 6), min_size=2, max_size=6),
    seed=st.integers(0, 10_000),
)
def test_shrinkage_random_intercept(sb2, s2, counts, seed):
    rng = np.random.default_rng(seed)
    group = np.repeat(np.arange(len(counts)), counts)
    t = rng.uniform(0, 3, len(group))
    y = rng.normal(0, 2, len(group))
    data = make_slice(group, t, y)
    spec = MixedModelSpec(fixed_degree=1, random_degree=0)
    gamma = np.array([0.3, -0.1])
    b = predict_random_effects(_fit_with(spec, gamma, [[sb2]], s2), data)[:, 0]
    resid = data.y - gamma[0] - gamma[1] * data.time
    mean_r = np.bincount(data.group, resid) / np.bincount(data.group)
    assert np.all(np.abs(b) <= np.abs(mean_r) + 1e-12)


# -- PQL ------------------------------------------------------------------------


def test_pql_identity_delegates(five_subject_fixture):
    a = fit_lmm(five_subject_fixture)
    b = fit_glmm_pql(five_subject_fixture, MixedModelSpec())
    np.testing.assert_allclose(b.gamma, a.gamma, rtol=0, atol=1e-12)
    np.testing.assert_allclose(b.sigma_b, a.sigma_b, rtol=0, atol=1e-12)
    assert b.sigma_eps_sq == pytest.approx(a.sigma_eps_sq, abs=1e-12)


def test_pql_all_zero_binary_is_boundary():
    data = make_slice(np.repeat(np.arange(5), 4), np.tile(np.arange(4.0), 5), np.zeros(20))
    with pytest.raises(BoundaryError):
        fit_glmm_pql(data, MixedModelSpec(link="logit"))


def test_pql_domain_checks():
    data = make_slice(np.repeat(np.arange(5), 4), np.tile(np.arange(4.0), 5), np.full(20, 2.0))
    with pytest.raises(ValueError):
        fit_glmm_pql(data, MixedModelSpec(link="logit"))
    with pytest.raises(ValueError):
        fit_glmm_pql(make_slice(data.group, data.time, -data.y), MixedModelSpec(link="log"))


def simulate_poisson(rng, m, n_per=8, gamma=(1.0, 0.2), D=((0.09, 0.0), (0.0, 0.01))):
    group = np.repeat(np.arange(m), n_per)
    t = np.tile(np.linspace(0, 3, n_per), m)
    b = rng.multivariate_normal(np.zeros(2), np.asarray(D), size=m)
    eta = gamma[0] + gamma[1] * t + b[group, 0] + b[group, 1] * t
    return make_slice(group, t, rng.poisson(np.exp(eta)))


def test_pql_logit_runs_and_recovers_sign():
    rng = np.random.default_rng(1)
    m, n_per = 200, 8
    group = np.repeat(np.arange(m), n_per)
    t = np.tile(np.linspace(0, 3, n_per), m)
    b0 = rng.normal(0, 0.7, m)
    y = rng.random(len(t)) < 1 / (1 + np.exp(-(-0.5 + 0.6 * t + b0[group])))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BoundaryFitWarning)
        fit = fit_glmm_pql(make_slice(group, t, y.astype(float)), MixedModelSpec(link="logit", random_degree=0))
    assert fit.gamma[1] > 0.3 and fit.gamma[0] < 0
    assert fit.pql_cycles >= 2


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason=(
    "PQL drops the log-determinant term of the Laplace approximation, which shifts the log-link "
    "intercept by about +0.012 here; 200 replicates resolve that shift (Gauss-Hermite ML on the "
    "same data is unbiased)"))
def test_pql_poisson_monte_carlo_recovery():
    """Fixed effects of a log-link GLMM average to the truth within the MC 95% interval."""
    rng = np.random.default_rng(77)
    est = []
    for _ in range(200):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BoundaryFitWarning)
            fit = fit_glmm_pql(simulate_poisson(rng, 500), MixedModelSpec(link="log", dispersion="fixed"))
        est.append(fit.gamma)
    est = np.asarray(est)
    mean, se = est.mean(0), est.std(0, ddof=1) / np.sqrt(len(est))
    assert np.all(np.abs(mean - [1.0, 0.2]) <= 1.96 * se), (mean, se)


@pytest.mark.parametrize("noise_sd", [1e-2, 1e-4, 1e-7])
def test_small_residual_variance_is_resolved(noise_sd):
    rng = np.random.default_rng(1589)
    m, t = 25, np.linspace(0, 3, 6)
    b = rng.normal(0, 1, (m, 2)) * [1.0, 0.8]
    y = b[:, :1] + b[:, 1:] * t + noise_sd * rng.standard_normal((m, len(t)))
    data = make_slice(np.repeat(np.arange(m), len(t)), np.tile(t, m), y.ravel())
    fit = fit_lmm(data)
    assert 0.3 < fit.sigma_eps_sq / noise_sd**2 < 3.0
    # the optimum is at least as good as the generating covariance with the true noise
    at_truth = reml_criterion(data, MixedModelSpec(), np.cov(b.T), noise_sd**2)
    assert fit.reml_criterion <= at_truth + 1e-6 * abs(at_truth)
    assert np.isfinite(predict_random_effects(fit, data)).all()
