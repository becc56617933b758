import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crsens import (Cohort, SensitivityGrid, SingularMatrixError, fit_functional, fit_missingness, hessian,
                    interpolate_beta, jump_weights, log_pseudo_likelihood, pseudo_score, solve_beta)
from crsens.errors import DomainError
from crsens.pseudoscore import risk_averages
from oracles import (cohort_arrays, hessian_oracle, jump_weights_oracle, loglik_oracle, newton_oracle,
                     random_cohort, risk_pieces, score_oracle)

CASES = [(1, {}), (2, dict(p=2, q=1)), (3, dict(ties=True, p=2)), (4, dict(clusters=7)),
         (5, dict(ties=True, clusters=5))]


# ------------------------------------------------------------------ grid
def test_grid_symmetric_with_zero():
    g = SensitivityGrid.linspace(-1, 1, 41)
    assert len(g) == 41 and g.is_symmetric()
    assert g.points[20] == 0.0 and g.anchor == 20
    assert g.index_of(0.5) == 30


def test_grid_inserts_zero():
    g = SensitivityGrid.linspace(-1, 1, 4)
    assert 0.0 in g.points and len(g) == 5


def test_grid_single_point_and_errors():
    assert len(SensitivityGrid.linspace(0.3, 0.3)) == 1
    with pytest.raises(DomainError):
        SensitivityGrid.linspace(1, -1)
    with pytest.raises(DomainError):
        SensitivityGrid([0.0, 0.0])
    with pytest.raises(DomainError):
        SensitivityGrid.linspace(-1, 1, 41).index_of(0.01)


# ---------------------------------------------------------- jump weights
@pytest.mark.parametrize("seed, kw", CASES)
def test_jump_weights(seed, kw):
    c = random_cohort(seed, n=50, **kw)
    fit = fit_missingness(c)
    a = cohort_arrays(c)
    for eta in (-1.0, 0.0, 2.0):
        jw = jump_weights(c, fit, eta)
        np.testing.assert_allclose(jw.w1 + jw.w2, c.status, atol=1e-15)
        for j in (1, 2):
            np.testing.assert_allclose(jw.for_cause(j), jump_weights_oracle(a, fit.gamma_hat, eta, j), atol=1e-15)


# ------------------------------------------------------ direct summation
@pytest.mark.parametrize("seed, kw", CASES)
def test_score_hessian_loglik_direct(seed, kw):
    c = random_cohort(seed, n=45, **kw)
    fit = fit_missingness(c)
    a = cohort_arrays(c)
    rng = np.random.default_rng(seed)
    for _ in range(3):
        beta = rng.normal(0, 0.5, c.p)
        eta = rng.uniform(-2, 2)
        j = int(rng.integers(1, 3))
        w = jump_weights_oracle(a, fit.gamma_hat, eta, j)
        np.testing.assert_allclose(pseudo_score(c, fit, beta, eta, j), score_oracle(a, w, beta), atol=1e-12)
        np.testing.assert_allclose(hessian(c, fit, beta, eta, j), hessian_oracle(a, w, beta), atol=1e-12)
        assert abs(log_pseudo_likelihood(c, fit, beta, eta, j) - loglik_oracle(a, w, beta)) < 1e-12


def test_risk_averages_direct():
    c = random_cohort(6, n=30, p=2, ties=True)
    a = cohort_arrays(c)
    beta = np.array([0.3, -0.2])
    t = float(np.median(c.time))
    E, s0, S2 = risk_averages(c, beta, t)
    o0, o1, o2 = risk_pieces(a, beta, t)
    np.testing.assert_allclose(E, o1 / o0, rtol=1e-13)
    np.testing.assert_allclose(s0, o0 / c.n, rtol=1e-13)
    np.testing.assert_allclose(S2, o2 / o0, rtol=1e-13)


def test_finite_difference_gradients():
    c = random_cohort(7, n=80, p=2, q=1, ties=True)
    fit = fit_missingness(c)
    beta, eta, h = np.array([0.2, -0.4]), 0.6, 1e-6
    for j in (1, 2):
        U = pseudo_score(c, fit, beta, eta, j)
        H = hessian(c, fit, beta, eta, j)
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            dll = (log_pseudo_likelihood(c, fit, beta + e, eta, j) - log_pseudo_likelihood(c, fit, beta - e, eta, j)) / (2 * h)
            assert abs(dll - U[k]) <= 1e-6 * max(1.0, abs(U[k]))
            dU = (pseudo_score(c, fit, beta + e, eta, j) - pseudo_score(c, fit, beta - e, eta, j)) / (2 * h)
            np.testing.assert_allclose(-dU, H[:, k], rtol=1e-6, atol=1e-9)


def test_large_linear_predictors_stay_finite():
    # a common shift of Z leaves the Cox-type score unchanged but overflows exp() unless rescaled
    c = random_cohort(8, n=60)
    fit = fit_missingness(c)
    cause = np.where(c.cause > 0, c.cause, np.nan)
    shifted = Cohort(c.time, c.status, cause, c.observed, c.Z + 40.0)
    fit_s = fit_missingness(shifted)
    beta = np.array([25.0])
    for j in (1, 2):
        u0 = pseudo_score(c, fit, beta, 0.3, j)
        u1 = pseudo_score(shifted, fit_s, beta, 0.3, j)
        np.testing.assert_allclose(u1, u0, rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(hessian(shifted, fit_s, beta, 0.3, j), hessian(c, fit, beta, 0.3, j),
                                   rtol=1e-8, atol=1e-10)
        assert np.isfinite(log_pseudo_likelihood(shifted, fit_s, beta, 0.3, j))


# --------------------------------------------------------------- solving
@pytest.mark.parametrize("seed, kw", CASES)
def test_solution_matches_direct_newton(seed, kw):
    c = random_cohort(seed, n=60, **kw)
    fit = fit_missingness(c)
    grid = SensitivityGrid.linspace(-2, 2, 9)
    ff = fit_functional(c, fit, grid)
    a = cohort_arrays(c)
    for j in (1, 2):
        assert ff.converged(j).all()
        for k in (0, 4, 8):
            w = jump_weights_oracle(a, fit.gamma_hat, grid.points[k], j)
            np.testing.assert_allclose(ff.beta(j)[k], newton_oracle(a, w), atol=1e-9)


def test_complete_data_curves_are_flat():
    c = random_cohort(9, n=100, p=2, all_observed=True)
    ff = fit_functional(c, fit_missingness(c), SensitivityGrid.linspace(-1, 1, 11))
    for j in (1, 2):
        assert np.ptp(ff.beta(j), axis=0).max() < 1e-12


def test_equal_cluster_sizes_match_unclustered():
    base = random_cohort(10, n=90, p=2)
    cause = np.where(base.cause > 0, base.cause, np.nan)
    cl = Cohort(base.time, base.status, cause, base.observed, base.Z, cluster=[f"k{i // 3}" for i in range(90)])
    grid = SensitivityGrid.linspace(-1, 1, 5)
    f0, f1 = fit_missingness(base), fit_missingness(cl)
    np.testing.assert_allclose(f0.gamma_hat, f1.gamma_hat, atol=1e-12)
    a, b = fit_functional(base, f0, grid), fit_functional(cl, f1, grid)
    for j in (1, 2):
        np.testing.assert_allclose(a.beta(j), b.beta(j), atol=1e-12)


@given(st.integers(0, 5000))
def test_permutation_invariance(seed):
    c = random_cohort(seed, n=40, p=2, ties=True)
    perm = np.random.default_rng(seed).permutation(c.n)
    cause = np.where(c.cause > 0, c.cause, np.nan)
    c2 = Cohort(c.time[perm], c.status[perm], cause[perm], c.observed[perm], c.Z[perm])
    grid = SensitivityGrid.linspace(-1, 1, 3)
    a = fit_functional(c, fit_missingness(c), grid)
    b = fit_functional(c2, fit_missingness(c2), grid)
    for j in (1, 2):
        np.testing.assert_allclose(a.beta(j), b.beta(j), atol=1e-9)


def test_singular_hessian_is_reported():
    c = random_cohort(11, n=40, p=1)
    cause = np.where(c.cause > 0, c.cause, np.nan)
    const = Cohort(c.time, c.status, cause, c.observed, np.column_stack([c.Z[:, 0], np.ones(c.n)]))
    fit = fit_missingness(const, ridge_on_singular=True)
    with pytest.raises(SingularMatrixError, match="eta="):
        solve_beta(const, fit, SensitivityGrid.linspace(-1, 1, 3), 1)


def test_baseline_hazard_matches_breslow():
    c = random_cohort(12, n=50, ties=True)
    fit = fit_missingness(c)
    ff = fit_functional(c, fit, SensitivityGrid.linspace(-1, 1, 3))
    a = cohort_arrays(c)
    k, j = 2, 1
    beta = ff.beta(j)[k]
    w = jump_weights_oracle(a, fit.gamma_hat, 1.0, j)
    t = float(np.quantile(c.time, 0.6))
    direct = sum(w[i] / risk_pieces(a, beta, c.time[i])[0] for i in range(c.n) if c.time[i] <= t)
    assert abs(ff.baseline(j, k)(t) - direct) < 1e-12
    assert ff.baseline(j, k)(0.0) == 0.0


def test_interpolation_and_export():
    c = random_cohort(13, n=70, p=2)
    grid = SensitivityGrid.linspace(-1, 1, 5)
    ff = fit_functional(c, fit_missingness(c), grid)
    mid = interpolate_beta(ff, 0.25, 1)
    np.testing.assert_allclose(mid, 0.5 * (ff.beta(1)[2] + ff.beta(1)[3]))
    with pytest.raises(DomainError):
        interpolate_beta(ff, 1.5, 1)
    rows = list(ff.tidy_rows())
    assert len(rows) == 5 * 2 * 2
    assert json.loads(ff.to_json())["grid"] == [float(x) for x in grid.points]
