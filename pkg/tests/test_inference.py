import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crsens import (InfluenceArray, SensitivityGrid, assemble_influence, band, bootstrap_sup_stats,
                    fit_functional, fit_missingness, naive_robustness_interval, robustness_interval)
from crsens.errors import DomainError
from crsens.inference import (STATUS_EMPTY, STATUS_MAXIMAL, STATUS_ROOT, _LevelProfile, _f, format_interval,
                              order_stat_rank)
from crsens.simulator import SimDesign, generate_cohort
from oracles import random_cohort


def pipeline(c, grid, cause=1):
    mf = fit_missingness(c)
    ff = fit_functional(c, mf, grid)
    return ff, assemble_influence(c, ff, mf, cause)


def zero_influence(ff, cause=1):
    n, p = 50, ff.beta(cause).shape[1]
    return InfluenceArray(np.zeros((n, len(ff.grid), p)), cause, ff.grid.points)


@pytest.fixture(scope="module")
def sim_fit():
    c = generate_cohort(SimDesign(n=300, scenario=1), np.random.default_rng(3))
    grid = SensitivityGrid.linspace(-2, 2, 21)
    ff, infl = pipeline(c, grid)
    return c, grid, ff, infl


def test_order_statistic_rank():
    assert order_stat_rank(1000, 0.05) == 950
    assert order_stat_rank(999, 0.05) == 950
    assert order_stat_rank(10, 0.5) == 5


def test_zero_influence_gives_zero_stats(sim_fit):
    _, _, ff, _ = sim_fit
    d = bootstrap_sup_stats(zero_influence(ff), [1.0], S=200, seed=1)
    assert np.all(d.abs_stats == 0) and np.all(d.sup_stats == 0)


def test_bit_identical_and_thread_independent(sim_fit):
    _, _, _, infl = sim_fit
    a = bootstrap_sup_stats(infl, [1.0], S=1000, seed=42, threads=1)
    b = bootstrap_sup_stats(infl, [1.0], S=1000, seed=42, threads=4)
    c = bootstrap_sup_stats(infl, [1.0], S=1000, seed=42)
    assert a.abs_stats.tobytes() == b.abs_stats.tobytes() == c.abs_stats.tobytes()
    assert not np.array_equal(a.abs_stats, bootstrap_sup_stats(infl, [1.0], S=1000, seed=43).abs_stats)


def test_conditional_gaussian_variance():
    rng = np.random.default_rng(0)
    psi = rng.standard_normal((400, 1, 1)) * rng.uniform(0.5, 2, (400, 1, 1))
    infl = InfluenceArray(psi, 1, np.array([0.0]))
    d = bootstrap_sup_stats(infl, [1.0], S=1000, seed=9)
    want = np.mean(psi[:, 0, 0] ** 2)
    assert abs(np.mean(d.abs_stats[:, 0] ** 2) / want - 1) < 0.10


def test_prefix_maxima_match_direct_sups(sim_fit):
    _, grid, _, infl = sim_fit
    d = bootstrap_sup_stats(infl, [1.0], S=300, seed=5)
    for l, e in enumerate(d.levels):
        np.testing.assert_array_equal(d.prefix_max[:, l], d.sup_over(-e, e))


def test_band_invariants(sim_fit):
    _, grid, ff, infl = sim_fit
    d = bootstrap_sup_stats(infl, [1.0], S=1000, seed=11)
    b = band(ff, d, [1.0], 0.05)
    assert np.all(b.lower <= b.estimate) and np.all(b.estimate <= b.upper)
    assert b.ir_ci[0] <= b.id_region[0] <= b.id_region[1] <= b.ir_ci[1]
    assert b.c_hat == np.sort(d.sup_over(-2, 2))[949]
    np.testing.assert_allclose(b.upper - b.estimate, b.c_hat / math.sqrt(c_n(infl)))
    narrow = band(ff, d, [1.0], 0.05, sub_range=(-0.5, 0.5))
    assert narrow.c_hat <= b.c_hat and len(narrow.eta) == 5
    with pytest.raises(DomainError):
        band(ff, d, [1.0], 0.05, sub_range=(0.5, -0.5))
    with pytest.raises(DomainError):
        band(ff, d, [1.0], 0.05, sub_range=(0.01, 0.02))
    with pytest.raises(DomainError):
        band(ff, d, [2.0], 0.05)


def c_n(infl):
    return infl.n_units


def test_band_csv(sim_fit, tmp_path):
    _, _, ff, infl = sim_fit
    b = band(ff, bootstrap_sup_stats(infl, [1.0], S=200, seed=1), [1.0])
    b.write_csv(tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "eta,estimate,lower,upper" and len(lines) == 22
    json.dumps(b.to_dict())


def test_clustered_band_uses_cluster_count():
    c = random_cohort(3, n=120, clusters=30)
    grid = SensitivityGrid.linspace(-1, 1, 5)
    ff, infl = pipeline(c, grid)
    d = bootstrap_sup_stats(infl, [1.0], S=200, seed=2)
    b = band(ff, d, [1.0])
    assert d.n_units == c.n_units
    np.testing.assert_allclose(b.upper - b.estimate, b.c_hat / math.sqrt(c.n_units))


# ------------------------------------------------------------ monotonicity
@given(st.integers(0, 10 ** 6))
def test_monotone_in_range(seed):
    c = random_cohort(seed, n=70, p=2, miss=0.45)
    grid = SensitivityGrid.linspace(-3, 3, 13)
    ff, infl = pipeline(c, grid)
    K = [1.0, 0.5]
    d = bootstrap_sup_stats(infl, K, S=200, seed=seed)
    cv = d.level_critical_values(0.05)
    assert np.all(np.diff(cv) >= 0)
    prev = None
    for e in d.levels:
        b = band(ff, d, K, 0.05, sub_range=(-e, e))
        assert b.c_hat == pytest.approx(cv[list(d.levels).index(e)], abs=0)
        if prev is not None:
            assert prev.id_region[0] >= b.id_region[0] and prev.id_region[1] <= b.id_region[1]
            assert prev.ir_ci[0] >= b.ir_ci[0] and prev.ir_ci[1] <= b.ir_ci[1]
        prev = b
    r = robustness_interval(ff, infl, K, eta_max=3.0, S=200, seed=seed, draws=d)
    pos = r.f_values > 0
    assert np.count_nonzero(pos[1:] != pos[:-1]) <= 1
    if pos.any() and pos[0]:
        assert np.all(np.diff(pos.astype(int)) <= 0)
    assert (r.status == STATUS_EMPTY) == (not pos[0])
    nt = -1.0 if r.naive_eta_tilde is None else r.naive_eta_tilde
    t = -1.0 if r.eta_tilde is None else r.eta_tilde
    assert nt <= t


# ------------------------------------------------------------ robustness
def test_empty_when_not_significant_at_mar():
    d = SimDesign(n=200, scenario=1, beta01=0.0)
    grid = SensitivityGrid.linspace(-5, 5, 21)
    for seed in range(20):
        c = generate_cohort(d, np.random.default_rng(seed))
        ff, infl = pipeline(c, grid)
        r = robustness_interval(ff, infl, [1.0], seed=seed, S=500)
        if r.f_values[0] <= 0:
            break
    assert r.status == STATUS_EMPTY
    assert r.interval_log_odds is None and r.naive_interval is None
    assert format_interval(r.interval_odds_ratio) == "empty"


def test_maximal_prints_full_range():
    c = random_cohort(4, n=400, all_observed=True)
    ff, infl = pipeline(c, SensitivityGrid.linspace(-5, 5, 11))
    r = robustness_interval(ff, infl, [1.0], eta_max=5.0, seed=1)
    assert r.status == STATUS_MAXIMAL and r.eta_tilde == 5.0
    assert format_interval(r.interval_odds_ratio) == "[0.01, 148.41]"
    assert r.naive_status == STATUS_MAXIMAL


def test_zero_influence_naive_equals_proposed_equals_maximal(sim_fit):
    c = random_cohort(5, n=200)
    grid = SensitivityGrid.linspace(-5, 5, 11)
    mf = fit_missingness(c)
    ff = fit_functional(c, mf, grid)
    infl = zero_influence(ff)
    lo = ff.beta(1)[:, 0]
    assert np.all(lo > 0) or np.all(lo < 0)
    r = robustness_interval(ff, infl, [1.0], seed=0, S=200)
    assert r.status == r.naive_status == STATUS_MAXIMAL
    assert naive_robustness_interval(ff, infl, [1.0], S=200) == (-5.0, 5.0)


def test_grid_requirements(sim_fit):
    _, _, ff, infl = sim_fit
    with pytest.raises(DomainError):
        robustness_interval(ff, infl, [1.0], eta_max=5.0, S=200)
    c = random_cohort(6, n=80)
    g = SensitivityGrid([-1.0, 0.0, 0.5, 2.0])
    ff2, infl2 = pipeline(c, g)
    with pytest.raises(DomainError):
        robustness_interval(ff2, infl2, [1.0], eta_max=2.0, S=200)


def dense_scan(c, eta_max, M_fine, seed, S):
    grid = SensitivityGrid.linspace(-eta_max, eta_max, M_fine)
    ff, infl = pipeline(c, grid)
    d = bootstrap_sup_stats(infl, [1.0], S=S, seed=seed)
    prof = _LevelProfile(grid.points, ff.beta(1)[:, 0], d.levels)
    f = _f(prof.inf, prof.sup, d.level_critical_values(0.05), math.sqrt(d.n_units), 1e-8)
    pos = np.flatnonzero(f <= 0)
    return float(d.levels[pos[0] - 1]) if pos.size else eta_max


@pytest.mark.parametrize("beta01, seed", [(0.3, 0), (0.4, 1), (0.5, 0)])
def test_root_matches_dense_scan(beta01, seed):
    c = generate_cohort(SimDesign(n=400, scenario=2, beta01=beta01), np.random.default_rng(seed))
    coarse = SensitivityGrid.linspace(-5, 5, 51)
    ff, infl = pipeline(c, coarse)
    r = robustness_interval(ff, infl, [1.0], seed=7, S=1000)
    assert r.status == STATUS_ROOT
    oracle = dense_scan(c, 5.0, 501, seed=7, S=1000)
    assert abs(r.eta_tilde - oracle) <= 0.2 + 1e-9
    assert r.naive_eta_tilde <= r.eta_tilde
    lo, hi = r.interval_odds_ratio
    assert lo == pytest.approx(math.exp(-r.eta_tilde)) and hi == pytest.approx(math.exp(r.eta_tilde))
    json.dumps(r.to_dict())
