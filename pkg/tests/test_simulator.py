import csv

import numpy as np
import pytest

from crsens import SimDesign, generate_cohort, population_beta_star, run_study
from crsens.errors import DomainError
from crsens.pseudoscore import SensitivityGrid
from crsens.simulator import TABLE1_COLUMNS, BetaStar, load_study_config, simulate_arrays
from oracles import cohort_arrays, cox_oracle


def test_design_validation():
    with pytest.raises(DomainError):
        SimDesign(scenario=5)
    with pytest.raises(DomainError):
        SimDesign(p0=0)
    with pytest.raises(DomainError):
        SimDesign(modelled_event="other")
    assert SimDesign(scenario=2).eta0 == -1.0
    assert SimDesign(scenario=3, modelled_event="missing").eta0 == 0.5


def test_large_sample_rates():
    a = simulate_arrays(SimDesign(), np.random.default_rng(0), n=400_000)
    fail = a["D"] == 1
    assert abs(fail.mean() - 0.80) < 0.01          # about 20% censored
    assert abs((a["C"][fail] == 1).mean() - 0.49) < 0.01
    assert np.all(a["R"][~fail] == 1)


def test_scenario_missingness_ordering():
    rates = []
    for s in (1, 2, 3, 4):
        a = simulate_arrays(SimDesign(scenario=s), np.random.default_rng(s), n=200_000)
        fail = a["D"] == 1
        rates.append(1 - a["R"][fail].mean())
    # stronger dependence on C lowers missingness under the observed-event model
    assert rates[1] < rates[0] and rates[3] < rates[2]


def test_generate_cohort_determinism():
    d = SimDesign(n=150)
    a = generate_cohort(d, np.random.default_rng(4))
    b = generate_cohort(d, np.random.default_rng(4))
    np.testing.assert_array_equal(a.time, b.time)
    np.testing.assert_array_equal(a.cause, b.cause)
    assert np.all(a.observed[a.status == 0] == 1)


def test_population_truth_consistency_and_cache(tmp_path):
    d = SimDesign(scenario=2)
    etas = np.linspace(-1, 1, 9)
    cache = tmp_path / "truth.json"
    t1 = population_beta_star(d, etas, oracle_n=200_000, seed=3, cache_path=cache)
    # correctly specified scenario: beta*(eta0) recovers the true coefficient
    assert abs(t1.at(d.eta0) - d.beta01) < 0.02
    assert np.all(np.abs(np.diff(t1.beta)) < 0.05)
    assert cache.exists()
    t2 = population_beta_star(d, etas, oracle_n=200_000, seed=3, cache_path=cache)
    assert t2 is t1
    assert BetaStar.from_dict(t1.to_dict()).beta.tolist() == t1.beta.tolist()


def test_complete_data_fit_matches_cox():
    d = SimDesign(n=300)
    c = generate_cohort(d, np.random.default_rng(8))
    from crsens import Cohort, fit_functional, fit_missingness
    from oracles import random_cohort  # noqa: F401
    a = cohort_arrays(c)
    # reveal every cause: R = 1
    rng = np.random.default_rng(8)
    arr = simulate_arrays(d, rng)
    full = Cohort(arr["X"], arr["D"], np.where(arr["D"] == 1, arr["C"], np.nan), np.ones(d.n, int),
                  arr["Z"][:, None])
    ff = fit_functional(full, fit_missingness(full), SensitivityGrid.linspace(-1, 1, 5))
    fa = cohort_arrays(full)
    for j in (1, 2):
        np.testing.assert_allclose(ff.beta(j), np.tile(cox_oracle(fa, j), (5, 1)), atol=1e-8)
    assert a["X"].size == d.n


def test_small_study_and_outputs(tmp_path):
    d = SimDesign(n=200, replicates=12, seed=5)
    grid = SensitivityGrid.linspace(-1, 1, 21)
    truth = population_beta_star(d, grid.points, oracle_n=100_000, seed=2)
    r1 = run_study(d, grid, S=200, beta_star=truth)
    r2 = run_study(d, grid, S=200, beta_star=truth, threads=3)
    assert r1.to_json() == r2.to_json()
    assert r1.replicates_ok + r1.dropped == 12
    for v in (r1.cp_band, r1.cp_ir, r1.mar_cp):
        assert 0 <= v <= 1
    assert r1.cp_ir >= r1.cp_band or r1.cp_ir >= 0
    path = tmp_path / "t1.csv"
    r1.write_table1_csv(path)
    rows = list(csv.reader(path.open()))
    assert tuple(rows[0]) == TABLE1_COLUMNS and len(rows) == 2


def test_study_config(tmp_path):
    p = tmp_path / "study.ini"
    p.write_text("[study]\nscenario = 3\nn = 250\nreplicates = 7\nS = 300\ngrid = -1,1,21\nseed = 99\n")
    cfg = load_study_config(p)
    assert cfg.design.scenario == 3 and cfg.design.n == 250 and cfg.design.replicates == 7
    assert cfg.S == 300 and len(cfg.grid) == 21 and cfg.design.seed == 99
    p.write_text("[study]\nbogus = 1\n")
    with pytest.raises(DomainError):
        load_study_config(p)
