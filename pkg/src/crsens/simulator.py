"""Simulation harness: Weibull competing risks with MNAR missing causes.

Both cause-specific hazards share the time factor p0 lambda0^p0 t^(p0-1), so
the total failure time has cumulative hazard lambda0^p0 t^p0 (e^{b1 Z} + e^{b2 Z})
and the cause is drawn independently of T given Z.
"""

from __future__ import annotations

import configparser
import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .cohort import Cohort
from .errors import ConvergenceError, DomainError, SingularMatrixError, StudyError
from .inference import band, bootstrap_sup_stats
from .influence import assemble_influence
from .missingness import fit_missingness
from .pseudoscore import FunctionalFit, SensitivityGrid, solve_beta

logger = logging.getLogger(__name__)

BIAS_ETAS = (-1.0, -0.5, 0.0, 0.5, 1.0)
TABLE1_COLUMNS = ("Scenario", "n", "Bias(-1)", "Bias(-0.5)", "Bias(0)", "Bias(0.5)", "Bias(1)",
                  "MAD", "CP_Band", "CP_IR", "MAR_Bias", "MAR_CP")
MAR_CI_LABEL = "Wald interval at eta=0 with influence-function (sandwich) standard error"

# scenario -> (coefficient on I(C=2), includes -X + Z)
SCENARIOS = {1: (0.5, False), 2: (1.0, False), 3: (0.5, True), 4: (1.0, True)}
MODELLED_EVENTS = ("observed", "missing")


@dataclass(frozen=True)
class SimDesign:
    """Simulation design.

    ``modelled_event`` chooses which event the scenario's logit describes:
    "observed" models P(R=1 | ...), "missing" models P(R=0 | ...).
    """

    n: int = 400
    p0: float = 1.5
    lambda0: float = 1.5
    beta01: float = 0.5
    beta02: float = -1.0
    censor_rate: float = 0.7
    scenario: int = 1
    replicates: int = 1000
    seed: int = 20240101
    modelled_event: str = "observed"

    def __post_init__(self):
        if self.p0 <= 0 or self.lambda0 <= 0:
            raise DomainError("Weibull shape and scale must be positive")
        if self.censor_rate <= 0:
            raise DomainError("censoring rate must be positive")
        if self.scenario not in SCENARIOS:
            raise DomainError(f"scenario must be one of 1-4, got {self.scenario}")
        if self.n < 2 or self.replicates < 1:
            raise DomainError("n must be >= 2 and replicates >= 1")
        if self.modelled_event not in MODELLED_EVENTS:
            raise DomainError(f"modelled_event must be one of {MODELLED_EVENTS}")

    @property
    def eta0(self) -> float:
        """Offset of the true pattern-mixture model in scenarios 1 and 2."""
        c = SCENARIOS[self.scenario][0]
        return -c if self.modelled_event == "observed" else c


def _missingness_linpred(design: SimDesign, X, Z, C):
    coef, with_xz = SCENARIOS[design.scenario]
    lin = 0.3 + coef * (C == 2)
    if with_xz:
        lin = lin - X + Z
    return lin


def simulate_arrays(design: SimDesign, rng: np.random.Generator, n: Optional[int] = None) -> dict:
    n = design.n if n is None else n
    Z = rng.standard_normal(n)
    e1 = np.exp(design.beta01 * Z)
    e2 = np.exp(design.beta02 * Z)
    E = rng.standard_exponential(n)
    T = (E / (design.lambda0 ** design.p0 * (e1 + e2))) ** (1.0 / design.p0)
    C = np.where(rng.random(n) < e2 / (e1 + e2), 2, 1)
    U = rng.exponential(1.0 / design.censor_rate, n)
    X = np.minimum(T, U)
    D = (T <= U).astype(np.int8)
    p_lin = expit(_missingness_linpred(design, X, Z, C))
    p_obs = p_lin if design.modelled_event == "observed" else 1.0 - p_lin
    R = np.where(D == 1, rng.random(n) < p_obs, True).astype(np.int8)
    return {"X": X, "D": D, "C": C, "R": R, "Z": Z}


def generate_cohort(design: SimDesign, rng: np.random.Generator, n: Optional[int] = None) -> Cohort:
    """One simulated cohort; censored subjects always have their status observed."""
    a = simulate_arrays(design, rng, n)
    cause = np.where((a["D"] == 1) & (a["R"] == 1), a["C"], np.nan)
    return Cohort(a["X"], a["D"], cause, a["R"], a["Z"][:, None], covariate_names=("z1",))


# ------------------------------------------------------------ population truth
@dataclass(frozen=True)
class BetaStar:
    eta: np.ndarray
    beta: np.ndarray
    oracle_n: int
    seed: int
    gamma0: np.ndarray

    def at(self, eta) -> np.ndarray:
        return np.interp(eta, self.eta, self.beta)

    def to_dict(self) -> dict:
        return {"eta": [float(x) for x in self.eta], "beta": [float(x) for x in self.beta],
                "oracle_n": int(self.oracle_n), "seed": int(self.seed),
                "gamma0": [float(x) for x in self.gamma0]}

    @classmethod
    def from_dict(cls, d) -> "BetaStar":
        return cls(np.asarray(d["eta"], float), np.asarray(d["beta"], float), int(d["oracle_n"]),
                   int(d["seed"]), np.asarray(d["gamma0"], float))


_BETA_STAR_CACHE: Dict[tuple, BetaStar] = {}


def _truth_key(design: SimDesign, eta, oracle_n, seed):
    d = asdict(design)
    for k in ("n", "replicates", "seed"):
        d.pop(k)
    return tuple(sorted(d.items())), tuple(float(x) for x in eta), int(oracle_n), int(seed)


def population_beta_star(design: SimDesign, eta_values: Sequence[float], oracle_n: int = 10 ** 6,
                         seed: int = 1, cache_path=None) -> BetaStar:
    """beta*_1(eta) from one very large cohort, with gamma_0 fitted on its complete cases.

    Results are memoised in-process and, when ``cache_path`` is given, in a
    JSON file keyed by design, eta values, ``oracle_n`` and ``seed``.
    """
    if oracle_n < 10 ** 5:
        raise DomainError("oracle_n must be at least 1e5")
    eta = np.unique(np.asarray(eta_values, dtype=float))
    key = _truth_key(design, eta, oracle_n, seed)
    if key in _BETA_STAR_CACHE:
        return _BETA_STAR_CACHE[key]
    skey = json.dumps([list(map(list, key[0])), key[1], key[2], key[3]])
    store = {}
    if cache_path is not None:
        try:
            with open(cache_path) as fh:
                store = json.load(fh)
        except (OSError, ValueError):
            store = {}
        if skey in store:
            res = BetaStar.from_dict(store[skey])
            _BETA_STAR_CACHE[key] = res
            return res
    cohort = generate_cohort(design, np.random.default_rng(seed), n=oracle_n)
    fit = fit_missingness(cohort)
    sl = solve_beta(cohort, fit, SensitivityGrid(eta), cause=1, store_baseline=False)
    if not sl.converged.all():
        raise ConvergenceError("population oracle failed to converge")
    res = BetaStar(eta=eta, beta=sl.beta[:, 0].copy(), oracle_n=int(oracle_n), seed=int(seed),
                   gamma0=fit.gamma_hat.copy())
    _BETA_STAR_CACHE[key] = res
    if cache_path is not None:
        store[skey] = res.to_dict()
        with open(cache_path, "w") as fh:
            json.dump(store, fh, indent=1, sort_keys=True)
    return res


# ----------------------------------------------------------------- the study
@dataclass(frozen=True)
class ReplicateResult:
    beta_at: np.ndarray         # beta_hat_1 at BIAS_ETAS
    min_abs_dev: float
    band_covers: bool
    ir_covers: bool
    mar_estimate: float
    mar_se: float
    mar_covers: bool


def _min_abs_dev(pts, curve, target):
    """inf over the grid range of |piecewise-linear curve - target|."""
    d = curve - target
    if np.any(d == 0) or np.any(np.sign(d[1:]) != np.sign(d[:-1])):
        return 0.0
    return float(np.min(np.abs(d)))


def run_replicate(design: SimDesign, grid: SensitivityGrid, truth: BetaStar, S: int, alpha: float,
                  seed_seq: np.random.SeedSequence) -> ReplicateResult:
    data_ss, boot_ss = seed_seq.spawn(2)
    cohort = generate_cohort(design, np.random.default_rng(data_ss))
    mfit = fit_missingness(cohort)
    sl = solve_beta(cohort, mfit, grid, cause=1, store_baseline=False)
    if not sl.converged.all():
        raise ConvergenceError("pseudo-score solve failed at some grid points")
    funfit = FunctionalFit(grid=grid, slices={1: sl}, gamma_fit=mfit, covariate_names=cohort.covariate_names)
    infl = assemble_influence(cohort, funfit, mfit, cause=1, strict=True)
    boot_seed = int(boot_ss.generate_state(1, np.uint64)[0] >> np.uint64(1))
    draws = bootstrap_sup_stats(infl, [1.0], S=S, seed=boot_seed)
    br = band(funfit, draws, [1.0], alpha)
    pts = grid.points
    curve = sl.beta[:, 0]
    star = truth.at(pts)
    band_ok = bool(np.all((br.lower <= star) & (star <= br.upper)))
    ir_ok = bool(br.ir_ci[0] <= star.min() and star.max() <= br.ir_ci[1])
    k0 = grid.index_of(0.0)
    se0 = float(infl.standard_errors()[k0, 0])
    b0 = float(curve[k0])
    z = norm.ppf(1 - alpha / 2)
    return ReplicateResult(
        beta_at=np.interp(BIAS_ETAS, pts, curve),
        min_abs_dev=_min_abs_dev(pts, curve, design.beta01),
        band_covers=band_ok, ir_covers=ir_ok, mar_estimate=b0, mar_se=se0,
        mar_covers=bool(abs(b0 - design.beta01) <= z * se0),
    )


@dataclass(frozen=True)
class SimReport:
    design: SimDesign
    replicates_ok: int
    dropped: int
    pointwise_bias: np.ndarray
    mad: float
    cp_band: float
    cp_ir: float
    mar_bias: float
    mar_cp: float
    monte_carlo_se: dict
    beta_star: BetaStar
    S: int
    alpha: float
    grid: tuple
    mar_ci: str = field(default=MAR_CI_LABEL)

    def table1_row(self) -> list:
        return [self.design.scenario, self.design.n, *map(float, self.pointwise_bias), self.mad,
                self.cp_band, self.cp_ir, self.mar_bias, self.mar_cp]

    def to_dict(self) -> dict:
        return {
            "design": asdict(self.design),
            "replicates_ok": self.replicates_ok,
            "dropped": self.dropped,
            "bias_etas": list(BIAS_ETAS),
            "pointwise_bias": [float(x) for x in self.pointwise_bias],
            "mad": self.mad,
            "cp_band": self.cp_band,
            "cp_ir": self.cp_ir,
            "mar_bias": self.mar_bias,
            "mar_cp": self.mar_cp,
            "monte_carlo_se": self.monte_carlo_se,
            "beta_star": self.beta_star.to_dict(),
            "S": self.S,
            "alpha": self.alpha,
            "grid": list(self.grid),
            "mar_ci": self.mar_ci,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write_table1_csv(self, path, digits: int = 3) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TABLE1_COLUMNS)
            row = self.table1_row()
            w.writerow(row[:2] + [f"{x:.{digits}f}" for x in row[2:]])


def _se_mean(x):
    x = np.asarray(x, dtype=float)
    return float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else float("nan")


def _se_prop(p, m):
    return float(math.sqrt(p * (1 - p) / m)) if m > 0 else float("nan")


def run_study(design: SimDesign, grid: Optional[SensitivityGrid] = None, S: int = 1000, alpha: float = 0.05,
              beta_star: Optional[BetaStar] = None, threads: int = 1, oracle_n: int = 10 ** 6,
              oracle_seed: int = 1, max_drop: float = 0.02) -> SimReport:
    """Run ``design.replicates`` replicates and aggregate the Table-1 metrics.

    Replicate r draws from child r of ``SeedSequence(design.seed)``, so the
    report does not depend on ``threads``.  Replicates whose fits fail are
    dropped; more than ``max_drop`` of them raises StudyError.
    """
    grid = grid or SensitivityGrid.linspace(-1.0, 1.0, 41)
    if grid.a > min(BIAS_ETAS) or grid.b < max(BIAS_ETAS) or not np.any(grid.points == 0.0):
        raise DomainError("study grid must cover [-1, 1] and contain 0")
    truth = beta_star or population_beta_star(design, grid.points, oracle_n, oracle_seed)
    children = np.random.SeedSequence(design.seed).spawn(design.replicates)

    def one(r):
        try:
            return run_replicate(design, grid, truth, S, alpha, children[r])
        except (ConvergenceError, SingularMatrixError, DomainError) as exc:
            logger.info("replicate %d dropped: %s", r, exc)
            return None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(one, range(design.replicates)))
    else:
        results = [one(r) for r in range(design.replicates)]
    ok = [r for r in results if r is not None]
    dropped = len(results) - len(ok)
    if dropped > max_drop * design.replicates:
        raise StudyError(f"{dropped} of {design.replicates} replicates failed")
    if not ok:
        raise StudyError("no replicate succeeded")
    m = len(ok)
    B = np.array([r.beta_at for r in ok])
    dev = B - truth.at(np.array(BIAS_ETAS))
    mad = np.array([r.min_abs_dev for r in ok])
    band_c = np.mean([r.band_covers for r in ok])
    ir_c = np.mean([r.ir_covers for r in ok])
    mar_dev = np.array([r.mar_estimate for r in ok]) - design.beta01
    mar_c = np.mean([r.mar_covers for r in ok])
    se = {
        "pointwise_bias": [_se_mean(dev[:, k]) for k in range(dev.shape[1])],
        "mad": _se_mean(mad),
        "cp_band": _se_prop(band_c, m),
        "cp_ir": _se_prop(ir_c, m),
        "mar_bias": _se_mean(mar_dev),
        "mar_cp": _se_prop(mar_c, m),
    }
    return SimReport(
        design=design, replicates_ok=m, dropped=dropped, pointwise_bias=dev.mean(axis=0),
        mad=float(mad.mean()), cp_band=float(band_c), cp_ir=float(ir_c), mar_bias=float(mar_dev.mean()),
        mar_cp=float(mar_c), monte_carlo_se=se, beta_star=truth, S=S, alpha=alpha,
        grid=tuple(float(x) for x in grid.points),
    )


# ------------------------------------------------------------ study configs
@dataclass(frozen=True)
class StudyConfig:
    design: SimDesign
    grid: SensitivityGrid
    S: int = 1000
    alpha: float = 0.05
    oracle_n: int = 10 ** 6
    oracle_seed: int = 1


def parse_grid(text: str) -> SensitivityGrid:
    """'a,b,M' -> equally spaced grid."""
    parts = [p.strip() for p in str(text).split(",")]
    if len(parts) != 3:
        raise DomainError(f"grid must be 'a,b,M', got {text!r}")
    try:
        a, b, m = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise DomainError(f"grid must be 'a,b,M', got {text!r}") from None
    if not a < b:
        raise DomainError("grid bounds must satisfy a < b")
    return SensitivityGrid.linspace(a, b, m)


def load_study_config(path) -> StudyConfig:
    """Read a ``[study]`` section: scenario, n, replicates, S, grid, seed and optional extras."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise OSError(f"cannot read study config {path}")
    if "study" not in cp:
        raise DomainError("study config needs a [study] section")
    s = cp["study"]
    known = {"scenario", "n", "replicates", "s", "grid", "seed", "alpha", "oracle_n", "oracle_seed",
             "modelled_event", "p0", "lambda0", "beta01", "beta02", "censor_rate"}
    extra = set(s) - known
    if extra:
        raise DomainError(f"unknown study keys: {', '.join(sorted(extra))}")
    try:
        design = SimDesign(
            n=s.getint("n", 400), scenario=s.getint("scenario", 1), replicates=s.getint("replicates", 1000),
            seed=s.getint("seed", 20240101), modelled_event=s.get("modelled_event", "observed"),
            p0=s.getfloat("p0", 1.5), lambda0=s.getfloat("lambda0", 1.5), beta01=s.getfloat("beta01", 0.5),
            beta02=s.getfloat("beta02", -1.0), censor_rate=s.getfloat("censor_rate", 0.7),
        )
        return StudyConfig(
            design=design, grid=parse_grid(s.get("grid", "-1,1,41")), S=s.getint("s", 1000),
            alpha=s.getfloat("alpha", 0.05), oracle_n=s.getint("oracle_n", 10 ** 6),
            oracle_seed=s.getint("oracle_seed", 1),
        )
    except ValueError as exc:
        if isinstance(exc, DomainError):
            raise
        raise DomainError(f"bad study config value: {exc}") from None
