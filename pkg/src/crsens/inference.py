"""Wild-bootstrap bands, identification regions and robustness intervals.

Everything here works on a contrast K'beta_j(eta) along the grid.  A single
set of multiplier draws serves every symmetric sub-range [-e, e] of the grid,
so critical values for nested ranges come from the same replicates and are
monotone in e by construction.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import CRSensError, DomainError
from .influence import InfluenceArray
from .pseudoscore import FunctionalFit

CHUNK = 100
STATUS_ROOT = "root_found"
STATUS_EMPTY = "empty_nonsignificant"
STATUS_MAXIMAL = "maximal"
STEP_OUT_NOTE = ("between grid levels the critical value is held at the next outer "
                 "level and the contrast is linearly interpolated")


def _contrast_vector(K, p: int) -> np.ndarray:
    K = np.atleast_1d(np.asarray(K, dtype=float)).reshape(-1)
    if K.size != p:
        raise DomainError(f"contrast has length {K.size}, expected {p}")
    if not np.all(np.isfinite(K)) or not np.any(K != 0):
        raise DomainError("contrast must be finite and nonzero")
    return K


def _check_alpha(alpha):
    if not 0 < alpha < 1:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")


def order_stat_rank(S: int, alpha: float) -> int:
    """1-based rank ceil(S(1 - alpha)) of the critical order statistic."""
    return min(S, max(1, math.ceil(S * (1 - alpha) - 1e-9)))


@dataclass(frozen=True)
class BootstrapDraws:
    """|K' G^(s)(eta_m)| for each replicate s and grid point m, plus symmetric prefix maxima.

    ``prefix_max[:, l]`` is the replicate-wise sup over grid points with
    |eta| <= ``levels[l]``.
    """

    abs_stats: np.ndarray       # (S, M)
    prefix_max: np.ndarray      # (S, L)
    levels: np.ndarray          # (L,) ascending distinct |eta|
    grid: np.ndarray
    contrast: np.ndarray
    cause: int
    seed: int
    S: int
    n_units: int

    @property
    def sup_stats(self) -> np.ndarray:
        return self.prefix_max

    def sup_over(self, lo: float, hi: float) -> np.ndarray:
        sel = (self.grid >= lo - 1e-12) & (self.grid <= hi + 1e-12)
        if not np.any(sel):
            raise DomainError(f"sub-range [{lo}, {hi}] contains no grid points")
        return self.abs_stats[:, sel].max(axis=1)

    def critical_value(self, alpha: float, lo: Optional[float] = None, hi: Optional[float] = None) -> float:
        _check_alpha(alpha)
        lo = self.grid[0] if lo is None else lo
        hi = self.grid[-1] if hi is None else hi
        sup = np.sort(self.sup_over(lo, hi))
        return float(sup[order_stat_rank(self.S, alpha) - 1])

    def level_critical_values(self, alpha: float) -> np.ndarray:
        """c_hat at every symmetric level, one percentile pass over the prefix maxima."""
        _check_alpha(alpha)
        r = order_stat_rank(self.S, alpha) - 1
        return np.partition(self.prefix_max, r, axis=0)[r]


def _chunk_draws(ss, Kpsi, rows, n_units):
    rng = np.random.default_rng(ss)
    xi = rng.standard_normal((rows, n_units))
    return np.abs(xi @ Kpsi) / math.sqrt(n_units)


def bootstrap_sup_stats(influence: InfluenceArray, K, S: int = 1000, seed: int = 0,
                        threads: int = 1) -> BootstrapDraws:
    """Multiplier bootstrap of the contrast process.

    Replicates are generated in blocks of 100, each from its own child of
    ``SeedSequence(seed)``; the result does not depend on ``threads``.
    """
    if S < 2:
        raise DomainError("S must be at least 2")
    K = _contrast_vector(K, influence.values.shape[2])
    Kpsi = influence.contrast(K)                      # (n_units, M)
    n_u = influence.n_units
    n_chunks = -(-S // CHUNK)
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    sizes = [min(CHUNK, S - c * CHUNK) for c in range(n_chunks)]
    jobs = list(zip(children, sizes))
    if threads > 1 and n_chunks > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            blocks = list(ex.map(lambda a: _chunk_draws(a[0], Kpsi, a[1], n_u), jobs))
    else:
        blocks = [_chunk_draws(ss, Kpsi, rows, n_u) for ss, rows in jobs]
    abs_stats = np.vstack(blocks)

    grid = np.asarray(influence.grid, dtype=float)
    mag = np.abs(grid)
    levels = np.unique(mag)
    order = np.argsort(mag, kind="stable")
    running = np.maximum.accumulate(abs_stats[:, order], axis=1)
    # last sorted position with |eta| <= level
    pos = np.searchsorted(mag[order], levels, side="right") - 1
    prefix = running[:, pos]
    return BootstrapDraws(abs_stats=abs_stats, prefix_max=prefix, levels=levels, grid=grid,
                          contrast=K, cause=influence.cause, seed=int(seed), S=int(S), n_units=n_u)


@dataclass(frozen=True)
class BandResult:
    contrast: np.ndarray
    alpha: float
    c_hat: float
    eta: np.ndarray
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    id_region: tuple
    ir_ci: tuple
    cause: int
    n_units: int
    sub_range: tuple

    def to_dict(self) -> dict:
        return {
            "cause": self.cause,
            "contrast": [float(x) for x in self.contrast],
            "alpha": float(self.alpha),
            "c_hat": float(self.c_hat),
            "n_units": int(self.n_units),
            "sub_range": [float(x) for x in self.sub_range],
            "eta": [float(x) for x in self.eta],
            "estimate": [float(x) for x in self.estimate],
            "lower": [float(x) for x in self.lower],
            "upper": [float(x) for x in self.upper],
            "identification_region": [float(x) for x in self.id_region],
            "identification_region_ci": [float(x) for x in self.ir_ci],
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["eta", "estimate", "lower", "upper"])
            for row in zip(self.eta, self.estimate, self.lower, self.upper):
                w.writerow([repr(float(x)) for x in row])


def contrast_curve(funfit: FunctionalFit, K, cause: int) -> np.ndarray:
    b = funfit.beta(cause)
    return b @ _contrast_vector(K, b.shape[1])


def band(funfit: FunctionalFit, draws: BootstrapDraws, K, alpha: float = 0.05,
         sub_range: Optional[Sequence[float]] = None) -> BandResult:
    """Simultaneous band, identification region and its conservative CI over ``sub_range``."""
    _check_alpha(alpha)
    K = _contrast_vector(K, funfit.beta(draws.cause).shape[1])
    if not np.allclose(K, draws.contrast):
        raise DomainError("contrast differs from the one used for the bootstrap draws")
    pts = funfit.grid.points
    if pts.size != draws.grid.size or not np.allclose(pts, draws.grid):
        raise DomainError("bootstrap draws were computed on a different grid")
    lo, hi = (pts[0], pts[-1]) if sub_range is None else map(float, sub_range)
    if lo > hi or lo < pts[0] - 1e-12 or hi > pts[-1] + 1e-12:
        raise DomainError(f"sub-range [{lo}, {hi}] must be nonempty and inside the grid")
    sel = (pts >= lo - 1e-12) & (pts <= hi + 1e-12)
    if not np.any(sel):
        raise DomainError(f"sub-range [{lo}, {hi}] contains no grid points")
    c = draws.critical_value(alpha, lo, hi)
    est = contrast_curve(funfit, K, draws.cause)[sel]
    half = c / math.sqrt(draws.n_units)
    idr = (float(est.min()), float(est.max()))
    return BandResult(
        contrast=K, alpha=float(alpha), c_hat=c, eta=pts[sel], estimate=est,
        lower=est - half, upper=est + half, id_region=idr, ir_ci=(idr[0] - half, idr[1] + half),
        cause=draws.cause, n_units=draws.n_units, sub_range=(lo, hi),
    )


# ------------------------------------------------------------- robustness
@dataclass(frozen=True)
class RobustnessResult:
    eta_tilde: Optional[float]
    interval_log_odds: Optional[tuple]
    interval_odds_ratio: Optional[tuple]
    status: str
    naive_eta_tilde: Optional[float]
    naive_interval: Optional[tuple]
    naive_status: str
    levels: np.ndarray
    c_hat: np.ndarray
    f_values: np.ndarray
    contrast: np.ndarray
    alpha: float
    epsilon: float
    eta_max: float
    cause: int
    seed: Optional[int] = None
    note: str = field(default=STEP_OUT_NOTE)

    @property
    def naive_interval_odds_ratio(self) -> Optional[tuple]:
        if self.naive_interval is None:
            return None
        return tuple(math.exp(x) for x in self.naive_interval)

    def to_dict(self) -> dict:
        def iv(x):
            return None if x is None else [float(v) for v in x]
        return {
            "cause": self.cause,
            "contrast": [float(x) for x in self.contrast],
            "alpha": float(self.alpha),
            "epsilon": float(self.epsilon),
            "eta_max": float(self.eta_max),
            "seed": self.seed,
            "status": self.status,
            "eta_tilde": self.eta_tilde,
            "interval_log_odds": iv(self.interval_log_odds),
            "interval_odds_ratio": iv(self.interval_odds_ratio),
            "interval_odds_ratio_display": format_interval(self.interval_odds_ratio),
            "naive": {
                "status": self.naive_status,
                "eta_tilde": self.naive_eta_tilde,
                "interval_log_odds": iv(self.naive_interval),
                "interval_odds_ratio": iv(self.naive_interval_odds_ratio),
                "interval_odds_ratio_display": format_interval(self.naive_interval_odds_ratio),
            },
            "levels": [float(x) for x in self.levels],
            "c_hat": [float(x) for x in self.c_hat],
            "f": [float(x) for x in self.f_values],
            "note": self.note,
        }


def format_interval(iv: Optional[tuple], digits: int = 2) -> str:
    if iv is None:
        return "empty"
    return f"[{iv[0]:.{digits}f}, {iv[1]:.{digits}f}]"


class _LevelProfile:
    """Contrast extremes over [-e, e] for the piecewise-linear interpolant of K'beta."""

    def __init__(self, pts, curve, levels):
        self.pts, self.curve, self.levels = pts, curve, levels
        mag = np.abs(pts)
        order = np.argsort(mag, kind="stable")
        pos = np.searchsorted(mag[order], levels, side="right") - 1
        self.inf = np.minimum.accumulate(curve[order])[pos]
        self.sup = np.maximum.accumulate(curve[order])[pos]

    def extremes(self, e: float, l_inner: int):
        """inf/sup over [-e, e] for e in (levels[l_inner], levels[l_inner + 1])."""
        lo, hi = self.inf[l_inner], self.sup[l_inner]
        vals = [np.interp(x, self.pts, self.curve) for x in (-e, e)
                if self.pts[0] - 1e-12 <= x <= self.pts[-1] + 1e-12]
        return min([lo, *vals]), max([hi, *vals])


def _f(inf, sup, c, root_n, eps):
    return (inf - c / root_n) * (sup + c / root_n) - eps


def _largest_root(prof: _LevelProfile, cvals, root_n, eps, bisect_steps=60):
    levels = prof.levels
    f = _f(prof.inf, prof.sup, cvals, root_n, eps)
    pos = f > 0
    changes = int(np.count_nonzero(pos[1:] != pos[:-1]))
    if changes > 1:
        raise CRSensError(f"f changes sign {changes} times on the grid levels")
    if not pos[0]:
        return STATUS_EMPTY, None, f
    if pos[-1]:
        return STATUS_MAXIMAL, float(levels[-1]), f
    l = int(np.flatnonzero(pos)[-1])
    c = cvals[l + 1]

    def h(e):
        inf, sup = prof.extremes(e, l)
        return _f(inf, sup, c, root_n, eps)

    a, b = float(levels[l]), float(levels[l + 1])
    # f jumps at levels[l] when c steps up; the root may sit right there
    if h(a + (b - a) * 1e-12) <= 0:
        return STATUS_ROOT, a, f
    for _ in range(bisect_steps):
        m = 0.5 * (a + b)
        if h(m) > 0:
            a = m
        else:
            b = m
    return STATUS_ROOT, a, f


def _check_robustness_grid(grid, eta_max):
    pts = grid.points
    if not grid.is_symmetric():
        raise DomainError("robustness intervals need a grid symmetric about 0")
    if not np.any(np.isclose(pts, eta_max, rtol=0, atol=1e-9)):
        raise DomainError(f"eta_max={eta_max} must be a grid point")
    if not np.any(pts == 0.0):
        raise DomainError("robustness intervals need eta = 0 on the grid")


def robustness_interval(funfit: FunctionalFit, influence: InfluenceArray, K, alpha: float = 0.05,
                        eta_max: float = 5.0, epsilon: float = 1e-8, S: int = 1000,
                        seed: int = 0, draws: Optional[BootstrapDraws] = None,
                        threads: int = 1) -> RobustnessResult:
    """Widest symmetric sensitivity range whose IR confidence interval excludes 0.

    ``f(e) = (inf K'beta - c(e)/sqrt(n)) (sup K'beta + c(e)/sqrt(n)) - epsilon``
    over [-e, e] is evaluated at every grid level; the largest root in
    [0, eta_max] is located by a scan for the outermost sign change and
    bisection inside that cell.  The naive comparator repeats the search
    with c fixed at c(eta_max).
    """
    _check_alpha(alpha)
    _check_robustness_grid(funfit.grid, eta_max)
    cause = influence.cause
    K = _contrast_vector(K, influence.values.shape[2])
    if draws is None:
        draws = bootstrap_sup_stats(influence, K, S=S, seed=seed, threads=threads)
    keep = draws.levels <= eta_max + 1e-9
    levels = draws.levels[keep]
    cvals = draws.level_critical_values(alpha)[keep]
    pts = funfit.grid.points
    curve = contrast_curve(funfit, K, cause)
    inside = np.abs(pts) <= eta_max + 1e-9
    prof = _LevelProfile(pts[inside], curve[inside], levels)
    root_n = math.sqrt(draws.n_units)

    status, eta_t, fvals = _largest_root(prof, cvals, root_n, epsilon)
    naive_status, naive_t, _ = _largest_root(prof, np.full_like(cvals, cvals[-1]), root_n, epsilon)

    def iv(e):
        return None if e is None else (-e, e)

    interval = iv(eta_t)
    return RobustnessResult(
        eta_tilde=eta_t, interval_log_odds=interval,
        interval_odds_ratio=None if interval is None else (math.exp(-eta_t), math.exp(eta_t)),
        status=status, naive_eta_tilde=naive_t, naive_interval=iv(naive_t), naive_status=naive_status,
        levels=levels, c_hat=cvals, f_values=fvals, contrast=K, alpha=float(alpha),
        epsilon=float(epsilon), eta_max=float(eta_max), cause=cause, seed=draws.seed,
    )


def naive_robustness_interval(funfit: FunctionalFit, influence: InfluenceArray, K, alpha: float = 0.05,
                              eta_max: float = 5.0, epsilon: float = 1e-8, S: int = 1000, seed: int = 0,
                              draws: Optional[BootstrapDraws] = None) -> Optional[tuple]:
    """Symmetric range where the single widest band, with c(eta_max), excludes zero."""
    res = robustness_interval(funfit, influence, K, alpha, eta_max, epsilon, S, seed, draws)
    return res.naive_interval


def report_json(band_result: Optional[BandResult] = None,
                robustness: Optional[RobustnessResult] = None, **extra) -> str:
    out = dict(extra)
    if band_result is not None:
        out["band"] = band_result.to_dict()
    if robustness is not None:
        out["robustness"] = robustness.to_dict()
    return json.dumps(out, indent=2, sort_keys=True)
