"""Functional partial pseudo-score estimation of beta_j(eta) on a sensitivity grid.

For a fixed sensitivity value ``eta`` a missing-cause failure contributes to
cause 2 with weight g(gamma' W~ + eta) and to cause 1 with the complement;
observed failures contribute 0/1.  The weighted Cox-type score

    U_j(beta; eta) = (1/n_units) sum_i v_i w_ji(eta) {Z_i - E(beta, X_i)}

is solved by damped Newton steps, where ``v_i`` is 1 (or 1/M_i for clustered
cohorts) and ``E`` is the at-risk weighted covariate mean.  Tied failure
times share risk-set averages (Breslow).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .cohort import Cohort, design_rows
from .errors import DomainError, SingularMatrixError
from .missingness import MissingnessFit

logger = logging.getLogger(__name__)

CAUSES = (1, 2)


# --------------------------------------------------------------------- grid
@dataclass(frozen=True)
class SensitivityGrid:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1)
        if pts.size == 0 or not np.all(np.isfinite(pts)):
            raise DomainError("grid must contain finite points")
        if np.any(np.diff(pts) <= 0):
            raise DomainError("grid points must be strictly increasing")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def linspace(cls, a: float, b: float, num: int = 41) -> "SensitivityGrid":
        """Equally spaced grid on [a, b]; 0 is inserted when a <= 0 <= b and not already a node."""
        if not (np.isfinite(a) and np.isfinite(b)) or a > b:
            raise DomainError(f"invalid grid bounds [{a}, {b}]")
        if a == b:
            return cls(np.array([float(a)]))
        if num < 2:
            raise DomainError("a grid on a nondegenerate interval needs at least 2 points")
        pts = np.linspace(a, b, num)
        if a == -b:
            pts = 0.5 * (pts - pts[::-1])  # exact antisymmetry
        span = b - a
        pts[np.abs(pts) < 1e-12 * span] = 0.0
        if a <= 0 <= b and not np.any(pts == 0.0):
            pts = np.sort(np.append(pts, 0.0))
        return cls(pts)

    @property
    def a(self) -> float:
        return float(self.points[0])

    @property
    def b(self) -> float:
        return float(self.points[-1])

    def __len__(self):
        return self.points.size

    def index_of(self, eta: float, atol: float = 1e-9) -> int:
        k = int(np.argmin(np.abs(self.points - eta)))
        if abs(self.points[k] - eta) > atol:
            raise DomainError(f"eta={eta} is not a grid point")
        return k

    @property
    def anchor(self) -> int:
        """Index of eta = 0 if on the grid, else of the point nearest 0."""
        return int(np.argmin(np.abs(self.points)))

    def is_symmetric(self, atol: float = 1e-10) -> bool:
        return bool(np.allclose(self.points, -self.points[::-1], atol=atol, rtol=0))


# ------------------------------------------------------------ jump weights
@dataclass(frozen=True)
class JumpWeights:
    w1: np.ndarray
    w2: np.ndarray

    def for_cause(self, cause: int) -> np.ndarray:
        if cause == 1:
            return self.w1
        if cause == 2:
            return self.w2
        raise DomainError(f"cause must be 1 or 2, got {cause}")


def jump_weights(cohort: Cohort, fit: MissingnessFit, eta: float, lp: Optional[np.ndarray] = None) -> JumpWeights:
    """Expected jump sizes of the cause-specific counting processes at X_i."""
    if lp is None:
        lp = design_rows(cohort) @ fit.gamma_hat
    d = cohort.status.astype(float)
    r = cohort.observed.astype(float)
    g = expit(lp + eta)
    w2 = r * (cohort.cause == 2) + (1 - r) * d * g
    w1 = r * (cohort.cause == 1) + (1 - r) * d * (1 - g)
    return JumpWeights(w1=w1, w2=w2)


# ------------------------------------------------------------ risk sets
class RiskSets:
    """Sorted-order view of a cohort for O(n) risk-set sums.

    All ``*_sorted`` quantities are indexed by position in ascending-time
    order; ``inverse`` gives each cohort row's sorted position.
    """

    def __init__(self, cohort: Cohort):
        self.cohort = cohort
        self.order = cohort.sort_index
        self.Z = cohort.Z[self.order]
        self.v = cohort.weights[self.order]
        self.first = cohort._group_first
        self.last = cohort._group_last
        self.n_units = cohort.n_units
        self.inverse = np.empty_like(self.order)
        self.inverse[self.order] = np.arange(self.order.size)

    def _rev_cumsum(self, x):
        return np.cumsum(x[::-1], axis=0)[::-1]

    def sums(self, beta, second: bool = False):
        """Risk-set sums at each sorted subject's own time (Breslow ties).

        Returns ``(e, S0, S1, S2, shift)`` with S_k = sum_{X_l >= X_i} v_l e_l Z_l^{(k)},
        not normalised; ``S2`` is None unless ``second``.  ``e`` and the sums
        are computed as exp(beta'Z - shift) to avoid overflow.
        """
        lin = self.Z @ beta
        shift = float(np.max(lin))
        e = np.exp(lin - shift)
        ve = self.v * e
        S0 = self._rev_cumsum(ve)[self.first]
        S1 = self._rev_cumsum(ve[:, None] * self.Z)[self.first]
        S2 = None
        if second:
            zz = self.Z[:, :, None] * self.Z[:, None, :]
            S2 = self._rev_cumsum(ve[:, None, None] * zz)[self.first]
        return e, S0, S1, S2, shift

    def evaluate(self, beta, w_sorted, hess: bool = True):
        """Log pseudo-likelihood, score and Hessian (all mean-scale) at ``beta``."""
        e, S0, S1, S2, shift = self.sums(beta, second=hess)
        vw = self.v * w_sorted
        act = vw > 0
        E = S1[act] / S0[act, None]
        ll = float(np.sum(vw[act] * (self.Z[act] @ beta - shift - np.log(S0[act])))) / self.n_units
        score = (vw[act, None] * (self.Z[act] - E)).sum(axis=0) / self.n_units
        H = None
        if hess:
            V = S2[act] / S0[act, None, None] - E[:, :, None] * E[:, None, :]
            H = np.einsum("i,ijk->jk", vw[act], V) / self.n_units
            H = 0.5 * (H + H.T)
        return ll, score, H

    def breslow(self, beta, w_sorted):
        """Per-sorted-subject Breslow pieces.

        Returns ``(e, E, cumhaz, cum_E_dhaz)`` where ``E`` is the risk-set
        covariate mean at each subject's time, ``cumhaz`` is Lambda(X_i) and
        ``cum_E_dhaz`` is sum_{t_k <= X_i} E(t_k) dLambda(t_k).  ``e`` and the
        two cumulative terms share the overflow shift, so only products
        ``e * cumhaz`` are on the natural scale.
        """
        e, S0, S1, _, _ = self.sums(beta)
        E = S1 / S0[:, None]
        jump = self.v * w_sorted / S0
        cumhaz = np.cumsum(jump)[self.last]
        cum_E = np.cumsum(jump[:, None] * E, axis=0)[self.last]
        return e, E, cumhaz, cum_E


def _sorted_weights(rs: RiskSets, cohort, fit, eta, cause, lp=None):
    return jump_weights(cohort, fit, eta, lp).for_cause(cause)[rs.order]


def risk_averages(cohort: Cohort, beta, t: float, cluster_weights: Optional[np.ndarray] = None):
    """Weighted at-risk averages at time ``t``: E(beta, t), S0 (mean-scale) and S2/S0."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    v = cohort.weights if cluster_weights is None else np.asarray(cluster_weights, dtype=float)
    y = cohort.time >= t
    if not np.any(y & (v > 0)):
        raise DomainError(f"empty risk set at t={t}")
    Z = cohort.Z[y]
    ve = v[y] * np.exp(Z @ beta)
    s0 = ve.sum()
    E = (ve[:, None] * Z).sum(axis=0) / s0
    S2 = np.einsum("i,ij,ik->jk", ve, Z, Z) / s0
    return E, s0 / cohort.n_units, S2


def pseudo_score(cohort: Cohort, fit: MissingnessFit, beta, eta: float, cause: int) -> np.ndarray:
    rs = RiskSets(cohort)
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    return rs.evaluate(beta, _sorted_weights(rs, cohort, fit, eta, cause), hess=False)[1]


def hessian(cohort: Cohort, fit: MissingnessFit, beta, eta: float, cause: int) -> np.ndarray:
    """Minus the derivative of :func:`pseudo_score` in beta (positive semidefinite)."""
    rs = RiskSets(cohort)
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    return rs.evaluate(beta, _sorted_weights(rs, cohort, fit, eta, cause))[2]


def log_pseudo_likelihood(cohort: Cohort, fit: MissingnessFit, beta, eta: float, cause: int) -> float:
    """(1/n_units) sum_i v_i w_ji {beta' Z_i - log sum_{X_l >= X_i} v_l exp(beta' Z_l)}."""
    rs = RiskSets(cohort)
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    return rs.evaluate(beta, _sorted_weights(rs, cohort, fit, eta, cause), hess=False)[0]


# ----------------------------------------------------------------- solving
@dataclass
class _PointResult:
    beta: np.ndarray
    hessian: np.ndarray
    converged: bool
    iterations: int
    score_norm: float


def _newton(rs: RiskSets, w_sorted, beta0, tol, max_iter) -> _PointResult:
    beta = np.array(beta0, dtype=float)
    ll, score, H = rs.evaluate(beta, w_sorted)
    it = 0
    while np.max(np.abs(score)) >= tol and it < max_iter:
        it += 1
        try:
            c = np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            raise SingularMatrixError("pseudo-score Hessian is singular") from None
        step = np.linalg.solve(c.T, np.linalg.solve(c, score))
        t = 1.0
        for _ in range(50):
            cand = beta + t * step
            ll_c, score_c, H_c = rs.evaluate(cand, w_sorted)
            if np.isfinite(ll_c) and ll_c >= ll - 1e-13 * max(1.0, abs(ll)):
                break
            t *= 0.5
        beta, ll, score, H = cand, ll_c, score_c, H_c
    ok = bool(np.max(np.abs(score)) < tol)
    return _PointResult(beta, H, ok, it, float(np.max(np.abs(score))))


@dataclass(frozen=True)
class BaselineHazard:
    """Breslow step function: ``cumhaz[k]`` is Lambda at ``times[k]`` (right-continuous)."""

    times: np.ndarray
    cumhaz: np.ndarray

    def __call__(self, t):
        k = np.searchsorted(self.times, t, side="right")
        out = np.where(k > 0, self.cumhaz[np.maximum(k - 1, 0)], 0.0)
        return float(out) if np.ndim(out) == 0 else out


def _baseline(rs: RiskSets, beta, w_sorted) -> BaselineHazard:
    _, S0, _, _, shift = rs.sums(beta)
    jump = rs.v * w_sorted / S0 * np.exp(-shift)
    ts = rs.cohort.time[rs.order]
    group_jump = np.cumsum(jump)[rs.last]
    # one entry per distinct time with positive mass
    is_last = np.r_[ts[1:] != ts[:-1], True]
    times, cum = ts[is_last], group_jump[is_last]
    dj = np.diff(np.r_[0.0, cum])
    keep = dj > 0
    return BaselineHazard(times=times[keep], cumhaz=cum[keep])


@dataclass(frozen=True)
class CauseSlice:
    cause: int
    beta: np.ndarray          # (M, p)
    hessian: np.ndarray       # (M, p, p)
    converged: np.ndarray     # (M,) bool
    iterations: np.ndarray    # (M,) int
    score_norm: np.ndarray    # (M,)
    baseline: Optional[tuple] = None   # BaselineHazard per grid point


def solve_beta(cohort: Cohort, fit: MissingnessFit, grid: SensitivityGrid, cause: int,
               tol: float = 1e-10, max_iter: int = 50, store_baseline: bool = True,
               rs: Optional[RiskSets] = None, lp: Optional[np.ndarray] = None) -> CauseSlice:
    """Solve the pseudo-score equation at every grid point for one cause.

    The anchor (eta = 0, or the point nearest it) is solved from beta = 0, then
    each outward neighbour is warm-started from the previous solution.  Points
    that fail to converge are flagged and filled by linear interpolation from
    converged neighbours.
    """
    if cause not in CAUSES:
        raise DomainError(f"cause must be 1 or 2, got {cause}")
    rs = rs or RiskSets(cohort)
    if lp is None:
        lp = design_rows(cohort) @ fit.gamma_hat
    pts = grid.points
    M, p = pts.size, cohort.p
    res: list = [None] * M
    k0 = grid.anchor

    def solve_at(k, start):
        w = _sorted_weights(rs, cohort, fit, pts[k], cause, lp)
        try:
            r = _newton(rs, w, start, tol, max_iter)
        except SingularMatrixError as exc:
            raise SingularMatrixError(f"{exc} at eta={pts[k]:g} (cause {cause})") from None
        res[k] = r
        return r

    solve_at(k0, np.zeros(p))
    for direction in (1, -1):
        prev = res[k0].beta
        k = k0 + direction
        while 0 <= k < M:
            prev = solve_at(k, prev).beta
            k += direction

    beta = np.array([r.beta for r in res])
    conv = np.array([r.converged for r in res])
    if not conv.all():
        bad = np.flatnonzero(~conv)
        logger.warning("cause %d: %d grid point(s) failed to converge: %s", cause, bad.size,
                       ", ".join(f"{pts[k]:g}" for k in bad))
        good = np.flatnonzero(conv)
        if good.size:
            for c in range(p):
                beta[bad, c] = np.interp(pts[bad], pts[good], beta[good, c])
    hess = np.array([r.hessian for r in res])
    baseline = None
    if store_baseline:
        baseline = tuple(_baseline(rs, beta[k], _sorted_weights(rs, cohort, fit, pts[k], cause, lp))
                         for k in range(M))
    return CauseSlice(
        cause=cause, beta=beta, hessian=hess, converged=conv,
        iterations=np.array([r.iterations for r in res]),
        score_norm=np.array([r.score_norm for r in res]), baseline=baseline,
    )


@dataclass(frozen=True)
class FunctionalFit:
    grid: SensitivityGrid
    slices: Dict[int, CauseSlice]
    gamma_fit: MissingnessFit
    covariate_names: tuple = field(default=())

    @property
    def causes(self) -> tuple:
        return tuple(sorted(self.slices))

    def beta(self, cause: int) -> np.ndarray:
        return self.slices[cause].beta

    def hessian(self, cause: int) -> np.ndarray:
        return self.slices[cause].hessian

    def converged(self, cause: int) -> np.ndarray:
        return self.slices[cause].converged

    def baseline(self, cause: int, k: int) -> BaselineHazard:
        b = self.slices[cause].baseline
        if b is None:
            raise DomainError("baseline hazards were not stored")
        return b[k]

    def to_dict(self) -> dict:
        out = {
            "grid": [float(x) for x in self.grid.points],
            "covariates": list(self.covariate_names),
            "missingness": self.gamma_fit.to_dict(),
            "causes": {},
        }
        for j in self.causes:
            s = self.slices[j]
            out["causes"][str(j)] = {
                "beta": [[float(x) for x in row] for row in s.beta],
                "converged": [bool(c) for c in s.converged],
                "iterations": [int(i) for i in s.iterations],
            }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def tidy_rows(self) -> Iterable[tuple]:
        """(cause, eta, coef, estimate, hazard_ratio, converged) rows."""
        for j in self.causes:
            s = self.slices[j]
            for k, eta in enumerate(self.grid.points):
                for c, name in enumerate(self.covariate_names):
                    b = float(s.beta[k, c])
                    yield j, float(eta), name, b, float(np.exp(b)), bool(s.converged[k])


def fit_functional(cohort: Cohort, fit: MissingnessFit, grid: SensitivityGrid,
                   causes: Sequence[int] = CAUSES, **kw) -> FunctionalFit:
    rs = RiskSets(cohort)
    lp = design_rows(cohort) @ fit.gamma_hat
    slices = {j: solve_beta(cohort, fit, grid, j, rs=rs, lp=lp, **kw) for j in causes}
    return FunctionalFit(grid=grid, slices=slices, gamma_fit=fit, covariate_names=cohort.covariate_names)


def interpolate_beta(fit: FunctionalFit, eta: float, cause: int) -> np.ndarray:
    """Piecewise-linear interpolation of beta_j over the grid."""
    pts = fit.grid.points
    if not (pts[0] - 1e-12 <= eta <= pts[-1] + 1e-12):
        raise DomainError(f"eta={eta} outside the grid range [{pts[0]}, {pts[-1]}]")
    b = fit.beta(cause)
    return np.array([np.interp(eta, pts, b[:, c]) for c in range(b.shape[1])])
