"""Empirical influence functions of beta_hat_j(eta) along the sensitivity grid.

For unit i (a subject, or a cluster for clustered cohorts)

    psi_ij(eta) = H^{-1} { sum_{m in i} v_m M_mj + s_j D omega_m },

with ``M_mj`` the martingale-residual integral, ``D`` the derivative of the
pseudo-score in gamma, ``s_1 = -1``, ``s_2 = +1`` and ``omega`` the
missingness-fit influence rows.  The scaling is such that

    beta_hat_j(eta) - beta*_j(eta)  ~=  (1/n_units) sum_i psi_ij(eta),

i.e. ``psi_i`` equals n_units times the derivative of beta_hat with respect
to the case weight of unit i.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .cohort import Cohort, design_rows
from .errors import DomainError, SingularMatrixError
from .missingness import MissingnessFit
from .pseudoscore import FunctionalFit, RiskSets, _sorted_weights

logger = logging.getLogger(__name__)

CAUSE_SIGN = {1: -1.0, 2: 1.0}


@dataclass(frozen=True)
class InfluenceArray:
    values: np.ndarray          # (n_units, M, p)
    cause: int
    grid: np.ndarray
    unit: str = "subject"
    pinv_points: tuple = field(default=())

    @property
    def n_units(self) -> int:
        return self.values.shape[0]

    def contrast(self, K) -> np.ndarray:
        """K' psi as an (n_units, M) matrix."""
        K = np.asarray(K, dtype=float).reshape(-1)
        if K.size != self.values.shape[2]:
            raise DomainError(f"contrast has length {K.size}, expected {self.values.shape[2]}")
        return self.values @ K

    def covariance(self, k: int) -> np.ndarray:
        """(1/n_units) sum_i psi_i psi_i' at grid index ``k``; Var(beta_hat) is this over n_units."""
        x = self.values[:, k, :]
        return x.T @ x / self.n_units

    def standard_errors(self) -> np.ndarray:
        """(M, p) model-based standard errors of beta_hat_j(eta)."""
        return np.sqrt(np.einsum("imp,imp->mp", self.values, self.values)) / self.n_units

    def write_csv(self, path, names=None, unit_labels=None) -> None:
        M, p = self.values.shape[1:]
        names = names or [f"z{c + 1}" for c in range(p)]
        labels = unit_labels if unit_labels is not None else range(self.n_units)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["unit", "cause", "eta", "coef", "value"])
            for i, lab in enumerate(labels):
                for k in range(M):
                    for c in range(p):
                        w.writerow([lab, self.cause, repr(float(self.grid[k])), names[c],
                                    repr(float(self.values[i, k, c]))])


def _hinv(H, eta, cause, strict):
    try:
        c = np.linalg.cholesky(H)
        ci = np.linalg.inv(c)
        return ci.T @ ci, False
    except np.linalg.LinAlgError:
        if strict:
            raise SingularMatrixError(f"Hessian is singular at eta={eta:g} (cause {cause})") from None
        logger.warning("Hessian not positive definite at eta=%g (cause %d); using pseudo-inverse", eta, cause)
        return np.linalg.pinv(H), True


def _point_pieces(rs: RiskSets, cohort, missfit, beta, eta, cause, lp):
    """Martingale rows (cohort order, unweighted), D matrix and Hessian at one grid point."""
    w = _sorted_weights(rs, cohort, missfit, eta, cause, lp)
    e, E, cumhaz, cumE = rs.breslow(beta, w)
    mart_s = w[:, None] * (rs.Z - E) - e[:, None] * (rs.Z * cumhaz[:, None] - cumE)
    mart = mart_s[rs.inverse]
    E_own = E[rs.inverse]
    miss = (1 - cohort.observed) * cohort.status
    g = expit(lp + eta)
    coef = cohort.weights * miss * g * (1 - g)
    D = ((cohort.Z - E_own) * coef[:, None]).T @ design_rows(cohort) / cohort.n_units
    _, _, H = rs.evaluate(beta, w)
    return mart, D, H


def martingale_residual_term(cohort: Cohort, funfit: FunctionalFit, cause: int, eta_index: int) -> np.ndarray:
    """Rows int {Z_i - E(t)} dM_ij(t) at one grid point (n x p, cohort order)."""
    rs = RiskSets(cohort)
    lp = design_rows(cohort) @ funfit.gamma_fit.gamma_hat
    eta = funfit.grid.points[eta_index]
    return _point_pieces(rs, cohort, funfit.gamma_fit, funfit.beta(cause)[eta_index], eta, cause, lp)[0]


def gamma_correction_term(cohort: Cohort, funfit: FunctionalFit, missfit: MissingnessFit,
                          cause: int, eta_index: int) -> np.ndarray:
    """Rows s_j D omega_i accounting for the estimation of gamma (n x p)."""
    rs = RiskSets(cohort)
    lp = design_rows(cohort) @ missfit.gamma_hat
    eta = funfit.grid.points[eta_index]
    D = _point_pieces(rs, cohort, missfit, funfit.beta(cause)[eta_index], eta, cause, lp)[1]
    return CAUSE_SIGN[cause] * missfit.omega @ D.T


def assemble_influence(cohort: Cohort, funfit: FunctionalFit, missfit: MissingnessFit, cause: int,
                       strict: bool = False) -> InfluenceArray:
    """Influence values for every unit and grid point of one cause.

    Clustered cohorts are aggregated to cluster level: each cluster's value is
    the mean of its members' subject-level influence (computed with 1/M_i
    weights throughout).  A non-positive-definite Hessian falls back to the
    pseudo-inverse (recorded in ``pinv_points``) unless ``strict``.
    """
    if cause not in CAUSE_SIGN:
        raise DomainError(f"cause must be 1 or 2, got {cause}")
    rs = RiskSets(cohort)
    lp = design_rows(cohort) @ missfit.gamma_hat
    pts = funfit.grid.points
    betas = funfit.beta(cause)
    n_u, p = cohort.n_units, cohort.p
    out = np.empty((n_u, pts.size, p))
    pinv = []
    for k, eta in enumerate(pts):
        mart, D, H = _point_pieces(rs, cohort, missfit, betas[k], eta, cause, lp)
        contrib = cohort.weights[:, None] * mart + CAUSE_SIGN[cause] * missfit.omega @ D.T
        if cohort.clustered:
            U = np.zeros((n_u, p))
            np.add.at(U, cohort.unit_index, contrib)
        else:
            U = contrib
        Hi, used_pinv = _hinv(H, eta, cause, strict)
        if used_pinv:
            pinv.append(float(eta))
        out[:, k, :] = U @ Hi
    if not np.all(np.isfinite(out)):
        raise DomainError(f"non-finite influence values for cause {cause}")
    return InfluenceArray(values=out, cause=cause, grid=np.asarray(pts),
                          unit="cluster" if cohort.clustered else "subject", pinv_points=tuple(pinv))
