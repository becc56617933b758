"""Complete-case logit model for P(C=2 | R=1, Delta=1, W).

The fit is weighted (1/M_i for clustered cohorts) and exposes per-subject
influence rows ``omega`` scaled so that

    gamma_hat - gamma_0  ~=  (1/n_units) * sum_i omega_i .
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, log_expit

from .cohort import Cohort, design_column_names, design_rows
from .errors import ConvergenceError, DomainError, SeparationError, SingularMatrixError

RIDGE = 1e-8


@dataclass(frozen=True)
class MissingnessFit:
    gamma_hat: np.ndarray
    info_inverse: np.ndarray
    omega: np.ndarray
    converged: bool
    iterations: int
    n_units: int
    loglik: float
    score_norm: float
    ridge_applied: bool = False
    column_names: tuple = field(default=())

    def linear_predictor(self, wtilde) -> np.ndarray:
        return np.asarray(wtilde, dtype=float) @ self.gamma_hat

    def to_dict(self) -> dict:
        return {
            "gamma_hat": dict(zip(self.column_names, map(float, self.gamma_hat))),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "loglik": float(self.loglik),
            "score_sup_norm": float(self.score_norm),
            "ridge_applied": bool(self.ridge_applied),
            "n_units": int(self.n_units),
        }


def _collinear_columns(info: np.ndarray, names) -> list:
    _, s, vt = np.linalg.svd(info)
    null = vt[s <= s[0] * 1e-10] if s[0] > 0 else vt
    involved = np.flatnonzero(np.any(np.abs(null) > 1e-6, axis=0))
    return [names[k] for k in involved]


def _loglik(gamma, W, y, v, n_units):
    eta = W @ gamma
    return float(np.sum(v * (y * log_expit(eta) + (1 - y) * log_expit(-eta)))) / n_units


def fit_missingness(cohort: Cohort, weights: Optional[np.ndarray] = None, tol: float = 1e-10,
                    max_iter: int = 100, ridge_on_singular: bool = True) -> MissingnessFit:
    """Maximum-likelihood fit of the complete-case logit model.

    Newton-Raphson from gamma = 0 with step halving on the weighted
    log-likelihood; converged when the mean-scale score sup-norm < ``tol``.
    ``weights`` default to the cohort's (1 or 1/M_i).

    Raises SeparationError when a cause is absent among complete cases or the
    iterates run off to infinity, SingularMatrixError for a rank-deficient
    design when ``ridge_on_singular`` is False.
    """
    v_all = cohort.weights if weights is None else np.asarray(weights, dtype=float)
    if v_all.shape != (cohort.n,) or np.any(v_all < 0):
        raise DomainError("weights must be a nonnegative vector of length n")
    names = design_column_names(cohort)
    W_all = design_rows(cohort)
    cc = (cohort.status == 1) & (cohort.observed == 1)
    y_all = (cohort.cause == 2).astype(float)
    W, y, v = W_all[cc], y_all[cc], v_all[cc]
    n_units = cohort.n_units
    if not np.any(v * y > 0) or not np.any(v * (1 - y) > 0):
        raise SeparationError("complete cases must include failures of both causes",
                              last_iterate=np.zeros(W_all.shape[1]), iterations=0)

    d = W.shape[1]
    gamma = np.zeros(d)
    ridge = False

    def pieces(g):
        pr = expit(W @ g)
        score = W.T @ (v * (y - pr)) / n_units
        info = (W * (v * pr * (1 - pr))[:, None]).T @ W / n_units
        return pr, score, info

    pr, score, info = pieces(gamma)
    ll = _loglik(gamma, W, y, v, n_units)
    it = 0
    converged = np.max(np.abs(score)) < tol
    while not converged and it < max_iter:
        it += 1
        ev = np.linalg.eigvalsh(info)
        if ev[0] <= max(ev[-1], 1.0) * 1e-13:
            if not ridge_on_singular:
                raise SingularMatrixError("singular missingness information matrix",
                                          columns=_collinear_columns(info, names))
            ridge = True
        step = np.linalg.solve(info + (RIDGE * np.eye(d) if ridge else 0.0), score)
        t = 1.0
        for _ in range(60):
            cand = gamma + t * step
            ll_c = _loglik(cand, W, y, v, n_units)
            if ll_c >= ll - 1e-14 * max(1.0, abs(ll)):
                break
            t *= 0.5
        gamma, ll = cand, ll_c
        if np.max(np.abs(W @ gamma)) > 40:
            raise SeparationError("missingness model separates the complete cases",
                                  last_iterate=gamma, iterations=it)
        pr, score, info = pieces(gamma)
        converged = np.max(np.abs(score)) < tol
    lp_cc = W @ gamma
    if np.all(np.abs(y - pr)[v > 0] < 1e-6) or np.max(np.abs(lp_cc)) > 30:
        raise SeparationError("missingness model separates the complete cases",
                              last_iterate=gamma, iterations=it)
    if not converged:
        raise ConvergenceError(f"missingness fit did not converge in {max_iter} iterations",
                               last_iterate=gamma, iterations=it)

    ev = np.linalg.eigvalsh(info)
    if ev[0] <= max(ev[-1], 1.0) * 1e-13:
        if not ridge_on_singular:
            raise SingularMatrixError("singular missingness information matrix",
                                      columns=_collinear_columns(info, names))
        ridge = True
    info_sum = info * n_units + (RIDGE * n_units * np.eye(d) if ridge else 0.0)
    info_inverse = np.linalg.inv(info_sum)
    info_inverse = 0.5 * (info_inverse + info_inverse.T)

    omega = np.zeros((cohort.n, d))
    resid = np.zeros(cohort.n)
    resid[cc] = v * (y - pr)
    omega[cc] = n_units * (W_all[cc] * resid[cc][:, None]) @ info_inverse
    return MissingnessFit(
        gamma_hat=gamma, info_inverse=info_inverse, omega=omega, converged=True,
        iterations=it, n_units=n_units, loglik=ll, score_norm=float(np.max(np.abs(score))),
        ridge_applied=ridge, column_names=names,
    )


def predict_cause2(fit: MissingnessFit, wtilde, eta: float = 0.0):
    """g(gamma_hat' W~ + eta); ``wtilde`` may be one row or an (n x d) matrix."""
    lp = fit.linear_predictor(wtilde) + eta
    return float(expit(lp)) if np.ndim(lp) == 0 else expit(lp)


def marginal_missing_death_prob(cohort: Cohort, fit: MissingnessFit, eta: float = 0.0) -> float:
    """Cluster-size-weighted average of g(gamma' W~ + eta) over missing-cause subjects."""
    miss = (cohort.observed == 0)
    if not np.any(miss):
        raise DomainError("cohort has no missing-cause subjects")
    v = cohort.weights[miss]
    pr = expit(design_rows(cohort)[miss] @ fit.gamma_hat + eta)
    return float(np.sum(v * pr) / np.sum(v))
