"""Logistic regression by iteratively reweighted least squares."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.linalg as sla
from scipy.special import expit

from .design import LAG, ModelFrame
from .errors import ConvergenceError, SeparationError, SingularityError

SEPARATION_BOUND = 15.0


@dataclass
class FitResult:
    """Estimates from any of the regression fitters.

    ``covariance_model`` is the model-based covariance; ``covariance_robust``
    the cluster sandwich where the fitter computes one.
    """

    names: list
    params: np.ndarray
    covariance_model: np.ndarray
    covariance_robust: np.ndarray | None = None
    dispersion: float | None = None
    correlation: float | None = None
    variance_components: dict | None = None
    log_likelihood: float | None = None
    iterations: int = 0
    converged: bool = False
    score_norm: float = math.nan
    model: str = ""
    diagnostics: dict = field(default_factory=dict)

    @property
    def coefficients(self) -> pd.Series:
        return pd.Series(self.params, index=self.names, name="estimate")

    def std_errors(self, robust: bool | None = None) -> pd.Series:
        """Standard errors; robust ones by default when available."""
        if robust is None:
            robust = self.covariance_robust is not None
        cov = self.covariance_robust if robust else self.covariance_model
        if cov is None:
            raise ValueError("robust covariance not available for this fit")
        return pd.Series(np.sqrt(np.clip(np.diag(cov), 0, None)), index=self.names, name="se")

    def __getitem__(self, name):
        return self.params[self.names.index(name)]


def log_likelihood(X, y, beta, offset=None):
    eta = X @ beta
    if offset is not None:
        eta = eta + offset
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def check_rank(X, names):
    """Raise :class:`SingularityError` naming every column in a linear dependency."""
    q = X.shape[1]
    if X.shape[0] < q:
        raise SingularityError(f"{X.shape[0]} rows cannot identify {q} coefficients")
    # column-normalise so the tolerance is scale free
    norms = np.linalg.norm(X, axis=0)
    norms[norms == 0] = 1.0
    _, sv, vt = np.linalg.svd(X / norms, full_matrices=False)
    tol = sv[0] * max(X.shape) * np.finfo(float).eps if sv.size else 0.0
    null = vt[sv <= tol]
    if len(null):
        involved = np.flatnonzero(np.any(np.abs(null) > 1e-8, axis=0))
        raise SingularityError("design is rank deficient; collinear columns: "
                               + ", ".join(names[j] for j in involved))


def irls(X, y, offset=None, beta0=None, max_iter=100, score_tol=1e-8, dev_tol=1e-10,
         names=None):
    """Newton-Raphson (= IRLS for the canonical logit link) with step halving.

    Returns
    -------
    beta, cov, loglik, iterations, converged, score_norm
    """
    n, q = X.shape
    names = names or [f"x{j}" for j in range(q)]
    beta = np.zeros(q) if beta0 is None else np.array(beta0, dtype=float)
    ll = log_likelihood(X, y, beta, offset)
    converged = False
    score_norm = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        eta = X @ beta if offset is None else X @ beta + offset
        p = expit(eta)
        score = X.T @ (y - p)
        score_norm = float(np.max(np.abs(score)))
        w = p * (1.0 - p)
        info = X.T @ (X * w[:, None])
        try:
            step = sla.solve(info, score, assume_a="pos")
        except (np.linalg.LinAlgError, sla.LinAlgError):
            if np.max(np.abs(beta)) > SEPARATION_BOUND / 2:
                raise SeparationError(_separation_message(beta, names)) from None
            raise SingularityError("information matrix is singular") from None
        if score_norm < score_tol:
            # one more full step is quadratically convergent and essentially free
            # (judged on the score: near the optimum ll is flat to rounding)
            cand = beta + step
            eta_c = X @ cand if offset is None else X @ cand + offset
            if np.max(np.abs(X.T @ (y - expit(eta_c)))) < score_norm:
                beta, ll = cand, log_likelihood(X, y, cand, offset)
            converged = True
            it -= 1
            break
        t = 1.0
        for _ in range(40):
            cand = beta + t * step
            ll_new = log_likelihood(X, y, cand, offset)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        dev_change = abs(ll_new - ll) / (abs(ll) + 0.1)
        beta, ll = cand, ll_new
        if np.max(np.abs(beta)) > SEPARATION_BOUND:
            raise SeparationError(_separation_message(beta, names))
        if dev_change < dev_tol and np.max(np.abs(t * step)) < 1e-8:
            converged = True
            break
    eta = X @ beta if offset is None else X @ beta + offset
    p = expit(eta)
    score_norm = float(np.max(np.abs(X.T @ (y - p))))
    w = p * (1.0 - p)
    cov = _inverse_pd(X.T @ (X * w[:, None]))
    return beta, cov, ll, it, converged, score_norm


def _inverse_pd(a):
    c = sla.cho_factor(a)
    inv = sla.cho_solve(c, np.eye(a.shape[0]))
    return 0.5 * (inv + inv.T)


def _separation_message(beta, names):
    j = int(np.argmax(np.abs(beta)))
    return (f"coefficient {names[j]!r} reached {beta[j]:.3g}; "
            "the response appears perfectly separated")


def fit_irls(frame: ModelFrame, max_iter: int = 100, score_tol: float = 1e-8) -> FitResult:
    """Maximum-likelihood logistic regression of ``frame.response`` on ``frame.design``."""
    X, y = frame.design, frame.response
    check_rank(X, frame.column_names)
    beta, cov, ll, it, converged, score_norm = irls(
        X, y, max_iter=max_iter, score_tol=score_tol, names=frame.column_names)
    if not converged:
        raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations "
                               f"(score max-norm {score_norm:.3g})",
                               trace={"beta": beta.tolist(), "score_norm": score_norm})
    return FitResult(list(frame.column_names), beta, cov, log_likelihood=ll, iterations=it,
                     converged=True, score_norm=score_norm,
                     model="lag" if frame.has_lag else "glm")


def fit_lag(frame: ModelFrame, **kwargs) -> FitResult:
    """Fixed-effects logistic regression with the lag-1 response as a covariate."""
    if not frame.has_lag:
        raise ValueError(f"frame has no {LAG!r} column; build it with lag=True")
    return fit_irls(frame, **kwargs)
