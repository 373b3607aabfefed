"""Marginal logistic regression by generalized estimating equations.

Working covariance per cluster is ``alpha * A^1/2 R A^1/2`` with ``A`` the
Bernoulli variances and ``R`` an independence, AR(1) or banded Toeplitz
correlation. Clusters are the contiguous subject x item blocks of a
:class:`~gazelab.design.ModelFrame`; clusters of equal length are processed
as one stacked array.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg as sla
from scipy.special import expit

from .design import ModelFrame
from .errors import (ConvergenceError, DegreesOfFreedomError, DomainError, SingularityError)
from .glm import FitResult, check_rank, irls

logger = logging.getLogger(__name__)

KINDS = ("independence", "ar1", "toeplitz_band")
PHI_CLAMP = 0.999
_KIND_ALIASES = {"ind": "independence", "independence": "independence", "ar1": "ar1",
                 "ma": "toeplitz_band", "toeplitz_band": "toeplitz_band"}


@dataclass(frozen=True)
class WorkingCorrelation:
    kind: str = "independence"
    phi: float = 0.0
    bandwidth: int = 25
    ridge: float = 0.0
    estimate_phi: bool = False

    def __post_init__(self):
        kind = _KIND_ALIASES.get(self.kind)
        if kind is None:
            raise DomainError(f"unknown working correlation {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if not -1.0 < self.phi < 1.0:
            raise DomainError(f"|phi| must be < 1, got {self.phi}")
        if self.ridge < 0:
            raise DomainError(f"ridge must be nonnegative, got {self.ridge}")
        if self.bandwidth < 1:
            raise DomainError(f"bandwidth must be >= 1, got {self.bandwidth}")
        if self.estimate_phi and kind != "ar1":
            raise DomainError(f"phi can only be estimated for ar1, not {kind}")


@dataclass
class ClusterBlock:
    cluster_key: tuple
    rows: slice
    A_diag: np.ndarray
    residuals: np.ndarray

    @property
    def T(self):
        return len(self.residuals)


@dataclass
class PhiEstimate:
    value: float
    raw: float
    clamped: bool

    def __float__(self):
        return self.value


def _nominal_correlation(spec: WorkingCorrelation, T: int, phi=None) -> np.ndarray:
    phi = spec.phi if phi is None else phi
    lag = np.abs(np.subtract.outer(np.arange(T), np.arange(T)))
    if spec.kind == "independence":
        return np.eye(T)
    if spec.kind == "ar1":
        return phi ** lag.astype(float)
    R = np.where(lag <= spec.bandwidth, phi, 0.0)
    np.fill_diagonal(R, 1.0)
    return R


def regularized_correlation(spec: WorkingCorrelation, T: int, phi=None):
    """Ridged working correlation and the Frobenius size of any eigenvalue floor.

    Returns
    -------
    R : (T, T) array
    deviation : float
        ``||R_floored - R_ridged||_F``; zero when no flooring was needed.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    phi = spec.phi if phi is None else phi
    if not -1.0 < phi < 1.0:
        raise DomainError(f"|phi| must be < 1, got {phi}")
    R = _nominal_correlation(spec, T, phi)
    if spec.ridge:
        R = R + spec.ridge * np.eye(T)
    if spec.kind == "independence":
        return R, 0.0
    evals, evecs = np.linalg.eigh(R)
    if evals[0] > 0:
        return R, 0.0
    floor = spec.ridge if spec.ridge > 0 else 1e-8
    fixed = (evecs * np.maximum(evals, floor)) @ evecs.T
    fixed = 0.5 * (fixed + fixed.T)
    return fixed, float(np.linalg.norm(fixed - R))


def build_correlation(spec: WorkingCorrelation, T: int) -> np.ndarray:
    R, deviation = regularized_correlation(spec, T)
    if deviation:
        warnings.warn(f"{spec.kind} correlation (phi={spec.phi}, T={T}) was not positive "
                      f"definite; eigenvalues floored (Frobenius change {deviation:.3g})",
                      stacklevel=2)
    return R


def ar1_inverse_apply(phi: float, z: np.ndarray) -> np.ndarray:
    """Multiply by the inverse AR(1) correlation along axis 1 in O(T).

    The inverse is tridiagonal: diagonal ``(1, 1+phi^2, ..., 1+phi^2, 1)``,
    off-diagonals ``-phi``, all over ``1 - phi^2``.
    """
    T = z.shape[1]
    if T == 1:
        return z.copy()
    out = (1.0 + phi * phi) * z
    out[:, 0] = z[:, 0]
    out[:, -1] = z[:, -1]
    out[:, 1:] -= phi * z[:, :-1]
    out[:, :-1] -= phi * z[:, 1:]
    return out / (1.0 - phi * phi)


def make_blocks(frame: ModelFrame, beta) -> list[ClusterBlock]:
    p = expit(frame.design @ beta)
    a = p * (1.0 - p)
    r = (frame.response - p) / np.sqrt(a)
    bounds = frame.cluster_bounds()
    return [ClusterBlock(frame.cluster_labels[c], slice(bounds[c], bounds[c + 1]),
                         a[bounds[c]:bounds[c + 1]], r[bounds[c]:bounds[c + 1]])
            for c in range(frame.n_clusters)]


def estimate_phi_ar1(blocks: Sequence[ClusterBlock]) -> PhiEstimate:
    """Lag-1 moment estimator from Pearson residuals, pooled over clusters."""
    num = 0.0
    den = 0
    for b in blocks:
        r = np.asarray(b.residuals, dtype=float)
        num += float(np.dot(r[1:], r[:-1]))
        den += len(r) - 1
    if den == 0:
        raise DegreesOfFreedomError("every cluster has length 1; phi is undefined")
    return _clamp(num / den)


def _clamp(raw):
    value = min(max(raw, -PHI_CLAMP), PHI_CLAMP)
    return PhiEstimate(value, raw, value != raw)


def estimate_scale(blocks: Sequence[ClusterBlock], q: int) -> float:
    n = sum(b.T for b in blocks)
    if n <= q:
        raise DegreesOfFreedomError(f"{n} observations leave no residual degrees of "
                                    f"freedom for {q} parameters")
    return sum(float(np.dot(b.residuals, b.residuals)) for b in blocks) / (n - q)


def sandwich_covariance(residuals: Sequence[np.ndarray], D: Sequence[np.ndarray],
                        V: Sequence[np.ndarray]) -> np.ndarray:
    """Robust covariance ``B^-1 M B^-1`` from per-cluster pieces.

    Parameters
    ----------
    residuals : per-cluster ``y - p`` vectors
    D : per-cluster (T, q) derivative matrices ``d p / d beta``
    V : per-cluster (T, T) working covariances
    """
    q = D[0].shape[1]
    B = np.zeros((q, q))
    scores = []
    for e, d, v in zip(residuals, D, V):
        vinv_d = np.linalg.solve(v, d)
        B += d.T @ vinv_d
        scores.append(vinv_d.T @ e)
    return _sandwich(B, np.array(scores))


def _sandwich(B, scores):
    n_clusters, q = scores.shape
    if n_clusters < q:
        warnings.warn(f"only {n_clusters} cluster(s) for {q} parameters; the sandwich "
                      f"meat has rank <= {n_clusters}", stacklevel=3)
    try:
        Binv = sla.inv(B)
    except (np.linalg.LinAlgError, sla.LinAlgError):
        raise SingularityError("sandwich bread matrix is singular") from None
    M = scores.T @ scores
    cov = Binv @ M @ Binv.T
    return 0.5 * (cov + cov.T)


class _Groups:
    """Clusters bucketed by length, with row-index matrices for gathering."""

    def __init__(self, frame: ModelFrame):
        bounds = frame.cluster_bounds()
        lengths = np.diff(bounds)
        self.lengths = lengths
        self.buckets = []
        for T in np.unique(lengths):
            ids = np.flatnonzero(lengths == T)
            rows = bounds[ids][:, None] + np.arange(T)[None, :]
            self.buckets.append((int(T), ids, rows))


class _CorrelationOperator:
    """Applies R(T)^-1 for every cluster length, caching dense factors."""

    def __init__(self, spec: WorkingCorrelation, phi: float):
        self.spec = spec
        self.phi = phi
        self.analytic = spec.kind == "ar1" and spec.ridge == 0
        self._cache = {}
        self.deviation = 0.0

    def apply(self, T, z):
        if self.spec.kind == "independence" and self.spec.ridge == 0:
            return z
        if self.analytic:
            return ar1_inverse_apply(self.phi, z)
        if T not in self._cache:
            R, dev = regularized_correlation(self.spec, T, self.phi)
            self.deviation = max(self.deviation, dev)
            self._cache[T] = sla.cho_solve(sla.cho_factor(R), np.eye(T))
        Rinv = self._cache[T]
        if z.ndim == 2:
            return z @ Rinv
        return np.matmul(Rinv, z)


def gee_fit(frame: ModelFrame, spec: WorkingCorrelation, max_iter: int = 200,
            score_tol: float = 1e-8, beta0=None) -> FitResult:
    """Solve the quasi-score equations by Fisher scoring.

    When ``spec.estimate_phi`` is set, phi is re-estimated from the Pearson
    residuals before every scoring step; the scale ``alpha`` always is.
    """
    X, y = frame.design, frame.response
    n, q = X.shape
    check_rank(X, frame.column_names)
    groups = _Groups(frame)
    if beta0 is None:
        beta = irls(X, y, names=frame.column_names)[0]
    else:
        beta = np.array(beta0, dtype=float)

    phi = spec.phi
    phi_est = None
    op = _CorrelationOperator(spec, phi)
    converged = False
    history = []
    # damped scoring: a step that raises the scale-free score norm, or drives a
    # fitted probability to 0/1, is halved before it is accepted
    step, beta_prev, prev_merit, t = None, None, math.inf, 1.0
    for it in range(max_iter + 1):
        p = expit(X @ beta)
        a = p * (1.0 - p)
        degenerate = bool(np.any(a <= 1e-300))
        if not degenerate:
            sa = np.sqrt(a)
            r = (y - p) / sa
            if spec.estimate_phi:
                phi_est = _phi_from_residuals(r, groups)
                if phi_est.value != op.phi:
                    op = _CorrelationOperator(spec, phi_est.value)
                phi = phi_est.value
            alpha = float(r @ r) / (n - q) if n > q else np.nan
            if not np.isfinite(alpha):
                raise DegreesOfFreedomError(f"{n} observations for {q} parameters")
            if alpha <= 0:
                raise SingularityError("all residuals are zero; the scale is zero")
            B, scores = _bread_and_scores(X, sa, r, groups, op, alpha, frame.n_clusters)
            U = scores.sum(axis=0)
            merit = alpha * float(np.linalg.norm(U))
        if step is not None and (degenerate or merit > prev_merit) and t > 2.0 ** -20:
            t *= 0.5
            beta = beta_prev + t * step
            continue
        if degenerate:
            c = int(frame.cluster[np.argmax(a <= 1e-300)])
            raise SingularityError(f"working covariance of cluster {frame.cluster_labels[c]} "
                                   "is singular (fitted probability 0 or 1)")
        unorm = float(np.max(np.abs(U)))
        history.append(unorm)
        if unorm < score_tol:
            converged = True
            break
        if it == max_iter:
            break
        try:
            step = sla.solve(B, U, assume_a="pos")
        except (np.linalg.LinAlgError, sla.LinAlgError):
            raise SingularityError("GEE information matrix is singular") from None
        beta_prev, prev_merit, t = beta, merit, 1.0
        beta = beta + step
    if not converged:
        raise ConvergenceError(
            f"GEE did not converge in {max_iter} iterations (score max-norm {history[-1]:.3g})",
            trace={"beta": beta.tolist(), "score_norm": history[-1], "history": history})

    cov_model = sla.inv(B)
    cov_model = 0.5 * (cov_model + cov_model.T)
    with warnings.catch_warnings():
        if frame.n_clusters >= q:
            warnings.simplefilter("ignore")
        cov_robust = _sandwich(B, scores)
    moment = _phi_from_residuals(r, groups) if groups.lengths.max() > 1 else None
    diagnostics = {
        "kind": spec.kind, "ridge": spec.ridge, "bandwidth": spec.bandwidth,
        "phi_mode": "estimated" if spec.estimate_phi else "fixed",
        "phi_moment": None if moment is None else moment.value,
        "phi_moment_raw": None if moment is None else moment.raw,
        "phi_clamped": bool(phi_est.clamped) if phi_est is not None else False,
        "eigen_floor_deviation": op.deviation,
        "score_history": history,
    }
    if diagnostics["phi_clamped"]:
        warnings.warn(f"estimated phi {phi_est.raw:.4f} clamped to {phi_est.value}",
                      stacklevel=2)
    corr = None if spec.kind == "independence" else phi
    return FitResult(list(frame.column_names), beta, cov_model, cov_robust, dispersion=alpha,
                     correlation=corr, iterations=it, converged=True, score_norm=history[-1],
                     model=f"gee-{spec.kind}", diagnostics=diagnostics)


def _phi_from_residuals(r, groups: _Groups) -> PhiEstimate:
    num = 0.0
    den = 0
    for T, ids, rows in groups.buckets:
        if T < 2:
            continue
        rr = r[rows]
        num += float(np.sum(rr[:, 1:] * rr[:, :-1]))
        den += len(ids) * (T - 1)
    if den == 0:
        raise DegreesOfFreedomError("every cluster has length 1; phi is undefined")
    return _clamp(num / den)


def _bread_and_scores(X, sa, r, groups: _Groups, op: _CorrelationOperator, alpha, n_clusters):
    q = X.shape[1]
    Z = X * sa[:, None]
    B = np.zeros((q, q))
    scores = np.empty((n_clusters, q))
    for T, ids, rows in groups.buckets:
        Zt = Z[rows]
        rt = r[rows]
        Rinv_Z = op.apply(T, Zt)
        B += np.einsum("ctq,ctk->qk", Zt, Rinv_Z)
        scores[ids] = np.einsum("ctq,ct->cq", Rinv_Z, rt)
    return B / alpha, scores / alpha
