"""Stratified Cox regression on (start, stop] counting-process records.

Within a stratum the risk set at an event time ``t`` is every record with
``start < t <= stop``. Risk-set sums are computed as (sum over stop >= t)
minus (sum over start >= t) from reverse cumulative sums, so one evaluation
costs O(n log n) regardless of how many records are at risk.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
import scipy.linalg as sla

from .errors import ConvergenceError, DivergenceError, SingularityError, StratumError
from .glm import check_rank
from .rle import FROM_TARGET, TO_TARGET

DIVERGENCE_BOUND = 15.0
STRATA = (FROM_TARGET, TO_TARGET)


@dataclass
class CoxData:
    start: np.ndarray
    stop: np.ndarray
    event: np.ndarray
    strata: np.ndarray
    X: np.ndarray
    names: list
    clusters: np.ndarray | None = None
    stratum_labels: list = field(default_factory=list)

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float)
        self.stop = np.asarray(self.stop, dtype=float)
        self.event = np.asarray(self.event, dtype=int)
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        if self.X.shape[0] != len(self.start):
            self.X = self.X.T
        strata = np.asarray(self.strata)
        if not self.stratum_labels:
            self.stratum_labels = sorted(set(strata.tolist()), key=str)
        code = {s: i for i, s in enumerate(self.stratum_labels)}
        self.strata = np.array([code[s] for s in strata.tolist()], dtype=int)
        if self.clusters is None:
            self.clusters = np.arange(len(self.start))
        else:
            _, self.clusters = np.unique(np.asarray(self.clusters, dtype=object).astype(str),
                                         return_inverse=True)
        if np.any(self.stop <= self.start):
            bad = int(np.argmax(self.stop <= self.start))
            raise ValueError(f"record {bad}: stop {self.stop[bad]} <= start {self.start[bad]}")
        if not np.all(np.isin(self.event, (0, 1))):
            raise ValueError("event indicators must be 0 or 1")

    @classmethod
    def from_records(cls, records, names: Sequence[str] | None = None) -> "CoxData":
        records = list(records)
        if not records:
            raise StratumError("no survival records")
        if names is None:
            names = list(records[0].covariates)
        X = np.array([[rec.covariates[n] for n in names] for rec in records], dtype=float)
        return cls(
            start=np.array([r.start for r in records]),
            stop=np.array([r.stop for r in records]),
            event=np.array([r.event for r in records]),
            strata=np.array([r.stratum for r in records], dtype=object),
            X=X.reshape(len(records), len(names)),
            names=list(names),
            clusters=np.array(["\x1f".join(map(str, r.cluster_key)) for r in records],
                              dtype=object),
            stratum_labels=[s for s in STRATA if any(r.stratum == s for r in records)],
        )

    def with_columns(self, X, names) -> "CoxData":
        out = CoxData.__new__(CoxData)
        out.__dict__.update(self.__dict__)
        out.X = np.asarray(X, dtype=float)
        out.names = list(names)
        return out

    def scaled_times(self, factor) -> "CoxData":
        out = CoxData.__new__(CoxData)
        out.__dict__.update(self.__dict__)
        out.start = self.start * factor
        out.stop = self.stop * factor
        return out


@dataclass
class HazardFit:
    names: list
    params: np.ndarray
    covariance_robust: np.ndarray
    covariance_model: np.ndarray
    n_events: dict
    log_partial_likelihood: float
    iterations: int
    converged: bool
    ties: str = "efron"
    score_norm: float = math.nan
    loglik_history: list = field(default_factory=list)

    @property
    def coefficients(self) -> pd.Series:
        return pd.Series(self.params, index=self.names, name="estimate")

    def std_errors(self, robust: bool = True) -> pd.Series:
        cov = self.covariance_robust if robust else self.covariance_model
        return pd.Series(np.sqrt(np.clip(np.diag(cov), 0, None)), index=self.names, name="se")

    def __getitem__(self, name):
        return self.params[self.names.index(name)]


@dataclass(frozen=True)
class TotalEffect:
    estimate: float
    se: float


class _Stratum:
    """Event-time bookkeeping for one stratum; independent of beta."""

    def __init__(self, data: CoxData, idx: np.ndarray):
        self.idx = idx
        start, stop, event = data.start[idx], data.stop[idx], data.event[idx]
        self.X = data.X[idx]
        self.event = event
        self.stop_order = np.argsort(stop, kind="stable")
        self.start_order = np.argsort(start, kind="stable")
        self.stop_sorted = stop[self.stop_order]
        self.start_sorted = start[self.start_order]
        self.times = np.unique(stop[event == 1])
        K = len(self.times)
        self.n_events = int(event.sum())
        # per-record event-time index (only meaningful where event == 1)
        self.time_idx = np.searchsorted(self.times, stop)
        ev = np.flatnonzero(event == 1)
        self.ev = ev
        self.d = np.bincount(self.time_idx[ev], minlength=K)
        self.at_stop = np.searchsorted(self.stop_sorted, self.times, side="left")
        self.at_start = np.searchsorted(self.start_sorted, self.times, side="left")
        # event-time window (k_lo, k_hi] each record is at risk for
        self.k_lo = np.searchsorted(self.times, start, side="right")
        self.k_hi = np.searchsorted(self.times, stop, side="right")
        # Efron slots: one per event, grouped by time
        self.slot_time = np.repeat(np.arange(K), self.d)
        first = np.concatenate(([0], np.cumsum(self.d)[:-1]))
        self.slot_frac = (np.arange(len(self.slot_time)) - first[self.slot_time]) \
            / self.d[self.slot_time] if K else np.zeros(0)


def _risk_sums(st: _Stratum, values):
    """Sum of ``values`` over each event time's risk set (leading axis = records)."""
    by_stop = values[st.stop_order]
    by_start = values[st.start_order]
    tail_stop = np.concatenate((np.cumsum(by_stop[::-1], axis=0)[::-1],
                                np.zeros((1,) + values.shape[1:])))
    tail_start = np.concatenate((np.cumsum(by_start[::-1], axis=0)[::-1],
                                 np.zeros((1,) + values.shape[1:])))
    return tail_stop[st.at_stop] - tail_start[st.at_start]


def _tied_sums(st: _Stratum, values):
    K = len(st.times)
    out = np.zeros((K,) + values.shape[1:])
    np.add.at(out, st.time_idx[st.ev], values[st.ev])
    return out


def _stratum_terms(st: _Stratum, beta, ties, need_hess=True, need_resid=False):
    X = st.X
    eta = X @ beta
    shift = eta.max() if eta.size else 0.0
    r = np.exp(eta - shift)
    rx = r[:, None] * X
    S0 = _risk_sums(st, r)
    S1 = _risk_sums(st, rx)
    D0 = _tied_sums(st, r)
    D1 = _tied_sums(st, rx)
    c = st.slot_frac if ties == "efron" else np.zeros_like(st.slot_frac)
    k = st.slot_time
    denom = S0[k] - c * D0[k]
    num1 = S1[k] - c[:, None] * D1[k]
    xbar = num1 / denom[:, None]
    ll = float(np.sum(eta[st.ev] - shift) - np.sum(np.log(denom)))
    grad = X[st.ev].sum(axis=0) - xbar.sum(axis=0)
    hess = None
    if need_hess:
        rxx = rx[:, :, None] * X[:, None, :]
        S2 = _risk_sums(st, rxx)
        D2 = _tied_sums(st, rxx)
        num2 = S2[k] - c[:, None, None] * D2[k]
        hess = np.einsum("sij->ij", num2 / denom[:, None, None]) - xbar.T @ xbar
    resid = None
    if need_resid:
        K = len(st.times)
        inv = 1.0 / denom
        A = np.bincount(k, weights=inv, minlength=K)
        Ac = np.bincount(k, weights=c * inv, minlength=K)
        Bk = np.zeros((K, X.shape[1]))
        Bc = np.zeros_like(Bk)
        mean_xbar = np.zeros_like(Bk)
        np.add.at(Bk, k, xbar * inv[:, None])
        np.add.at(Bc, k, xbar * (c * inv)[:, None])
        np.add.at(mean_xbar, k, xbar)
        mean_xbar /= np.maximum(st.d, 1)[:, None]
        cumA = np.concatenate(([0.0], np.cumsum(A)))
        cumB = np.concatenate((np.zeros((1, X.shape[1])), np.cumsum(Bk, axis=0)))
        a_sum = cumA[st.k_hi] - cumA[st.k_lo]
        b_sum = cumB[st.k_hi] - cumB[st.k_lo]
        ev = st.event == 1
        ti = np.where(ev, st.time_idx, 0)
        if K:
            a_sum = a_sum - ev * Ac[ti]
            b_sum = b_sum - ev[:, None] * Bc[ti]
            own = np.where(ev[:, None], X - mean_xbar[ti], 0.0)
        else:
            own = np.zeros_like(X)
        resid = own - r[:, None] * (X * a_sum[:, None] - b_sum)
    return ll, grad, hess, resid


def _strata(data: CoxData):
    return [_Stratum(data, np.flatnonzero(data.strata == s))
            for s in range(len(data.stratum_labels))]


def partial_likelihood(data: CoxData, beta, ties="efron", strata=None):
    """Log partial likelihood, its gradient and the observed information.

    Returns
    -------
    loglik : float
    gradient : (p,) array
    information : (p, p) array, the negative Hessian
    """
    beta = np.asarray(beta, dtype=float)
    p = data.X.shape[1]
    ll, g, h = 0.0, np.zeros(p), np.zeros((p, p))
    for st in strata or _strata(data):
        if st.n_events == 0:
            continue
        l_s, g_s, h_s, _ = _stratum_terms(st, beta, ties)
        ll += l_s
        g += g_s
        h += h_s
    return ll, g, h


def score_residuals(data: CoxData, beta, ties="efron", strata=None) -> np.ndarray:
    """Per-record score contributions; they sum to the gradient."""
    beta = np.asarray(beta, dtype=float)
    out = np.zeros_like(data.X)
    for st in strata or _strata(data):
        if st.n_events == 0:
            continue
        out[st.idx] = _stratum_terms(st, beta, ties, need_hess=False, need_resid=True)[3]
    return out


def fit_cox(records, ties: str = "efron", names: Sequence[str] | None = None,
            max_iter: int = 50, tol: float = 1e-8) -> HazardFit:
    """Maximize the stratified partial likelihood by Newton-Raphson.

    ``records`` is a sequence of :class:`~gazelab.rle.SurvivalRecord` or a
    prepared :class:`CoxData`. Robust covariance sums score residuals within
    each cluster.
    """
    if ties not in ("efron", "breslow"):
        raise ValueError(f"unknown tie method {ties!r}")
    data = records if isinstance(records, CoxData) else CoxData.from_records(records, names)
    strata = _strata(data)
    n_events = {}
    for label, st in zip(data.stratum_labels, strata):
        if st.n_events == 0:
            raise StratumError(f"stratum {label!r} has no events")
        n_events[label] = st.n_events
    check_rank(data.X, data.names)

    beta = np.zeros(data.X.shape[1])
    ll, g, info = partial_likelihood(data, beta, ties, strata)
    history = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        gnorm = float(np.max(np.abs(g)))
        if gnorm < tol:
            converged = True
            it -= 1
            break
        try:
            step = sla.solve(info, g, assume_a="pos")
        except (np.linalg.LinAlgError, sla.LinAlgError):
            raise SingularityError("partial-likelihood information is singular") from None
        t = 1.0
        for _ in range(40):
            cand = beta + t * step
            ll_new, g_new, info_new = partial_likelihood(data, cand, ties, strata)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        beta, ll, g, info = cand, ll_new, g_new, info_new
        history.append(ll)
        if np.max(np.abs(beta)) > DIVERGENCE_BOUND:
            j = int(np.argmax(np.abs(beta)))
            raise DivergenceError(f"coefficient {data.names[j]!r} reached {beta[j]:.3g}; "
                                  "the partial likelihood appears monotone")
    if not converged:
        raise ConvergenceError(f"Cox fit did not converge in {max_iter} iterations",
                               trace={"beta": beta.tolist(), "gradient": g.tolist()})
    cov = sla.inv(info)
    cov = 0.5 * (cov + cov.T)
    resid = score_residuals(data, beta, ties, strata)
    robust = cluster_sandwich(cov, resid, data.clusters)
    return HazardFit(list(data.names), beta, robust, cov, n_events, ll, it, True, ties,
                     float(np.max(np.abs(g))), history)


def cluster_sandwich(cov, resid, clusters):
    U = np.zeros((int(clusters.max()) + 1, resid.shape[1]))
    np.add.at(U, clusters, resid)
    out = cov @ (U.T @ U) @ cov
    return 0.5 * (out + out.T)


def total_effect(fit: HazardFit, main: str, interaction: str) -> TotalEffect:
    """Main plus interaction coefficient with its robust standard error."""
    for name in (main, interaction):
        if name not in fit.names:
            raise KeyError(f"{name!r} is not a coefficient of this fit")
    i, j = fit.names.index(main), fit.names.index(interaction)
    V = fit.covariance_robust
    var = V[i, i] + V[j, j] + 2.0 * V[i, j]
    return TotalEffect(float(fit.params[i] + fit.params[j]), math.sqrt(max(var, 0.0)))
