"""Logistic regression with crossed subject and item random intercepts.

The marginal likelihood is approximated by Laplace's method in the
standardized random effects ``b`` (``u = sigma_u * b_u``, ``v = sigma_v * b_v``):

    L(beta, sigma) = loglik(y | eta(b_hat)) - |b_hat|^2 / 2 - logdet(H) / 2,
    H = I + S Z' W Z S,

with ``S = diag(sigma)``. This form stays finite at ``sigma = 0``, where it
reduces to the ordinary logistic log-likelihood. ``H`` has diagonal
subject and item blocks coupled by the subject x item weight table, so it
is factored through the Schur complement of the larger diagonal block.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize
from scipy.special import expit

from .design import ModelFrame
from .errors import ConvergenceError, DomainError
from .glm import FitResult, check_rank, irls

logger = logging.getLogger(__name__)

LOG_SIGMA_BOUNDS = (-10.0, 3.0)
BOUNDARY_VARIANCE = 1e-8


@dataclass
class RandomEffectsSpec:
    """Starting (or fixed) variance components."""

    subject_levels: int = 0
    item_levels: int = 0
    sigma_u2: float = 0.25
    sigma_v2: float = 0.25

    def __post_init__(self):
        if self.sigma_u2 < 0 or self.sigma_v2 < 0:
            raise DomainError("random-effect variances must be nonnegative")


class _ArrowheadFactor:
    """Factor of ``[[diag(a_u), K], [K', diag(a_v)]]`` via a Schur complement."""

    def __init__(self, a_u, a_v, K):
        self.n_u = len(a_u)
        self.swap = len(a_u) < len(a_v)
        if self.swap:
            a1, a2, B = a_v, a_u, K.T
        else:
            a1, a2, B = a_u, a_v, K
        self.a1, self.a2, self.B = a1, a2, B
        self.P = B / a1[:, None]
        schur = np.diag(a2) - B.T @ self.P
        self.chol = sla.cho_factor(schur, lower=True)
        self.logdet = float(np.sum(np.log(a1)) + 2.0 * np.sum(np.log(np.diag(self.chol[0]))))

    def solve(self, rhs):
        n_u = self.n_u
        r_u, r_v = rhs[:n_u], rhs[n_u:]
        r1, r2 = (r_v, r_u) if self.swap else (r_u, r_v)
        x2 = sla.cho_solve(self.chol, r2 - self.P.T @ r1)
        x1 = r1 / self.a1 - self.P @ x2
        x_u, x_v = (x2, x1) if self.swap else (x1, x2)
        return np.concatenate((x_u, x_v))

    def inverse_blocks(self):
        """Diagonals of the two inverse blocks and the full off-diagonal block."""
        sinv = sla.cho_solve(self.chol, np.eye(len(self.a2)))
        PS = self.P @ sinv
        d1 = 1.0 / self.a1 + np.einsum("ij,ij->i", PS, self.P)
        d2 = np.diag(sinv).copy()
        off = -PS
        if self.swap:
            return d2, d1, off.T
        return d1, d2, off


class _LaplaceProblem:
    def __init__(self, frame: ModelFrame):
        self.X = frame.design
        self.y = frame.response
        self.subj = frame.subject
        self.item = frame.item
        self.n_s = len(frame.subject_labels)
        self.n_i = len(frame.item_labels)
        self.pair = self.subj * self.n_i + self.item
        self.q = self.X.shape[1]
        self.b = np.zeros(self.n_s + self.n_i)
        self.inner_iterations = 0

    def _zt(self, v):
        return np.concatenate((np.bincount(self.subj, v, self.n_s),
                               np.bincount(self.item, v, self.n_i)))

    def _zs(self, x, su, sv):
        return su * x[self.subj] + sv * x[self.n_s + self.item]

    def _factor(self, w, su, sv):
        C = np.bincount(self.pair, w, self.n_s * self.n_i).reshape(self.n_s, self.n_i)
        a_u = 1.0 + su * su * C.sum(axis=1)
        a_v = 1.0 + sv * sv * C.sum(axis=0)
        return _ArrowheadFactor(a_u, a_v, su * sv * C), C

    def mode(self, beta, su, sv, tol=1e-10, max_iter=100):
        """Newton iterations for the conditional mode of the standardized effects."""
        eta0 = self.X @ beta
        s_vec = np.concatenate((np.full(self.n_s, su), np.full(self.n_i, sv)))
        b = self.b.copy()

        def joint(bb):
            eta = eta0 + self._zs(bb, su, sv)
            return float(np.sum(self.y * eta - np.logaddexp(0.0, eta)) - 0.5 * bb @ bb), eta

        f, eta = joint(b)
        for it in range(max_iter):
            p = expit(eta)
            grad = s_vec * self._zt(self.y - p) - b
            if np.max(np.abs(grad)) < tol:
                break
            factor, _ = self._factor(p * (1.0 - p), su, sv)
            step = factor.solve(grad)
            t = 1.0
            for _ in range(40):
                cand = b + t * step
                f_new, eta_new = joint(cand)
                if f_new >= f - 1e-13 * abs(f):
                    break
                t *= 0.5
            b, f, eta = cand, f_new, eta_new
        else:
            raise ConvergenceError("random-effect mode did not converge",
                                   trace={"beta": beta.tolist(), "sigma": [su, sv]})
        self.inner_iterations += it
        self.b = b
        return b, eta, s_vec

    def evaluate(self, beta, su, sv, gradient=True):
        """Laplace log-likelihood and its gradient in (beta, sigma_u, sigma_v)."""
        b, eta, s_vec = self.mode(beta, su, sv)
        p = expit(eta)
        w = p * (1.0 - p)
        factor, C = self._factor(w, su, sv)
        ll = float(np.sum(self.y * eta - np.logaddexp(0.0, eta)))
        value = ll - 0.5 * float(b @ b) - 0.5 * factor.logdet
        if not gradient:
            return value, None
        e = self.y - p
        h_u, h_v, h_uv = factor.inverse_blocks()
        lev = su * su * h_u[self.subj] + sv * sv * h_v[self.item] \
            + 2.0 * su * sv * h_uv[self.subj, self.item]
        g = w * (1.0 - 2.0 * p) * lev
        a = factor.solve(s_vec * self._zt(g))
        d_beta = self.X.T @ (e - 0.5 * g + 0.5 * w * self._zs(a, su, sv))

        zte = self._zt(e)
        d_u_rows = C.sum(axis=1)
        d_v_rows = C.sum(axis=0)
        n_s = self.n_s
        grads = []
        for block in ("u", "v"):
            if block == "u":
                bb = np.concatenate((b[:n_s], np.zeros(self.n_i)))
                trace = float(np.sum(h_u * su * d_u_rows) + sv * np.sum(h_uv * C))
            else:
                bb = np.concatenate((np.zeros(n_s), b[n_s:]))
                trace = float(np.sum(h_v * sv * d_v_rows) + su * np.sum(h_uv * C))
            z_b = bb[self.subj] + bb[n_s + self.item]
            direct = float(zte @ bb)
            mask = np.concatenate((np.full(n_s, block == "u"), np.full(self.n_i, block == "v")))
            inner = np.where(mask, zte, 0.0) - s_vec * self._zt(w * z_b)
            grads.append(direct - 0.5 * (2.0 * trace + float(g @ z_b) + float(a @ inner)))
        return value, np.concatenate((d_beta, grads))


def laplace_objective(frame: ModelFrame, beta, sigma_u, sigma_v, gradient=True):
    """Laplace-approximated marginal log-likelihood (and gradient) at one point.

    The gradient is with respect to ``(beta, log sigma_u, log sigma_v)``.
    """
    prob = _LaplaceProblem(frame)
    value, grad = prob.evaluate(np.asarray(beta, float), sigma_u, sigma_v, gradient)
    if grad is not None:
        grad = grad.copy()
        grad[-2] *= sigma_u
        grad[-1] *= sigma_v
    return value, grad


def fit_glmm_laplace(frame: ModelFrame, spec: RandomEffectsSpec | None = None,
                     fix_variances: bool = False, max_iter: int = 500,
                     grad_tol: float = 1e-5) -> FitResult:
    """Fit fixed effects and crossed random-intercept variances.

    Parameters
    ----------
    frame : ModelFrame
        Needs at least two subjects and two items.
    spec : RandomEffectsSpec, optional
        Starting variances; with ``fix_variances`` they are held fixed and
        only the fixed effects are estimated.
    grad_tol : float
        Required max-norm of the outer gradient at the returned optimum,
        over parameters not held at a bound.
    """
    spec = spec or RandomEffectsSpec()
    n_s, n_i = len(frame.subject_labels), len(frame.item_labels)
    if n_s < 2 or n_i < 2:
        raise DomainError(f"need >= 2 subjects and >= 2 items, got {n_s} and {n_i}")
    check_rank(frame.design, frame.column_names)
    prob = _LaplaceProblem(frame)
    q = prob.q
    beta0 = irls(frame.design, frame.response, names=frame.column_names)[0]
    trace = []

    if fix_variances:
        su, sv = math.sqrt(spec.sigma_u2), math.sqrt(spec.sigma_v2)

        def fun(theta):
            value, grad = prob.evaluate(theta, su, sv)
            trace.append(-value)
            return -value, -grad[:q]

        theta0 = beta0
        bounds = None
        free = np.ones(q, bool)
    else:
        def unpack(theta):
            return theta[:q], math.exp(theta[q]), math.exp(theta[q + 1])

        def fun(theta):
            beta, su, sv = unpack(theta)
            value, grad = prob.evaluate(beta, su, sv)
            grad = grad.copy()
            grad[q] *= su
            grad[q + 1] *= sv
            trace.append(-value)
            return -value, -grad

        lo = LOG_SIGMA_BOUNDS[0]
        theta0 = np.concatenate((beta0, 0.5 * np.log(np.maximum(
            [spec.sigma_u2, spec.sigma_v2], math.exp(2 * lo) * 4))))
        bounds = [(None, None)] * q + [LOG_SIGMA_BOUNDS] * 2

    res = minimize(fun, theta0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": max_iter, "ftol": 1e-15, "gtol": grad_tol / 10})
    theta = res.x.copy()
    if bounds is not None:
        # a variance this small is numerically the boundary; the log-sigma curvature
        # there is ~sigma^2 and would wreck the Newton polish
        tiny = theta[q:] < 0.5 * math.log(BOUNDARY_VARIANCE)
        theta[q:][tiny] = LOG_SIGMA_BOUNDS[0]
    value, grad = fun(theta)

    # Newton polish on the interior parameters; L-BFGS-B stalls short of tight gradients
    hess = None
    for _ in range(20):
        free = _free_mask(theta, grad, bounds, grad_tol)
        if np.max(np.abs(grad[free]), initial=0.0) < grad_tol and hess is not None:
            break
        hess = _fd_hessian(fun, theta)
        hf = hess[np.ix_(free, free)]
        try:
            step = -sla.solve(hf, grad[free], assume_a="pos")
        except (np.linalg.LinAlgError, sla.LinAlgError):
            break
        t = 1.0
        for _ in range(30):
            cand = theta.copy()
            cand[free] += t * step
            if bounds is not None:
                cand[q:] = np.clip(cand[q:], *LOG_SIGMA_BOUNDS)
            v_new, g_new = fun(cand)
            if v_new <= value + 1e-12 * abs(value):
                break
            t *= 0.5
        theta, value, grad = cand, v_new, g_new

    free = _free_mask(theta, grad, bounds, grad_tol)
    gnorm = float(np.max(np.abs(grad[free]), initial=0.0))
    if gnorm > grad_tol:
        raise ConvergenceError(f"Laplace fit stopped with gradient max-norm {gnorm:.3g}",
                               trace={"theta": theta.tolist(), "objective": trace[-20:],
                                      "message": str(res.message)})
    if hess is None:
        hess = _fd_hessian(fun, theta)
    cov_all = np.full_like(hess, np.nan)
    hf = hess[np.ix_(free, free)]
    cov_free = sla.inv(hf)
    cov_all[np.ix_(free, free)] = 0.5 * (cov_free + cov_free.T)
    beta = theta[:q]

    if fix_variances:
        var_u, var_v = spec.sigma_u2, spec.sigma_v2
    else:
        var_u, var_v = math.exp(2 * theta[q]), math.exp(2 * theta[q + 1])
    boundary = {"subject": var_u < BOUNDARY_VARIANCE, "item": var_v < BOUNDARY_VARIANCE}
    return FitResult(
        list(frame.column_names), beta, cov_all[:q, :q],
        variance_components={"subject": var_u, "item": var_v},
        log_likelihood=-value, iterations=int(res.nit), converged=True, score_norm=gnorm,
        model="glmm-lag" if frame.has_lag else "glmm",
        diagnostics={"boundary": boundary, "fixed_variances": fix_variances,
                     "evaluations": len(trace), "inner_iterations": prob.inner_iterations,
                     "theta_covariance": cov_all.tolist()},
    )


def _free_mask(theta, grad, bounds, tol=0.0):
    free = np.ones(len(theta), bool)
    if bounds is None:
        return free
    for j, bd in enumerate(bounds):
        lo, hi = bd
        if lo is not None and theta[j] <= lo + 1e-9 and grad[j] > -tol:
            free[j] = False
        if hi is not None and theta[j] >= hi - 1e-9 and grad[j] < tol:
            free[j] = False
    return free


def _fd_hessian(fun, theta, h=1e-5):
    """Central differences of the analytic gradient, symmetrized."""
    k = len(theta)
    H = np.empty((k, k))
    for j in range(k):
        e = np.zeros(k)
        e[j] = h
        H[:, j] = (fun(theta + e)[1] - fun(theta - e)[1]) / (2 * h)
    return 0.5 * (H + H.T)
