"""Gaussian-process posterior over the integrand and its marginal likelihood."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import ConfigurationError, IllConditionedError, NumericalConsistencyError
from .kernels import HyperParams, get_kernel

JITTER_START = 1e-10
JITTER_MAX = 1e-4
NEG_VAR_TOL = 1e-8
LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class History:
    """Observed points, values and optional per-observation noise variances.

    ``noise_vars`` is ``None`` when the simulator reports no variance; the
    homogeneous ``HyperParams.noise_var`` is used instead.
    """

    points: np.ndarray
    values: np.ndarray
    noise_vars: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1) if pts.size else pts.reshape(0, 0)
        vals = np.asarray(self.values, dtype=float).ravel()
        if pts.shape[0] != vals.size:
            raise ConfigurationError("points and values differ in length")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "values", vals)
        if self.noise_vars is not None:
            lam = np.asarray(self.noise_vars, dtype=float).ravel()
            if lam.size != vals.size:
                raise ConfigurationError("noise_vars and values differ in length")
            if not np.all(np.isfinite(lam)) or np.any(lam < 0):
                raise ConfigurationError("noise variances must be finite and non-negative")
            object.__setattr__(self, "noise_vars", lam)

    @classmethod
    def empty(cls, dim, with_noise=False):
        return cls(np.zeros((0, dim)), np.zeros(0), np.zeros(0) if with_noise else None)

    def __len__(self):
        return self.values.size

    @property
    def dim(self):
        return self.points.shape[1]

    def append(self, point, value, noise_var=None):
        pts = np.vstack([self.points, np.asarray(point, dtype=float).reshape(1, -1)])
        vals = np.append(self.values, float(value))
        lam = None
        if self.noise_vars is not None:
            if noise_var is None:
                raise ConfigurationError("history tracks noise variances; one is required")
            lam = np.append(self.noise_vars, float(noise_var))
        return History(pts, vals, lam)

    def noise_diag(self, theta):
        if self.noise_vars is not None:
            return self.noise_vars
        if theta.noise_var is not None:
            return np.full(len(self), theta.noise_var)
        return np.zeros(len(self))


def _cholesky(A, scale):
    """Cholesky with escalating diagonal jitter; returns (L, jitter)."""
    jitter = JITTER_START * scale
    n = A.shape[0]
    eye = np.eye(n)
    while True:
        try:
            return np.linalg.cholesky(A + jitter * eye), jitter
        except np.linalg.LinAlgError:
            if jitter >= JITTER_MAX * scale * (1 - 1e-12):
                d = np.diag(A)
                with np.errstate(all="ignore"):
                    cond = np.linalg.cond(A)
                raise IllConditionedError(
                    f"Cholesky failed at jitter {jitter:.3g} (cond {cond:.3g})",
                    jitter=jitter, min_diag=float(d.min()), cond=float(cond))
            jitter *= 10.0


class PosteriorState:
    """Factorized posterior of the integrand given a history.

    Attributes
    ----------
    chol : ndarray
        Lower Cholesky factor of ``A_n`` (Gram + noise + jitter).
    resid_solve : ndarray
        ``A_n^{-1} (y - mu0)``.
    """

    def __init__(self, kernel, history, theta, chol, resid_solve, jitter):
        self.kernel = kernel
        self.history = history
        self.theta = theta
        self.chol = chol
        self.resid_solve = resid_solve
        self.jitter = jitter
        self.scale = theta.prior_scale()

    @property
    def n(self):
        return len(self.history)

    def solve(self, B):
        """``A_n^{-1} B`` for a vector or a matrix with n rows."""
        return cho_solve((self.chol, True), B)

    def half_solve(self, B):
        """``L^{-1} B`` so that ``||L^{-1} b||^2 = b^T A_n^{-1} b``."""
        return solve_triangular(self.chol, B, lower=True)

    def cross_cov(self, Q):
        return self.kernel.cov(self.theta, Q, self.history.points)

    def clamp_var(self, v):
        tol = NEG_VAR_TOL * self.scale
        if np.any(v < -tol):
            raise NumericalConsistencyError(f"posterior variance {np.min(v):.3g} is negative")
        return np.maximum(v, 0.0)


def gram(kernel, history, theta):
    """``A_n`` without jitter: prior Gram matrix plus observation noise."""
    K = kernel.cov(theta, history.points, history.points)
    return K + np.diag(history.noise_diag(theta))


def fit(kernel, history, theta):
    """Factorize ``A_n`` and solve against the residuals.

    Parameters
    ----------
    kernel : Kernel
    history : History
    theta : HyperParams
    """
    if isinstance(kernel, str):
        kernel = get_kernel(kernel)
    n = len(history)
    if n == 0:
        return PosteriorState(kernel, history, theta, np.zeros((0, 0)), np.zeros(0), 0.0)
    A = gram(kernel, history, theta)
    L, jitter = _cholesky(A, theta.prior_scale())
    r = history.values - theta.mu0
    alpha = cho_solve((L, True), r)
    return PosteriorState(kernel, history, theta, L, alpha, jitter)


def posterior_mean(state, Q):
    """Posterior mean of the integrand at the rows of ``Q``."""
    Q = np.atleast_2d(Q)
    if state.n == 0:
        return np.full(Q.shape[0], state.theta.mu0)
    return state.theta.mu0 + state.cross_cov(Q) @ state.resid_solve


def posterior_mean_grad(state, Q):
    """Gradient of the posterior mean with respect to the query coordinates.

    For the task kernel only the decision coordinates are differentiated.
    """
    Q = np.atleast_2d(Q)
    k = state.kernel
    width = state.theta.dim_x if k.family == "task_matern52" else Q.shape[1]
    if state.n == 0:
        return np.zeros((Q.shape[0], width))
    P = state.history.points
    if k.family == "task_matern52":
        _, dK = k.grad_x(state.theta, Q[:, None, :], P[None, :, :])
    else:
        _, dK = k.grad(state.theta, Q[:, None, :], P[None, :, :])
    return np.einsum("qnd,n->qd", dK, state.resid_solve)


def posterior_cov(state, Q1, Q2):
    """Posterior covariance matrix between the rows of ``Q1`` and ``Q2``."""
    Q1 = np.atleast_2d(Q1)
    Q2 = np.atleast_2d(Q2)
    K = state.kernel.cov(state.theta, Q1, Q2)
    if state.n == 0:
        return K
    V1 = state.half_solve(state.cross_cov(Q1).T)
    V2 = state.half_solve(state.cross_cov(Q2).T)
    return K - V1.T @ V2


def posterior_var(state, Q):
    """Posterior variance at the rows of ``Q`` (clamped at zero)."""
    Q = np.atleast_2d(Q)
    v = state.kernel.diag(state.theta, Q)
    if state.n:
        V = state.half_solve(state.cross_cov(Q).T)
        v = v - np.sum(V * V, axis=0)
    return state.clamp_var(v)


def log_marginal_likelihood(kernel, history, theta, grad=False):
    """Log evidence ``log p(y | theta)``, optionally with its gradient.

    The gradient is a dict keyed by hyperparameter group (natural
    parametrization): ``sigma0_sq``, ``alpha_x``, ``alpha_w``, ``task_chol``,
    ``mu0`` and ``noise_var``.
    """
    if isinstance(kernel, str):
        kernel = get_kernel(kernel)
    n = len(history)
    if n == 0:
        return (0.0, _zero_grad(theta)) if grad else 0.0
    state = fit(kernel, history, theta)
    L = state.chol
    r = history.values - theta.mu0
    a = state.resid_solve
    value = -0.5 * r @ a - np.sum(np.log(np.diag(L))) - 0.5 * n * LOG_2PI
    if not grad:
        return value
    W = np.outer(a, a) - cho_solve((L, True), np.eye(n))
    P = history.points
    hg = kernel.hyper_grad(theta, P[:, None, :], P[None, :, :])
    g = {}
    for key, dA in hg.items():
        g[key] = 0.5 * np.einsum("ij,...ij->...", W, dA)
    g["mu0"] = float(np.sum(a))
    if history.noise_vars is None and theta.noise_var is not None:
        g["noise_var"] = 0.5 * float(np.trace(W))
    return value, g


def _zero_grad(theta):
    g = {"mu0": 0.0, "alpha_x": np.zeros(theta.dim_x)}
    if theta.task_chol is None:
        g["sigma0_sq"] = 0.0
        g["alpha_w"] = np.zeros(theta.dim_w)
    else:
        g["task_chol"] = np.zeros_like(theta.task_chol)
    if theta.noise_var is not None:
        g["noise_var"] = 0.0
    return g
