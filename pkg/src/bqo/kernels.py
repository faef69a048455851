"""Covariance functions over concatenated ``(x, w)`` points.

A point is a row vector ``[x_1..x_d, w_1..w_p]``.  For the task kernel the
environment part is a single column holding a 0-based task index.  All
kernels are stationary in the continuous coordinates, so the derivative with
respect to the second argument is minus the derivative with respect to the
first one; downstream code relies on this.

Every evaluation broadcasts: ``a`` and ``b`` may be any arrays whose leading
shapes broadcast and whose last axis is the point dimension.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, UnsupportedOperationError

SQRT5 = np.sqrt(5.0)
FAMILIES = ("sq_exp", "matern52", "task_matern52")


@dataclass(frozen=True)
class HyperParams:
    """Kernel and mean hyperparameters.

    Parameters
    ----------
    sigma0_sq : float
        Signal variance (unused by the task kernel, whose scale lives in
        ``task_chol``).
    alpha_x, alpha_w : array_like
        Inverse squared length scales for the decision and environment
        coordinates.  ``alpha_w`` is empty for the task kernel.
    task_chol : array_like or None
        Lower-triangular factor ``L`` of the task covariance ``L L^T``.
    mu0 : float
        Constant prior mean.
    noise_var : float or None
        Homogeneous observation noise, used when observations carry no
        per-point variance.
    """

    sigma0_sq: float = 1.0
    alpha_x: np.ndarray = field(default_factory=lambda: np.ones(1))
    alpha_w: np.ndarray = field(default_factory=lambda: np.zeros(0))
    task_chol: np.ndarray | None = None
    mu0: float = 0.0
    noise_var: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "sigma0_sq", float(self.sigma0_sq))
        object.__setattr__(self, "alpha_x", np.atleast_1d(np.asarray(self.alpha_x, dtype=float)))
        object.__setattr__(self, "alpha_w", np.atleast_1d(np.asarray(self.alpha_w, dtype=float)))
        object.__setattr__(self, "mu0", float(self.mu0))
        if self.task_chol is not None:
            L = np.tril(np.atleast_2d(np.asarray(self.task_chol, dtype=float)))
            object.__setattr__(self, "task_chol", L)
        if self.noise_var is not None:
            object.__setattr__(self, "noise_var", float(self.noise_var))
        if self.sigma0_sq <= 0 or np.any(self.alpha_x <= 0) or np.any(self.alpha_w < 0):
            raise ConfigurationError("variances and length-scale weights must be positive")
        if self.noise_var is not None and self.noise_var < 0:
            raise ConfigurationError("noise_var must be non-negative")
        if self.task_chol is not None:
            L = self.task_chol
            if L.shape[0] != L.shape[1] or np.any(np.diag(L) <= 0):
                raise ConfigurationError("task_chol must be square with positive diagonal")

    @property
    def dim_x(self):
        return self.alpha_x.size

    @property
    def dim_w(self):
        return self.alpha_w.size

    @property
    def n_tasks(self):
        return 0 if self.task_chol is None else self.task_chol.shape[0]

    def task_cov(self):
        L = self.task_chol
        return L @ L.T

    def prior_scale(self):
        """Largest prior variance, the reference scale for jitter and guards."""
        if self.task_chol is not None:
            return float(np.max(np.diag(self.task_cov())))
        return self.sigma0_sq

    def replace(self, **kw):
        return replace(self, **kw)


class Kernel:
    """Base class; subclasses implement a stationary profile."""

    family = None

    def point_dim(self, theta):
        raise NotImplementedError

    def _check(self, theta, a, b):
        D = self.point_dim(theta)
        if a.shape[-1] != D or b.shape[-1] != D:
            raise ConfigurationError(
                f"{self.family}: points have {a.shape[-1]}/{b.shape[-1]} coordinates, "
                f"hyperparameters imply {D}")

    def __call__(self, theta, a, b):
        return self.value(theta, a, b)

    def cov(self, theta, X1, X2):
        """Gram matrix between the rows of ``X1`` and ``X2``."""
        X1 = np.asarray(X1, dtype=float)
        X2 = np.asarray(X2, dtype=float)
        return self.value(theta, X1[:, None, :], X2[None, :, :])

    def diag(self, theta, X):
        X = np.asarray(X, dtype=float)
        return self.value(theta, X, X)


class _Stationary(Kernel):
    """``sigma0_sq * g(r2)`` with ``r2 = sum_i alpha_i (a_i - b_i)^2``."""

    def point_dim(self, theta):
        if theta.task_chol is not None:
            raise ConfigurationError(f"{self.family} kernel takes no task factor")
        return theta.dim_x + theta.dim_w

    @staticmethod
    def _alpha(theta):
        return np.concatenate([theta.alpha_x, theta.alpha_w])

    def _profile(self, r2):
        """Return ``g(r2)`` and ``dg/dr2`` for unit variance."""
        raise NotImplementedError

    def value(self, theta, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        self._check(theta, a, b)
        diff = a - b
        r2 = np.einsum("...i,i->...", diff * diff, self._alpha(theta))
        g, _ = self._profile(r2)
        return theta.sigma0_sq * g

    def grad(self, theta, a, b):
        """Value and gradient with respect to every coordinate of ``a``."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        self._check(theta, a, b)
        alpha = self._alpha(theta)
        diff = a - b
        r2 = np.einsum("...i,i->...", diff * diff, alpha)
        g, dg = self._profile(r2)
        k = theta.sigma0_sq * g
        dk = (2.0 * theta.sigma0_sq * dg)[..., None] * alpha * diff
        return k, dk

    def grad_x(self, theta, a, b):
        k, dk = self.grad(theta, a, b)
        return k, dk[..., :theta.dim_x]

    def hyper_grad(self, theta, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        self._check(theta, a, b)
        diff2 = (a - b) ** 2
        r2 = np.einsum("...i,i->...", diff2, self._alpha(theta))
        g, dg = self._profile(r2)
        s = theta.sigma0_sq * dg
        d = theta.dim_x
        return {
            "sigma0_sq": g,
            "alpha_x": np.moveaxis(s[..., None] * diff2[..., :d], -1, 0),
            "alpha_w": np.moveaxis(s[..., None] * diff2[..., d:], -1, 0),
        }


class SquaredExponential(_Stationary):
    family = "sq_exp"

    @staticmethod
    def _profile(r2):
        g = np.exp(-r2)
        return g, -g


class Matern52(_Stationary):
    family = "matern52"

    @staticmethod
    def _profile(r2):
        r = np.sqrt(np.maximum(r2, 0.0))
        e = np.exp(-SQRT5 * r)
        g = (1.0 + SQRT5 * r + (5.0 / 3.0) * r2) * e
        dg = -(5.0 / 6.0) * (1.0 + SQRT5 * r) * e
        return g, dg


class TaskMatern52(Kernel):
    """Product of a task covariance ``L L^T`` and a unit Matern 5/2 over x."""

    family = "task_matern52"

    def point_dim(self, theta):
        if theta.task_chol is None:
            raise ConfigurationError("task kernel needs task_chol")
        if theta.dim_w and np.any(theta.alpha_w):
            raise ConfigurationError("task kernel has no continuous environment coordinates")
        return theta.dim_x + 1

    @staticmethod
    def _tasks(theta, a, b):
        m = theta.n_tasks
        ta = np.rint(a[..., -1]).astype(np.intp)
        tb = np.rint(b[..., -1]).astype(np.intp)
        if ta.size and (ta.min() < 0 or ta.max() >= m) or tb.size and (tb.min() < 0 or tb.max() >= m):
            raise ConfigurationError(f"task index outside 0..{m - 1}")
        return ta, tb

    def _parts(self, theta, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        self._check(theta, a, b)
        d = theta.dim_x
        diff = a[..., :d] - b[..., :d]
        r2 = np.einsum("...i,i->...", diff * diff, theta.alpha_x)
        g, dg = Matern52._profile(r2)
        ta, tb = self._tasks(theta, a, b)
        T = theta.task_cov()[ta, tb]
        return diff, g, dg, T, ta, tb

    def value(self, theta, a, b):
        _, g, _, T, _, _ = self._parts(theta, a, b)
        return T * g

    def grad(self, theta, a, b):
        raise UnsupportedOperationError("task index is not differentiable; use grad_x")

    def grad_x(self, theta, a, b):
        diff, g, dg, T, _, _ = self._parts(theta, a, b)
        dk = (2.0 * T * dg)[..., None] * theta.alpha_x * diff
        return T * g, dk

    def hyper_grad(self, theta, a, b):
        diff, g, dg, T, ta, tb = self._parts(theta, a, b)
        L = theta.task_chol
        m = L.shape[0]
        out_shape = np.broadcast(ta, tb).shape
        ta = np.broadcast_to(ta, out_shape)
        tb = np.broadcast_to(tb, out_shape)
        g = np.broadcast_to(g, out_shape)
        # d(L L^T)[s, t] / dL[i, j] = [s == i] L[t, j] + [t == i] L[s, j]
        dchol = np.zeros((m, m) + out_shape)
        for i in range(m):
            for j in range(i + 1):
                dchol[i, j] = g * ((ta == i) * L[tb, j] + (tb == i) * L[ta, j])
        return {
            "alpha_x": np.moveaxis((T * dg)[..., None] * diff * diff, -1, 0),
            "task_chol": dchol,
        }


_KERNELS = {
    "sq_exp": SquaredExponential(),
    "matern52": Matern52(),
    "task_matern52": TaskMatern52(),
}


def get_kernel(family):
    try:
        return _KERNELS[family]
    except KeyError:
        raise ConfigurationError(f"unknown kernel family {family!r}; expected one of {FAMILIES}")


def kernel_eval(theta, a, b, family):
    """Prior covariance between points ``a`` and ``b``."""
    return get_kernel(family).value(theta, a, b)


def kernel_grad(theta, a, b, family, wrt="all"):
    """Gradient of the covariance with respect to the coordinates of ``a``.

    ``wrt="x"`` restricts to the decision coordinates.  Requesting the full
    gradient of the task kernel raises ``UnsupportedOperationError``.
    """
    k = get_kernel(family)
    if wrt == "x":
        return k.grad_x(theta, a, b)[1]
    return k.grad(theta, a, b)[1]


def kernel_hyper_grad(theta, a, b, family):
    """Derivatives of the covariance with respect to each hyperparameter group."""
    return get_kernel(family).hyper_grad(theta, a, b)


def default_theta(family, dim_x, dim_w=0, n_tasks=0, noise_var=None):
    """Unit-scale hyperparameters matching a problem's dimensions."""
    if family == "task_matern52":
        return HyperParams(alpha_x=np.ones(dim_x), alpha_w=np.zeros(0),
                           task_chol=np.eye(n_tasks), noise_var=noise_var)
    return HyperParams(alpha_x=np.ones(dim_x), alpha_w=np.ones(dim_w), noise_var=noise_var)
