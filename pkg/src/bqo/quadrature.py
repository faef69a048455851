"""Posterior on the objective G induced by the GP on the integrand.

The central object is :class:`QuadPosterior`, which exposes the posterior
mean ``a_n(x)`` of ``G(x)``, its variance, the integrated cross-covariances
``B(x, i)`` and the one-step standard deviation ``sigma_tilde`` of the update
``a_{n+1}(x) = a_n(x) + sigma_tilde(x, cand) Z``.
"""

from __future__ import annotations

from collections import namedtuple

import numpy as np
from scipy.special import ndtr

from .errors import (ConfigurationError, InvalidMarginalError, NumericalConsistencyError,
                     UnsupportedOperationError)
from .kernels import Matern52

DENOM_GUARD = 1e-12
DENOM_TOL = 1e-8
DUPLICATE_TOL = 1e-12


class Measure:
    """Weighting ``p`` over the environment variable.

    Use the constructors :meth:`finite`, :meth:`nodes`, :meth:`gaussian`
    and :meth:`gauss_hermite` rather than calling ``__init__`` directly.
    """

    def __init__(self, kind, points=None, weights=None, means=None, variances=None):
        self.kind = kind
        if kind in ("finite", "nodes"):
            pts = np.asarray(points, dtype=float)
            if pts.ndim == 1:
                pts = pts[:, None]
            wts = np.asarray(weights, dtype=float).ravel()
            if pts.shape[0] != wts.size or wts.size == 0:
                raise ConfigurationError("measure needs one weight per support point")
            if np.any(wts < 0) or not np.any(wts > 0) or not np.all(np.isfinite(wts)):
                raise ConfigurationError("weights must be non-negative with one positive")
            self.points, self.weights = pts, wts
            self.means = self.variances = None
        elif kind == "gaussian":
            self.means = np.atleast_1d(np.asarray(means, dtype=float))
            self.variances = np.atleast_1d(np.asarray(variances, dtype=float))
            if self.means.shape != self.variances.shape:
                raise ConfigurationError("means and variances differ in length")
            if np.any(self.variances <= 0):
                raise ConfigurationError("gaussian variances must be positive")
            self.points = self.weights = None
        else:
            raise ConfigurationError(f"unknown measure kind {kind!r}")

    @classmethod
    def finite(cls, support, weights):
        return cls("finite", points=support, weights=weights)

    @classmethod
    def nodes(cls, points, weights):
        return cls("nodes", points=points, weights=weights)

    @classmethod
    def gaussian(cls, means, variances):
        return cls("gaussian", means=means, variances=variances)

    @classmethod
    def single_atom(cls, dim=0, at=None, weight=1.0):
        at = np.zeros((1, dim)) if at is None else np.asarray(at, dtype=float).reshape(1, -1)
        return cls.finite(at, [weight])

    @classmethod
    def gauss_hermite(cls, means, variances, order):
        """Tensor-product Gauss-Hermite nodes for a Gaussian product density."""
        means = np.atleast_1d(np.asarray(means, dtype=float))
        sd = np.sqrt(np.atleast_1d(np.asarray(variances, dtype=float)))
        t, wt = np.polynomial.hermite_e.hermegauss(order)
        wt = wt / wt.sum()
        grids = np.meshgrid(*[means[i] + sd[i] * t for i in range(means.size)], indexing="ij")
        wgrids = np.meshgrid(*[wt] * means.size, indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=1)
        wts = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
        return cls.nodes(pts, wts)

    @property
    def dim(self):
        return self.means.size if self.kind == "gaussian" else self.points.shape[1]

    @property
    def mass(self):
        return 1.0 if self.kind == "gaussian" else float(self.weights.sum())

    def sample(self, rng, size):
        """Draws from ``p`` normalized to a probability distribution."""
        if self.kind == "gaussian":
            return self.means + np.sqrt(self.variances) * rng.standard_normal((size, self.dim))
        idx = rng.choice(self.weights.size, size=size, p=self.weights / self.weights.sum())
        return self.points[idx]

    def to_config(self):
        if self.kind == "gaussian":
            return {"kind": "gaussian", "means": self.means.tolist(),
                    "vars": self.variances.tolist()}
        key = "support" if self.kind == "finite" else "points"
        return {"kind": self.kind, key: self.points.tolist(), "weights": self.weights.tolist()}

    @classmethod
    def from_config(cls, cfg):
        kind = cfg.get("kind")
        try:
            if kind == "finite":
                return cls.finite(cfg["support"], cfg["weights"])
            if kind == "nodes":
                return cls.nodes(cfg["points"], cfg["weights"])
            if kind == "gaussian":
                return cls.gaussian(cfg["means"], cfg["vars"])
        except KeyError as e:
            raise ConfigurationError(f"measure of kind {kind!r} is missing field {e}")
        raise ConfigurationError(f"unknown measure kind {kind!r}")


CandidateTerms = namedtuple("CandidateTerms", "gamma v den inv_sqrt valid dgamma dden")


class QuadPosterior:
    """Posterior of ``G`` for one hyperparameter setting.

    Parameters
    ----------
    state : PosteriorState
        Fitted GP over the integrand.
    measure : Measure
        Weighting over the environment coordinates.
    """

    def __init__(self, state, measure):
        self.state = state
        self.measure = measure
        self.kernel = state.kernel
        self.theta = state.theta
        self.d = self.theta.dim_x
        self.task = self.kernel.family == "task_matern52"
        self.point_dim = self.kernel.point_dim(self.theta)
        if measure.kind == "gaussian" and self.kernel.family != "sq_exp":
            raise UnsupportedOperationError(
                "closed-form Gaussian measure needs the squared-exponential kernel; "
                "use Measure.gauss_hermite nodes instead")
        if measure.dim != self.point_dim - self.d:
            raise ConfigurationError(
                f"measure has {measure.dim} coordinates, kernel expects {self.point_dim - self.d}")
        self.mass = measure.mass
        self.scale = state.scale
        self._memo_key = None
        self._memo = None
        hist = state.history
        self._noiseless = hist.points[hist.noise_diag(self.theta) == 0.0]
        self.c0 = float(self.prior_cov_G(np.zeros((1, self.d)), np.zeros((1, self.d)))[0, 0])

    @property
    def n(self):
        return self.state.n

    # -- integrated kernel ---------------------------------------------------

    def integrated(self, X, P, grad_x=False, grad_p=False):
        """``int Sigma0((x, w), P) p(w) dw`` broadcasting ``X[..., d]`` with ``P[..., D]``.

        Returns the value and, when requested, gradients with respect to
        ``X`` (shape ``(..., d)``) and ``P`` (shape ``(..., D)``; the task
        coordinate receives a zero entry).
        """
        X = np.asarray(X, dtype=float)
        P = np.asarray(P, dtype=float)
        if self.measure.kind == "gaussian":
            return self._integrated_gaussian(X, P, grad_x, grad_p)
        return self._integrated_atoms(X, P, grad_x, grad_p)

    def _integrated_atoms(self, X, P, grad_x, grad_p):
        # r2 splits into an x part and a per-atom w part, so the atoms are
        # never paired with X explicitly
        th, d = self.theta, self.d
        atoms, wts = self.measure.points, self.measure.weights
        dx = X - P[..., :d]
        r2x = np.einsum("...i,i->...", dx * dx, th.alpha_x)
        if self.task:
            g, dg = Matern52._profile(r2x)
            tasks = np.rint(atoms[:, 0]).astype(np.intp)
            tp = np.rint(P[..., -1]).astype(np.intp)
            if tp.size and (tp.min() < 0 or tp.max() >= th.n_tasks):
                raise ConfigurationError(f"task index outside 0..{th.n_tasks - 1}")
            tw = (wts @ th.task_cov()[tasks])[tp]
            val = tw * g
            ds = 2.0 * tw * dg
        else:
            dw = atoms - P[..., None, d:]
            r2 = r2x[..., None] + np.einsum("...ji,i->...j", dw * dw, th.alpha_w)
            g, dg = self.kernel._profile(r2)
            val = th.sigma0_sq * (g @ wts)
            ds = 2.0 * th.sigma0_sq * (dg @ wts)
        if not (grad_x or grad_p):
            return val, None, None
        gxx = ds[..., None] * th.alpha_x * dx
        gp = None
        if grad_p:
            if self.task:
                tail = np.zeros(gxx.shape[:-1] + (1,))
            else:
                tail = -2.0 * th.sigma0_sq * th.alpha_w * np.einsum("...j,j,...ji->...i", dg, wts, dw)
            gp = np.concatenate([-gxx, tail], axis=-1)
        return val, (gxx if grad_x else None), gp

    def _integrated_generic(self, X, P, grad_x=False, grad_p=False):
        """Reference evaluation pairing every atom with ``X`` (used in checks)."""
        X = np.asarray(X, dtype=float)
        P = np.asarray(P, dtype=float)
        atoms, wts = self.measure.points, self.measure.weights
        J = wts.size
        Xw = np.concatenate([
            np.broadcast_to(X[..., None, :], X.shape[:-1] + (J, self.d)),
            np.broadcast_to(atoms, X.shape[:-1] + atoms.shape)], axis=-1)
        Pb = P[..., None, :]
        if not (grad_x or grad_p):
            k = self.kernel.value(self.theta, Xw, Pb)
            return k @ wts, None, None
        if self.task:
            k, dk = self.kernel.grad_x(self.theta, Xw, Pb)
        else:
            k, dk = self.kernel.grad(self.theta, Xw, Pb)
        val = k @ wts
        dx = dp = None
        if grad_x:
            dx = np.einsum("...jd,j->...d", dk[..., :self.d], wts)
        if grad_p:
            g = -np.einsum("...jd,j->...d", dk, wts)
            if self.task:
                g = np.concatenate([g, np.zeros(g.shape[:-1] + (1,))], axis=-1)
            dp = g
        return val, dx, dp

    def _integrated_gaussian(self, X, P, grad_x, grad_p):
        th, d = self.theta, self.d
        mu, s2 = self.measure.means, self.measure.variances
        aw = th.alpha_w
        dx = X - P[..., :d]
        denom = 1.0 + 2.0 * aw * s2
        dw = P[..., d:] - mu
        expo = -np.einsum("...i,i->...", dx * dx, th.alpha_x) \
               - np.einsum("...i,i->...", dw * dw, aw / denom)
        val = th.sigma0_sq * np.prod(denom) ** -0.5 * np.exp(expo)
        gx = gp = None
        if grad_x or grad_p:
            gxx = -2.0 * th.alpha_x * dx * val[..., None]
            gx = gxx if grad_x else None
            if grad_p:
                gw = -2.0 * (aw / denom) * dw * val[..., None]
                gp = np.concatenate([-gxx, gw], axis=-1)
        return val, gx, gp

    def prior_cov_G(self, X1, X2):
        """Prior covariance of ``G`` between the rows of ``X1`` and ``X2``."""
        X1 = np.atleast_2d(X1)
        X2 = np.atleast_2d(X2)
        th = self.theta
        if self.measure.kind == "gaussian":
            dx = X1[:, None, :] - X2[None, :, :]
            fac = np.prod(1.0 + 4.0 * th.alpha_w * self.measure.variances) ** -0.5
            return th.sigma0_sq * fac * np.exp(-np.einsum("abi,i->ab", dx * dx, th.alpha_x))
        atoms, wts = self.measure.points, self.measure.weights
        J = wts.size
        m1, m2 = X1.shape[0], X2.shape[0]
        P1 = np.concatenate([np.repeat(X1, J, axis=0), np.tile(atoms, (m1, 1))], axis=1)
        P2 = np.concatenate([np.repeat(X2, J, axis=0), np.tile(atoms, (m2, 1))], axis=1)
        K = self.kernel.cov(th, P1, P2).reshape(m1, J, m2, J)
        return np.einsum("ajbk,j,k->ab", K, wts, wts)

    # -- quantities against the history ----------------------------------------

    def B_hist(self, X, grad=False):
        """``B(x, i)`` for every history index, memoized on the last ``X``."""
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=float)
        key = (X.shape, X.tobytes())
        if self._memo_key == key and (self._memo[1] is not None or not grad):
            return self._memo
        hist = self.state.history.points
        if self.n == 0:
            B = np.zeros((X.shape[0], 0))
            dB = np.zeros((X.shape[0], 0, self.d)) if grad else None
        else:
            B, dB, _ = self.integrated(X[:, None, :], hist[None, :, :], grad_x=grad)
        self._memo_key, self._memo = key, (B, dB)
        return B, dB

    def compute_B(self, X, P):
        """``B`` between decisions ``X`` (m, d) and points ``P`` (k, D) as an (m, k) matrix."""
        X = np.atleast_2d(X)
        P = np.atleast_2d(P)
        return self.integrated(X[:, None, :], P[None, :, :])[0]

    def compute_B_grad(self, X, P):
        """Gradients of ``B(x, p)`` for matched rows: (d/dx, d/dp)."""
        _, gx, gp = self.integrated(np.atleast_2d(X), np.atleast_2d(P), grad_x=True, grad_p=True)
        return gx, gp

    def a_n(self, X):
        """Posterior mean of ``G`` at the rows of ``X``."""
        B, _ = self.B_hist(X)
        return self.theta.mu0 * self.mass + B @ self.state.resid_solve

    def a_n_grad(self, X):
        _, dB = self.B_hist(X, grad=True)
        return np.einsum("mnd,n->md", dB, self.state.resid_solve)

    def a_n_value_grad(self, X):
        B, dB = self.B_hist(X, grad=True)
        r = self.state.resid_solve
        return self.theta.mu0 * self.mass + B @ r, np.einsum("mnd,n->md", dB, r)

    def var_G(self, X):
        """Posterior variance of ``G`` at the rows of ``X``."""
        B, _ = self.B_hist(X)
        v = np.full(B.shape[0], self.c0)
        if self.n:
            V = self.state.half_solve(B.T)
            v = v - np.sum(V * V, axis=0)
        return self.state.clamp_var(v)

    def var_G_grad(self, X):
        B, dB = self.B_hist(X, grad=True)
        if self.n == 0:
            return np.zeros((B.shape[0], self.d))
        S = self.state.solve(B.T)
        return -2.0 * np.einsum("mnd,nm->md", dB, S)

    def cov_G(self, X1, X2):
        C = self.prior_cov_G(X1, X2)
        if self.n == 0:
            return C
        B1 = self.B_hist(X1)[0]
        V1 = self.state.half_solve(B1.T)
        V2 = self.state.half_solve(self.B_hist(X2)[0].T)
        return C - V1.T @ V2

    # -- one-step update ---------------------------------------------------------

    def candidate_terms(self, C, lam, grad=False):
        """Quantities that depend on the candidate only.

        ``den`` is ``Sigma0(c, c) - gamma^T A^{-1} gamma + lambda``; rows that
        fall in the guard band or duplicate a noiseless observation are
        marked invalid and have ``inv_sqrt = 0``.
        """
        C = np.atleast_2d(np.asarray(C, dtype=float))
        k = C.shape[0]
        lam = np.broadcast_to(np.asarray(lam, dtype=float), (k,))
        hist = self.state.history.points
        prior = self.kernel.diag(self.theta, C)
        if self.n:
            gamma = self.kernel.cov(self.theta, C, hist)
            v = self.state.solve(gamma.T)
            den = prior - np.sum(gamma.T * v, axis=0) + lam
        else:
            gamma = np.zeros((k, 0))
            v = np.zeros((0, k))
            den = prior + lam
        if np.any(den < -DENOM_TOL * self.scale):
            raise NumericalConsistencyError(f"update variance {den.min():.3g} is negative")
        valid = den >= DENOM_GUARD * self.scale
        if self._noiseless.shape[0]:
            dup = np.abs(C[:, None, :] - self._noiseless[None, :, :]).max(axis=-1).min(axis=1)
            valid &= ~((lam == 0) & (dup <= DUPLICATE_TOL))
        inv_sqrt = np.where(valid, 1.0 / np.sqrt(np.where(valid, den, 1.0)), 0.0)
        dgamma = dden = None
        if grad:
            D = C.shape[1]
            if self.n:
                if self.task:
                    _, dg = self.kernel.grad_x(self.theta, C[:, None, :], hist[None, :, :])
                    dg = np.concatenate([dg, np.zeros(dg.shape[:-1] + (1,))], axis=-1)
                else:
                    _, dg = self.kernel.grad(self.theta, C[:, None, :], hist[None, :, :])
                dgamma = dg
                dden = -2.0 * np.einsum("knD,nk->kD", dg, v)
            else:
                dgamma = np.zeros((k, 0, D))
                dden = np.zeros((k, D))
        return CandidateTerms(gamma, v, den, inv_sqrt, valid, dgamma, dden)

    def sigma_tilde(self, X, C, lam, grad_x=False, terms=None):
        """``sigma_tilde`` on the grid ``X`` (L, d) for candidates ``C`` (k, D).

        Returns an (L, k) matrix and, if requested, the (L, k, d) gradient
        with respect to ``X``.
        """
        X = np.atleast_2d(X)
        C = np.atleast_2d(C)
        t = self.candidate_terms(C, lam) if terms is None else terms
        Bx, dBx, _ = self.integrated(X[:, None, :], C[None, :, :], grad_x=grad_x)
        Bh, dBh = self.B_hist(X, grad=grad_x)
        num = Bx - Bh @ t.v
        sig = num * t.inv_sqrt
        if not grad_x:
            return sig
        dnum = dBx - np.einsum("lnd,nk->lkd", dBh, t.v)
        return sig, dnum * t.inv_sqrt[None, :, None]

    def sigma_tilde_pairs(self, X, C, lam, idx=None, grad_x=False, grad_c=False, terms=None):
        """``sigma_tilde`` at matched rows ``(X[i], C[idx[i]])``.

        Returns ``(values, grad_x, grad_c)`` with unrequested gradients set
        to ``None``.  ``grad_c`` has one entry per candidate coordinate.
        """
        X = np.atleast_2d(X)
        C = np.atleast_2d(C)
        m = X.shape[0]
        if idx is None:
            idx = np.arange(m) if C.shape[0] == m else np.zeros(m, dtype=np.intp)
        t = self.candidate_terms(C, lam, grad=grad_c) if terms is None else terms
        Cr = C[idx]
        Bx, dBx, dBp = self.integrated(X, Cr, grad_x=grad_x, grad_p=grad_c)
        Bh, dBh = self.B_hist(X, grad=grad_x)
        vr = t.v[:, idx].T
        num = Bx - np.sum(Bh * vr, axis=1)
        s = t.inv_sqrt[idx]
        sig = num * s
        gx = gc = None
        if grad_x:
            gx = (dBx - np.einsum("mnd,mn->md", dBh, vr)) * s[:, None]
        if grad_c:
            if self.n:
                BA = self.state.solve(Bh.T).T
                dnum = dBp - np.einsum("mn,mnD->mD", BA, t.dgamma[idx])
            else:
                dnum = dBp
            gc = dnum * s[:, None] - 0.5 * (num * s ** 3)[:, None] * t.dden[idx]
        return sig, gx, gc


_U_EPS = np.finfo(float).eps


def gaussian_reparameterize(inverse_cdfs, check_points=64):
    """Rewrite an independent-marginal measure as a standard Gaussian one.

    Parameters
    ----------
    inverse_cdfs : sequence of callables
        ``F_i^{-1}`` for each environment coordinate.

    Returns
    -------
    measure : Measure
        Standard normal product measure.
    transform : callable
        Maps Gaussian coordinates ``y`` (..., p) to ``w`` with
        ``w_i = F_i^{-1}(Phi(y_i))``, so that integrating ``F(x, transform(y))``
        against the returned measure equals the original integral.
    """
    inverse_cdfs = list(inverse_cdfs)
    u = np.linspace(0.01, 0.99, check_points)
    for i, icdf in enumerate(inverse_cdfs):
        vals = np.asarray(icdf(u), dtype=float)
        if not np.all(np.isfinite(vals)) or np.any(np.diff(vals) < 0):
            raise InvalidMarginalError(f"inverse CDF {i} is not monotone non-decreasing")
    p = len(inverse_cdfs)

    def transform(y):
        y = np.asarray(y, dtype=float)
        if y.shape[-1] != p:
            raise ConfigurationError(f"expected {p} Gaussian coordinates")
        # keep u strictly inside (0, 1) so unbounded marginals stay finite in the tails
        u = np.clip(ndtr(y), _U_EPS, 1.0 - _U_EPS)
        return np.stack([inverse_cdfs[i](u[..., i]) for i in range(p)], axis=-1)

    return Measure.gaussian(np.zeros(p), np.ones(p)), transform
