"""Hyperparameter inference: priors, slice sampling and MAP/MLE estimation.

Hyperparameters are handled as an unconstrained vector ``u``: positive
quantities are log-transformed, the diagonal of the task Cholesky factor is
softplus-mapped, and the prior mean is left as is.  Priors are stated as
densities on ``u``; a log-normal prior on a positive parameter is a normal
density on its logarithm.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from .errors import (BQOError, ConfigurationError, OptimizationFailure, SamplerStuckError)
from .gp import log_marginal_likelihood
from .kernels import HyperParams, get_kernel

LOG_GROUPS = ("sigma0_sq", "alpha_x", "alpha_w", "noise_var")
BOUNDS = {
    "sigma0_sq": (-12.0, 12.0),
    "alpha_x": (-12.0, 14.0),
    "alpha_w": (-12.0, 14.0),
    "noise_var": (-20.0, 8.0),
    "mu0": (-1e6, 1e6),
    "task_chol": (-12.0, 12.0),
}


def _softplus(u):
    return np.logaddexp(0.0, u)


def _softplus_inv(y):
    return y + np.log(-np.expm1(-y))


class HyperPrior:
    """Per-group prior specification.

    Each group maps to one of ``("lognormal", mean, sd)`` (normal on the log
    value), ``("normal", mean, sd)`` (on the unconstrained value), ``("flat",)``
    or ``("fixed",)`` (held at the template value).
    """

    def __init__(self, specs=None):
        self.specs = dict(specs or {})
        for key, spec in self.specs.items():
            if spec[0] not in ("lognormal", "normal", "flat", "fixed"):
                raise ConfigurationError(f"unknown prior {spec[0]!r} for {key}")

    @classmethod
    def default(cls, **overrides):
        specs = {"sigma0_sq": ("lognormal", 0.0, 3.0), "alpha_x": ("lognormal", 0.0, 3.0),
                 "alpha_w": ("lognormal", 0.0, 3.0), "noise_var": ("lognormal", 0.0, 3.0),
                 "task_chol": ("normal", 0.0, 3.0), "mu0": ("flat",)}
        specs.update(overrides)
        return cls(specs)

    @classmethod
    def flat(cls, **overrides):
        specs = {k: ("flat",) for k in BOUNDS}
        specs.update(overrides)
        return cls(specs)

    def get(self, group):
        return self.specs.get(group, ("flat",))

    @classmethod
    def from_config(cls, cfg):
        base = cfg.get("base", "default")
        groups = {k: tuple(v) for k, v in cfg.items() if k != "base"}
        return cls.flat(**groups) if base == "flat" else cls.default(**groups)


class ParamLayout:
    """Map between ``HyperParams`` and the free unconstrained vector."""

    def __init__(self, template, prior):
        self.template = template
        self.prior = prior
        self.task = template.task_chol is not None
        groups = []
        if not self.task:
            groups.append(("sigma0_sq", 1))
        groups.append(("alpha_x", template.dim_x))
        if not self.task and template.dim_w:
            groups.append(("alpha_w", template.dim_w))
        if self.task:
            m = template.n_tasks
            groups.append(("task_chol", m * (m + 1) // 2))
        groups.append(("mu0", 1))
        if template.noise_var is not None:
            groups.append(("noise_var", 1))
        self.groups = [(g, n) for g, n in groups if prior.get(g)[0] != "fixed"]
        self.size = sum(n for _, n in self.groups)
        if self.task:
            self._tril = np.tril_indices(template.n_tasks)
        lo, hi = [], []
        for g, n in self.groups:
            lo += [BOUNDS[g][0]] * n
            hi += [BOUNDS[g][1]] * n
        self.lower = np.array(lo)
        self.upper = np.array(hi)

    def _chol_diag_mask(self):
        r, c = self._tril
        return r == c

    def pack(self, theta):
        out = []
        for g, _ in self.groups:
            if g in LOG_GROUPS:
                out.append(np.log(np.atleast_1d(getattr(theta, g))))
            elif g == "mu0":
                out.append([theta.mu0])
            else:
                vals = theta.task_chol[self._tril]
                diag = self._chol_diag_mask()
                vals = np.where(diag, _softplus_inv(np.where(diag, vals, 1.0)), vals)
                out.append(vals)
        return np.concatenate(out) if out else np.zeros(0)

    def unpack(self, u):
        kw = {}
        pos = 0
        for g, n in self.groups:
            seg = u[pos:pos + n]
            pos += n
            if g in LOG_GROUPS:
                val = np.exp(seg)
                kw[g] = float(val[0]) if g in ("sigma0_sq", "noise_var") else val
            elif g == "mu0":
                kw[g] = float(seg[0])
            else:
                m = self.template.n_tasks
                L = np.zeros((m, m))
                diag = self._chol_diag_mask()
                L[self._tril] = np.where(diag, _softplus(seg), seg)
                kw[g] = L
        return self.template.replace(**kw)

    def chain_grad(self, u, grad):
        """Gradient with respect to ``u`` from natural-parameter gradients."""
        out = np.zeros(self.size)
        pos = 0
        for g, n in self.groups:
            seg = u[pos:pos + n]
            if g in LOG_GROUPS:
                out[pos:pos + n] = np.exp(seg) * np.atleast_1d(grad[g])
            elif g == "mu0":
                out[pos] = grad["mu0"]
            else:
                gl = grad["task_chol"][self._tril]
                diag = self._chol_diag_mask()
                out[pos:pos + n] = np.where(diag, expit(seg) * gl, gl)
            pos += n
        return out

    def log_prior(self, u):
        val = 0.0
        grad = np.zeros(self.size)
        pos = 0
        for g, n in self.groups:
            spec = self.prior.get(g)
            seg = u[pos:pos + n]
            if spec[0] in ("lognormal", "normal"):
                mean, sd = spec[1], spec[2]
                val += np.sum(-0.5 * ((seg - mean) / sd) ** 2 - np.log(sd * np.sqrt(2 * np.pi)))
                grad[pos:pos + n] = -(seg - mean) / sd ** 2
            pos += n
        return val, grad

    def proper(self):
        return all(self.prior.get(g)[0] in ("lognormal", "normal") for g, _ in self.groups)

    def draw_start(self, rng, history):
        """Random starting vector: prior draws where proper, else heuristics."""
        u = np.empty(self.size)
        pos = 0
        for g, n in self.groups:
            spec = self.prior.get(g)
            if g == "mu0":
                y = history.values
                u[pos] = (np.mean(y) if y.size else 0.0) + (rng.normal() * np.std(y) if y.size > 1 else 0.0)
            elif spec[0] in ("lognormal", "normal"):
                u[pos:pos + n] = spec[1] + min(spec[2], 2.0) * rng.standard_normal(n)
            else:
                u[pos:pos + n] = rng.uniform(-3.0, 3.0, n)
            pos += n
        return np.clip(u, self.lower, self.upper)


def log_posterior(kernel, history, layout, u, grad=False):
    """Log marginal likelihood plus log prior at the unconstrained vector ``u``."""
    if np.any(u < layout.lower) or np.any(u > layout.upper):
        return (-np.inf, np.zeros(layout.size)) if grad else -np.inf
    try:
        theta = layout.unpack(u)
        if grad:
            lml, g = log_marginal_likelihood(kernel, history, theta, grad=True)
        else:
            lml = log_marginal_likelihood(kernel, history, theta)
    except (BQOError, np.linalg.LinAlgError, FloatingPointError):
        return (-np.inf, np.zeros(layout.size)) if grad else -np.inf
    lp, lpg = layout.log_prior(u)
    if not grad:
        return lml + lp
    return lml + lp, layout.chain_grad(u, g) + lpg


def slice_sample_logpdf(logpdf, x0, n_samples, burn_in=0, thin=1, rng=None, width=1.0,
                        max_shrink=100, max_steps_out=50):
    """Coordinate-wise slice sampler with stepping out and shrinkage.

    Parameters
    ----------
    logpdf : callable
        Unnormalized log density of a 1-D array.
    x0 : array_like
        Starting point with finite density.
    width : float or array_like
        Initial bracket width per coordinate.

    Returns
    -------
    (n_samples, dim) array of draws.
    """
    rng = np.random.default_rng() if rng is None else rng
    x = np.array(x0, dtype=float, ndmin=1)
    dim = x.size
    w = np.broadcast_to(np.asarray(width, dtype=float), (dim,))
    lp = logpdf(x)
    if not np.isfinite(lp):
        raise ConfigurationError("slice sampler started at a point with zero density")
    out = np.empty((n_samples, dim))
    total = burn_in + n_samples * thin
    k = 0
    for it in range(total):
        for i in range(dim):
            logy = lp - rng.exponential()
            xi = x[i]
            left = xi - w[i] * rng.random()
            right = left + w[i]
            j = int(np.floor(max_steps_out * rng.random()))
            kk = max_steps_out - 1 - j

            def at(v):
                x[i] = v
                return logpdf(x)

            while j > 0 and at(left) > logy:
                left -= w[i]
                j -= 1
            while kk > 0 and at(right) > logy:
                right += w[i]
                kk -= 1
            for _ in range(max_shrink):
                cand = left + rng.random() * (right - left)
                lpc = at(cand)
                if lpc > logy:
                    lp = lpc
                    break
                if cand < xi:
                    left = cand
                else:
                    right = cand
            else:
                x[i] = xi
                raise SamplerStuckError(
                    f"slice shrinkage exhausted on coordinate {i} at {x.tolist()} "
                    f"(log density {lp:.4g})")
        if it >= burn_in and (it - burn_in) % thin == thin - 1:
            out[k] = x
            k += 1
    return out


def slice_sample(kernel, history, prior, theta_init, n_samples, burn_in=50, thin=2, rng=None,
                 width=1.0):
    """Posterior draws of the hyperparameters by slice sampling in ``u`` space.

    Returns a list of ``HyperParams``.
    """
    if isinstance(kernel, str):
        kernel = get_kernel(kernel)
    layout = ParamLayout(theta_init, prior)
    if layout.size == 0:
        return [theta_init] * n_samples
    u0 = np.clip(layout.pack(theta_init), layout.lower, layout.upper)
    draws = slice_sample_logpdf(lambda u: log_posterior(kernel, history, layout, u), u0,
                                n_samples, burn_in, thin, rng, width)
    return [layout.unpack(u) for u in draws]


def map_estimate(kernel, history, prior, theta_init, starts=10, rng=None, max_iters=200):
    """Posterior mode (the MLE under a flat prior) by multi-start L-BFGS-B.

    The first start is ``theta_init``; the others are drawn at random.  The
    returned point has the largest log posterior among all evaluated points.
    """
    if isinstance(kernel, str):
        kernel = get_kernel(kernel)
    rng = np.random.default_rng() if rng is None else rng
    layout = ParamLayout(theta_init, prior)
    if layout.size == 0:
        return theta_init
    best = {"val": -np.inf, "u": None}

    def neg(u):
        val, g = log_posterior(kernel, history, layout, u, grad=True)
        if not np.isfinite(val):
            return 1e300, np.zeros_like(u)
        if val > best["val"]:
            best["val"], best["u"] = val, u.copy()
        return -val, -g

    bounds = list(zip(layout.lower, layout.upper))
    inits = [np.clip(layout.pack(theta_init), layout.lower, layout.upper)]
    inits += [layout.draw_start(rng, history) for _ in range(max(starts, 1) - 1)]
    for u0 in inits:
        try:
            minimize(neg, u0, jac=True, method="L-BFGS-B", bounds=bounds,
                     options={"maxiter": max_iters})
        except (ValueError, FloatingPointError):
            continue
    if best["u"] is None:
        raise OptimizationFailure("no MAP start reached a finite log posterior")
    return layout.unpack(best["u"])
