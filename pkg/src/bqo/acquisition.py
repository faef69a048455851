"""Value of information by Monte Carlo and by discretization, plus EI and KG.

``h(a, b) = E[max_i a_i + b_i Z] - max_i a_i`` is computed exactly from the
upper envelope of the lines ``a_i + b_i z``.  With ``a = a_n`` on a finite
set and ``b = sigma_tilde`` it is the one-step value of information.
"""

from __future__ import annotations

from collections import namedtuple

import numpy as np
from scipy.special import erfcx, logsumexp, ndtr

from ._envelope import envelope_batch
from .quadrature import Measure, QuadPosterior

SLOPE_TOL = 1e-12
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)
SQRT_HALF_PI = np.sqrt(0.5 * np.pi)
MC_CHUNK = 20000

HResult = namedtuple("HResult", "value indices breakpoints")
VoiSample = namedtuple("VoiSample", "value grad inner_argmax")


def _phi(z):
    return INV_SQRT_2PI * np.exp(-0.5 * z * z)


def _f(z):
    """``phi(z) + z Phi(z)``, the expected positive part kernel."""
    return _phi(z) + z * ndtr(z)


def h_batch(a, B, grad=False):
    """``h(a, B[:, k])`` for every column ``k``.

    Returns the values (K,) and, with ``grad``, the weights ``omega`` (L, K)
    such that the derivative of ``h`` with respect to ``B[:, k]`` is
    ``omega[:, k]``.
    """
    a = np.ascontiguousarray(a, dtype=float)
    B = np.ascontiguousarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    L, K = B.shape
    if L == 0 or a.size != L:
        raise ValueError("h needs matching non-empty intercept and slope vectors")
    lo, hi, absc, _ = envelope_batch(a, B, SLOPE_TOL)
    mask = lo >= 0
    cols = np.broadcast_to(np.arange(K), lo.shape)
    lo_, hi_ = np.where(mask, lo, 0), np.where(mask, hi, 0)
    dB = np.where(mask, B[hi_, cols] - B[lo_, cols], 0.0)
    values = np.sum(np.where(mask, dB * _f(-absc), 0.0), axis=0)
    if not grad:
        return values, None
    w = np.where(mask, _phi(absc), 0.0)
    omega = np.zeros((L, K))
    np.add.at(omega, (hi_[mask], cols[mask]), w[mask])
    np.add.at(omega, (lo_[mask], cols[mask]), -w[mask])
    return values, omega


def _log_f_neg(t):
    """``log f(-t)`` for ``t >= 0``, finite far beyond where ``f(-t)`` underflows.

    Uses ``f(-t) = phi(t) (1 - t M(t))`` with the Mills ratio ``M`` from
    ``erfcx``, and the asymptotic series once the difference cancels.
    """
    t = np.asarray(t, dtype=float)
    big = t > 1e3
    ts = np.where(big, 0.0, t)
    r = 1.0 - ts * SQRT_HALF_PI * erfcx(ts / np.sqrt(2.0))
    inv = 1.0 / np.where(big, t, 1.0) ** 2
    r = np.where(big, inv * (1.0 - 3.0 * inv + 15.0 * inv * inv), r)
    return -0.5 * t * t - LOG_SQRT_2PI + np.log(r)


def h_batch_log(a, B):
    """``log h(a, B[:, k])`` for every column; ``-inf`` where ``h`` is zero.

    Ranks candidates whose values of information all underflow in ``h_batch``.
    """
    a = np.ascontiguousarray(a, dtype=float)
    B = np.ascontiguousarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    lo, hi, absc, _ = envelope_batch(a, B, SLOPE_TOL)
    mask = lo >= 0
    cols = np.broadcast_to(np.arange(B.shape[1]), lo.shape)
    dB = np.where(mask, B[np.where(mask, hi, 0), cols] - B[np.where(mask, lo, 0), cols], 1.0)
    with np.errstate(divide="ignore"):
        terms = np.where(mask, np.log(dB) + _log_f_neg(absc), -np.inf)
    return logsumexp(terms, axis=0)


def h_exact(a, b):
    """Exact ``h(a, b)`` with the envelope indices and signed breakpoints.

    Breakpoints are the envelope crossings
    ``c_i = (a[j_i] - a[j_{i+1}]) / (b[j_{i+1}] - b[j_i])``.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or a.size != b.size:
        raise ValueError("h needs matching non-empty intercept and slope vectors")
    lo, hi, _, count = envelope_batch(a, b[:, None], SLOPE_TOL)
    c = int(count[0])
    if c == 0:
        # all slopes equal: the largest intercept dominates everywhere
        return HResult(0.0, np.array([int(np.argmax(a))]), np.zeros(0))
    lo, hi = lo[:c, 0], hi[:c, 0]
    idx = np.append(lo, hi[-1])
    brk = (a[lo] - a[hi]) / (b[hi] - b[lo])
    value = float(np.sum((b[hi] - b[lo]) * _f(-np.abs(brk))))
    return HResult(value, idx, brk)


class Discretization:
    """Finite subset ``A'`` of the decision space with ``a_n`` cached per posterior."""

    def __init__(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[0] == 0:
            raise ValueError("discretization needs at least one point")
        self.points = pts
        self._a = {}

    def values(self, qp):
        key = id(qp)
        if key not in self._a:
            self._a[key] = (qp, qp.a_n(self.points))
        return self._a[key][1]


def _as_disc(disc):
    return disc if isinstance(disc, Discretization) else Discretization(disc)


def voi_discretized_batch(qp, C, disc, lam, grad=True):
    """Discretized VOI and its candidate gradient for each row of ``C``.

    Returns ``(values (k,), grads (k, D) or None)``.
    """
    disc = _as_disc(disc)
    C = np.atleast_2d(C)
    P = disc.points
    a = disc.values(qp)
    t = qp.candidate_terms(C, lam, grad=grad)
    b = qp.sigma_tilde(P, C, lam, terms=t)
    values, omega = h_batch(a, b, grad=grad)
    if not grad:
        return values, None
    grads = np.zeros(C.shape)
    li, ki = np.nonzero(omega)
    if li.size:
        _, _, gc = qp.sigma_tilde_pairs(P[li], C, lam, idx=ki, grad_c=True, terms=t)
        np.add.at(grads, ki, omega[li, ki][:, None] * gc)
    return values, grads


def voi_discretized_log(qp, C, disc, lam):
    """Logarithm of the discretized VOI for each row of ``C``."""
    disc = _as_disc(disc)
    C = np.atleast_2d(C)
    b = qp.sigma_tilde(disc.points, C, lam, terms=qp.candidate_terms(C, lam))
    return h_batch_log(disc.values(qp), b)


def voi_discretized(qp, cand, disc, lam=0.0):
    """Discretized VOI ``h(a_n(A'), sigma_tilde(A', cand))`` and its gradient."""
    v, g = voi_discretized_batch(qp, np.atleast_2d(cand), disc, lam, grad=True)
    return float(v[0]), g[0]


def voi_mc_samples(qp, C, Z, lam, inner):
    """Per-draw VOI increments ``max(a_n + sigma_tilde Z) - max a_n``.

    Parameters
    ----------
    C : (k, D) candidates.
    Z : (m,) or (k, m) normal draws; a 1-D array is shared by all
        candidates (common random numbers).
    inner : InnerMaximizer
        Solver for the inner maximization over the decision domain.

    Returns
    -------
    (k, m) array.
    """
    C = np.atleast_2d(C)
    k = C.shape[0]
    Z = np.asarray(Z, dtype=float)
    Z = np.broadcast_to(Z, (k, Z.shape[-1]))
    m = Z.shape[1]
    base = inner.max_a(qp)
    terms = qp.candidate_terms(C, lam)
    out = np.empty((k, m))
    flat_z = Z.ravel()
    flat_idx = np.repeat(np.arange(k), m)
    res = out.ravel()
    for s in range(0, k * m, MC_CHUNK):
        sl = slice(s, s + MC_CHUNK)
        _, vals = inner.maximize(qp, C, flat_z[sl], flat_idx[sl], lam, terms=terms)
        res[sl] = vals - base
    return res.reshape(k, m)


def voi_mc(qp, cand, m, rng, lam=0.0, inner=None, return_se=False):
    """Monte Carlo VOI estimate at a single candidate from ``m`` normal draws."""
    Z = rng.standard_normal(m)
    s = voi_mc_samples(qp, np.atleast_2d(cand), Z, lam, inner)[0]
    if return_se:
        return float(s.mean()), float(s.std(ddof=1) / np.sqrt(m)) if m > 1 else np.inf
    return float(s.mean())


def voi_grad_samples(qp, C, Z, lam, inner, idx=None, wrt=None):
    """Envelope-theorem gradient draws ``grad_cand sigma_tilde(y_i, cand) Z_i``.

    ``C`` holds distinct candidates and ``idx`` maps each draw to one of them.
    Returns ``(values, grads, argmax)`` with one row per draw.
    """
    C = np.atleast_2d(C)
    Z = np.asarray(Z, dtype=float).ravel()
    if idx is None:
        idx = np.arange(Z.size) if C.shape[0] == Z.size else np.zeros(Z.size, dtype=np.intp)
    base = inner.max_a(qp)
    terms = qp.candidate_terms(C, lam, grad=True)
    vals = np.empty(Z.size)
    grads = np.empty((Z.size, C.shape[1]))
    Y = np.empty((Z.size, qp.d))
    for s in range(0, Z.size, MC_CHUNK):
        sl = slice(s, s + MC_CHUNK)
        y, v = inner.maximize(qp, C, Z[sl], idx[sl], lam, terms=terms)
        _, _, gc = qp.sigma_tilde_pairs(y, C, lam, idx=idx[sl], grad_c=True, terms=terms)
        vals[sl] = v - base
        grads[sl] = gc * Z[sl, None]
        Y[sl] = y
    if wrt is None:
        wrt = "x" if qp.measure.kind == "finite" else "all"
    if wrt == "x":
        grads = grads[:, :qp.d]
    return vals, grads, Y


def voi_grad_sample(qp, cand, rng, lam=0.0, inner=None, wrt=None):
    """One stochastic VOI value and gradient at ``cand``."""
    Z = rng.standard_normal(1)
    v, g, y = voi_grad_samples(qp, np.atleast_2d(cand), Z, lam, inner, wrt=wrt)
    return VoiSample(float(v[0]), g[0], y[0])


def incumbent(qp):
    """``max_i a_n(x_i)`` over the decisions already evaluated."""
    hist = qp.state.history.points
    if hist.shape[0] == 0:
        return qp.theta.mu0 * qp.mass
    return float(np.max(qp.a_n(hist[:, :qp.d])))


def ei(qp, X, best=None, grad=False):
    """Expected improvement of ``G`` over the incumbent posterior mean.

    Returns values and, with ``grad``, gradients with respect to ``X``.
    """
    X = np.atleast_2d(X)
    if best is None:
        best = incumbent(qp)
    mean = qp.a_n(X)
    var = qp.var_G(X)
    sd = np.sqrt(var)
    diff = mean - best
    pos = sd > 0
    z = np.where(pos, diff / np.where(pos, sd, 1.0), 0.0)
    val = np.where(pos, diff * ndtr(z) + sd * _phi(z), np.maximum(diff, 0.0))
    if not grad:
        return val
    dmean = qp.a_n_grad(X)
    dvar = qp.var_G_grad(X)
    dsd = np.where(pos[:, None], dvar / (2.0 * np.where(pos, sd, 1.0))[:, None], 0.0)
    g = np.where(pos[:, None], ndtr(z)[:, None] * dmean + _phi(z)[:, None] * dsd,
                 (diff > 0)[:, None] * dmean)
    return val, g


def kg(qp, X, disc=None, lam=0.0, inner=None, m=None, rng=None):
    """Knowledge gradient of a GP placed directly on ``G``.

    ``qp`` must use a single unit-weight atom.  With ``disc`` the exact
    discretized value and gradient are returned; otherwise a Monte Carlo
    estimate with ``m`` draws.
    """
    meas = qp.measure
    if meas.kind != "finite" or meas.weights.size != 1 or meas.weights[0] != 1.0:
        raise ValueError("kg needs a posterior over G with a single unit atom")
    X = np.atleast_2d(X)
    C = np.concatenate([X, np.broadcast_to(meas.points[0], (X.shape[0], meas.dim))], axis=1)
    if disc is not None:
        return voi_discretized_batch(qp, C, disc, lam, grad=True)
    Z = rng.standard_normal(m)
    return voi_mc_samples(qp, C, Z, lam, inner).mean(axis=1), None


def degenerate_posterior(state):
    """Wrap a GP on ``G`` itself as a posterior with a single unit atom."""
    return QuadPosterior(state, Measure.single_atom(state.theta.dim_w))
