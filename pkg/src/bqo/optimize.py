"""Optimizers: the inner maximizer of ``a_n + sigma_tilde Z`` and projected ADAM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, OptimizationFailure


POOL_BLOCK = 2_000_000


class InnerMaximizer:
    """Maximize ``x -> a_n(x) + sigma_tilde(x, cand) z`` over the decision domain.

    Many rows ``(cand, z)`` are solved at once.  Each row starts from the best
    point of a shared pool (random points, the evaluated decisions and the
    running argmax of ``a_n``) and is refined by projected gradient ascent
    with a per-row adaptive step.  On a finite domain the pool is the domain
    itself and the maximum is exact.

    Parameters
    ----------
    domain : Box or FiniteSet
    rng : numpy Generator, optional
        Draws the random pool once at construction.
    pool_size : int
        Number of random pool points on a box.
    iters : int
        Refinement steps (the K-step budget).
    """

    def __init__(self, domain, rng=None, pool_size=None, iters=40, extra=None):
        self.domain = domain
        self.iters = iters
        if domain.finite:
            self.pool = domain.points
        else:
            rng = np.random.default_rng(0) if rng is None else rng
            size = pool_size or 32 * domain.dim
            pool = [domain.sample(rng, size)]
            if extra is not None:
                pool.append(domain.clip(np.atleast_2d(extra)))
            self.pool = np.vstack(pool)
        self._cache = {}

    def _qp_cache(self, qp):
        key = id(qp)
        entry = self._cache.get(key)
        if entry is None or entry["qp"] is not qp:
            if len(self._cache) > 64:
                self._cache.clear()
            P = self.pool
            if not self.domain.finite and qp.n:
                P = np.vstack([P, self.domain.clip(qp.state.history.points[:, :qp.d])])
            entry = {"qp": qp, "P": P, "aP": qp.a_n(P), "cand": None}
            self._cache[key] = entry
        return entry

    def max_a(self, qp):
        """``max_x a_n(x)`` (cached per posterior)."""
        entry = self._qp_cache(qp)
        if "max_a" not in entry:
            y, v = self.maximize(qp, np.zeros((1, qp.point_dim)), np.zeros(1), None, 0.0)
            entry["max_a"] = float(v[0])
            entry["argmax_a"] = y[0]
        return entry["max_a"]

    def argmax_a(self, qp):
        self.max_a(qp)
        return self._qp_cache(qp)["argmax_a"]

    def maximize(self, qp, C, z, idx=None, lam=0.0, terms=None):
        """Solve one inner problem per row of ``z``.

        Returns the maximizers (m, d) and the maximal values (m,).
        """
        C = np.atleast_2d(C)
        z = np.atleast_1d(np.asarray(z, dtype=float))
        m = z.size
        if idx is None:
            idx = np.zeros(m, dtype=np.intp)
        entry = self._qp_cache(qp)
        P, aP = entry["P"], entry["aP"]
        if terms is None:
            terms = qp.candidate_terms(C, lam)
        ckey = (C.shape, C.tobytes(), np.asarray(lam, dtype=float).tobytes())
        if entry["cand"] is None or entry["cand"][0] != ckey:
            entry["cand"] = (ckey, qp.sigma_tilde(P, C, lam, terms=terms))
        sP = entry["cand"][1]
        best = np.empty(m, dtype=np.intp)
        f = np.empty(m)
        # score the pool in row blocks so memory stays bounded for large pools
        step = max(1, POOL_BLOCK // P.shape[0])
        for s in range(0, m, step):
            obj = aP[:, None] + sP[:, idx[s:s + step]] * z[None, s:s + step]
            # first maximal pool point per row: deterministic tie rule
            best[s:s + step] = np.argmax(obj, axis=0)
            f[s:s + step] = obj[best[s:s + step], np.arange(obj.shape[1])]
        Y = P[best].copy()
        if self.domain.finite or self.iters == 0:
            return Y, f
        return self._refine(qp, C, z, idx, lam, terms, Y, f)

    def _objective(self, qp, C, z, idx, lam, terms, Y):
        a, da = qp.a_n_value_grad(Y)
        s, ds, _ = qp.sigma_tilde_pairs(Y, C, lam, idx=idx, grad_x=True, terms=terms)
        return a + s * z, da + ds * z[:, None]

    def _refine(self, qp, C, z, idx, lam, terms, Y, f):
        lo, hi = self.domain.lower, self.domain.upper
        width = np.where(hi > lo, hi - lo, 1.0)
        f, g = self._objective(qp, C, z, idx, lam, terms, Y)
        eta = np.full(z.size, 0.05)
        active = np.ones(z.size, dtype=bool)
        for _ in range(self.iters):
            if not active.any():
                break
            rows = np.nonzero(active)[0]
            y, gr = Y[rows], g[rows] * width
            # projected direction: drop components pushing out of the box
            gr = np.where(((y <= lo) & (gr < 0)) | ((y >= hi) & (gr > 0)), 0.0, gr)
            norm = np.sqrt(np.sum(gr * gr, axis=1))
            moving = norm > 0
            step = np.where(moving, eta[rows] / np.where(moving, norm, 1.0), 0.0)
            yn = np.clip(y + step[:, None] * gr * width, lo, hi)
            fn, gn = self._objective(qp, C, z[rows], idx[rows], lam, terms, yn)
            up = moving & (fn > f[rows])
            acc = rows[up]
            Y[acc], f[acc], g[acc] = yn[up], fn[up], gn[up]
            eta[acc] = np.minimum(eta[acc] * 2.0, 0.5)
            rej = rows[~up]
            eta[rej] *= 0.25
            active[rows[~moving]] = False
            active &= eta > 1e-12
        return Y, f


@dataclass
class AdamConfig:
    """Projected ADAM settings; ``step`` is a fraction of the box width.

    ``final_fraction`` sets a linear decay of the step to that fraction of
    its initial value at the last iteration (1.0 keeps it constant).
    """

    step: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iters: int = 50
    restarts: int = 5
    final_fraction: float = 0.05

    def __post_init__(self):
        if not (self.step > 0 and 0 < self.beta1 < 1 and 0 < self.beta2 < 1 and self.eps > 0
                and self.max_iters >= 1 and self.restarts >= 1 and 0 < self.final_fraction <= 1):
            raise ConfigurationError(f"invalid ADAM settings: {self}")


def adam_maximize(objective, lower, upper, x0, cfg, rng, free=None, perturb=None, rank=None,
                  max_failures=5):
    """Projected ADAM ascent run in lockstep from every row of ``x0``.

    Parameters
    ----------
    objective : callable
        ``objective(X) -> (values or None, grads)`` for an (R, D) batch.  May
        be stochastic.
    lower, upper : array_like
        Box bounds (D,).
    x0 : (R, D) starting points.
    free : bool array (D,), optional
        Coordinates allowed to move; the others stay at their start value.
    perturb : callable, optional
        ``perturb(X, rng) -> X`` applied before every gradient request
        (used to step off non-differentiable points).
    rank : callable, optional
        ``rank(X) -> scores`` used to pick the returned row; defaults to the
        objective values at the final iterates.

    Returns
    -------
    (x_best, score_best, X_final, scores)
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    X = np.clip(np.array(x0, dtype=float, ndmin=2), lower, upper)
    R, D = X.shape
    free = np.ones(D, dtype=bool) if free is None else np.asarray(free, dtype=bool)
    lr = cfg.step * (upper - lower)
    mom = np.zeros((R, D))
    vel = np.zeros((R, D))
    fails = np.zeros(R, dtype=int)
    T = cfg.max_iters
    for t in range(1, T + 1):
        if perturb is not None:
            X = perturb(X, rng)
        _, G = objective(X)
        G = np.where(free, np.asarray(G, dtype=float), 0.0)
        bad = ~np.all(np.isfinite(G), axis=1)
        if bad.any():
            fails[bad] += 1
            if np.any(fails >= max_failures):
                raise OptimizationFailure("non-finite gradients at consecutive iterates")
            jitter = 1e-3 * (upper - lower) * rng.uniform(-1, 1, (int(bad.sum()), D))
            X[bad] = np.clip(X[bad] + np.where(free, jitter, 0.0), lower, upper)
            G[bad] = 0.0
        fails[~bad] = 0
        mom = cfg.beta1 * mom + (1 - cfg.beta1) * G
        vel = cfg.beta2 * vel + (1 - cfg.beta2) * G * G
        mh = mom / (1 - cfg.beta1 ** t)
        vh = vel / (1 - cfg.beta2 ** t)
        decay = 1.0 - (1.0 - cfg.final_fraction) * (t - 1) / max(T - 1, 1)
        X = np.clip(X + decay * lr * mh / (np.sqrt(vh) + cfg.eps), lower, upper)
    if rank is not None:
        scores = np.asarray(rank(X), dtype=float)
    else:
        scores = np.asarray(objective(X)[0], dtype=float)
    best = int(np.argmax(scores))
    return X[best].copy(), float(scores[best]), X, scores

