"""Benchmark problems: the analytic test, the Branin composition, GP-simulated
problems and a small finite table used for consistency checks."""

from __future__ import annotations

import numpy as np

from .domain import Box, FiniteSet
from .errors import ConfigurationError
from .gp import _cholesky
from .quadrature import Measure

# rows x2 in (0.25, 0.5, 0.75), columns x3 in (0.2, 0.4, 0.6, 0.8)
BRANIN_X2 = (0.25, 0.5, 0.75)
BRANIN_X3 = (0.2, 0.4, 0.6, 0.8)
BRANIN_WEIGHTS = (
    (0.0375, 0.0875, 0.0875, 0.0375),
    (0.0750, 0.1750, 0.1750, 0.0750),
    (0.0375, 0.0875, 0.0875, 0.0375),
)


class Problem:
    """An integrand ``F(x, w)`` with its weighting and domains.

    Parameters
    ----------
    name : str
    x_domain : Box or FiniteSet
        Decision domain ``A``.
    w_domain : Box or FiniteSet
        Where candidate environment values are searched.
    measure : Measure
        Weighting ``p`` over ``w``; ``G(x) = int F(x, w) p(dw)``.
    simulate : callable
        ``simulate(x, w, rng) -> (y, noise_var)`` with conditional mean
        ``F(x, w)``.
    true_G : callable, optional
        Exact objective for scoring.
    noise_mode : {"known", "unknown", "none"}
        Whether observation noise variances are reported, hidden, or zero.
    kernel : str
        Default kernel family for the integrand model.
    """

    def __init__(self, name, x_domain, w_domain, measure, simulate, true_G=None,
                 noise_mode="known", kernel="sq_exp", n_tasks=0, info=None):
        if noise_mode not in ("known", "unknown", "none"):
            raise ConfigurationError(f"unknown noise mode {noise_mode!r}")
        self.name = name
        self.x_domain = x_domain
        self.w_domain = w_domain
        self.measure = measure
        self._simulate = simulate
        self._true_G = true_G
        self.noise_mode = noise_mode
        self.kernel = kernel
        self.n_tasks = n_tasks
        self.info = dict(info or {})

    @property
    def dim_x(self):
        return self.x_domain.dim

    @property
    def dim_w(self):
        return self.w_domain.dim

    @property
    def has_true_G(self):
        return self._true_G is not None

    def sample_F(self, x, w, rng):
        """Noisy evaluation of the integrand; returns ``(y, noise_var or None)``."""
        y, lam = self._simulate(np.asarray(x, dtype=float), np.asarray(w, dtype=float), rng)
        if self.noise_mode == "none":
            return float(y), 0.0
        if self.noise_mode == "unknown":
            return float(y), None
        return float(y), float(lam)

    def sample_G(self, x, rng):
        """Unbiased noisy observation of ``G(x)``: ``F`` at a random ``w ~ p``."""
        w = self.measure.sample(rng, 1)[0]
        y, _ = self._simulate(np.asarray(x, dtype=float), w, rng)
        return self.measure.mass * float(y)

    def true_G(self, x):
        if self._true_G is None:
            return None
        return float(self._true_G(np.asarray(x, dtype=float)))

    def design(self, rng, n):
        """``n`` initial points uniform over ``A x W`` (``w ~ p`` when ``W`` is unbounded)."""
        X = self.x_domain.sample(rng, n)
        if self.measure.kind == "gaussian":
            W = self.measure.sample(rng, n)
        else:
            W = self.w_domain.sample(rng, n)
        return X, W

    def __repr__(self):
        return f"Problem({self.name!r}, d={self.dim_x}, p={self.dim_w})"


def analytic_problem(noise_mode="known"):
    """``max_x E[z x^2 + w]`` on ``[-1/2, 1/2]`` with ``z ~ N(-1, 1)``, ``w ~ N(0, 1)``.

    ``F(x, w) = w - x^2`` and ``G(x) = -x^2``; the observation noise at ``x``
    has variance ``x^4``.
    """
    def simulate(x, w, rng):
        z = rng.normal(-1.0, 1.0)
        x2 = float(x[0]) ** 2
        return z * x2 + float(w[0]), x2 * x2

    return Problem("analytic", Box([-0.5], [0.5]), Box([-3.0], [3.0]),
                   Measure.gaussian([0.0], [1.0]), simulate,
                   true_G=lambda x: -float(x[0]) ** 2, noise_mode=noise_mode, kernel="sq_exp")


def branin(u, v):
    """The Branin function."""
    return ((v - 5.1 / (4 * np.pi ** 2) * u ** 2 + 5 / np.pi * u - 6) ** 2
            + 10 * (1 - 1 / (8 * np.pi)) * np.cos(u) + 10)


def branin_F(x, w):
    """Product of two Branin functions; ``x = (x1, x4)``, ``w = (x2, x3)``."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    x1, x4 = x[..., 0], x[..., 1]
    x2, x3 = w[..., 0], w[..., 1]
    return branin(15 * x1 - 5, 15 * x2) * branin(15 * x3 - 5, 15 * x4)


def branin_measure():
    support = [(a, b) for a in BRANIN_X2 for b in BRANIN_X3]
    weights = [p for row in BRANIN_WEIGHTS for p in row]
    return Measure.finite(np.array(support), np.array(weights))


def branin_problem():
    """Weighted sum of a Branin product over 12 environment atoms (noiseless)."""
    meas = branin_measure()

    def simulate(x, w, rng):
        return float(branin_F(x, w)), 0.0

    def true_G(x):
        x = np.broadcast_to(x, (meas.weights.size, 2))
        return float(branin_F(x, meas.points) @ meas.weights)

    return Problem("branin", Box([0.0, 0.0], [1.0, 1.0]), FiniteSet(meas.points), meas,
                   simulate, true_G=true_G, noise_mode="none", kernel="matern52")


def gp_sim_problem(A_ratio=0.5, beta=16.0, rng=None, n_x=50, n_w=50, n_z=1000,
                   noise_mode="known"):
    """Problem drawn from a GP prior with a separate noise term.

    ``f(x, w, z) = h(x, w) + r(z)``: ``h`` is a draw on an ``n_x x n_w`` grid
    of ``[0, 1]^2`` from a GP with covariance
    ``A_ratio * exp(-beta ||.||^2)``, and ``r`` is i.i.d. ``N(0, 1 - A_ratio)``
    over ``n_z`` points, centred so that ``F(x, w) = h(x, w)`` exactly.
    """
    if not 0 < A_ratio <= 1 or beta <= 0:
        raise ConfigurationError("gp_sim needs A_ratio in (0, 1] and beta > 0")
    rng = np.random.default_rng(0) if rng is None else rng
    alpha_h, alpha_d = A_ratio, 1.0 - A_ratio
    xs = np.linspace(0.0, 1.0, n_x)
    ws = np.linspace(0.0, 1.0, n_w)
    grid = np.stack(np.meshgrid(xs, ws, indexing="ij"), axis=-1).reshape(-1, 2)
    d2 = np.sum((grid[:, None, :] - grid[None, :, :]) ** 2, axis=-1)
    K = alpha_h * np.exp(-beta * d2)
    L, _ = _cholesky(K, alpha_h)
    h = (L @ rng.standard_normal(grid.shape[0])).reshape(n_x, n_w)
    r = np.sqrt(alpha_d) * rng.standard_normal(n_z)
    if r.size > 1:
        r -= r.mean()
    G = h.mean(axis=1)

    def index(v, n):
        i = int(np.rint(float(v) * (n - 1)))
        if not 0 <= i < n or abs(i / (n - 1) - float(v)) > 1e-9:
            raise ConfigurationError(f"{v} is not on the problem grid")
        return i

    def simulate(x, w, rng_):
        i, j = index(x[0], n_x), index(w[0], n_w)
        return h[i, j] + r[rng_.integers(n_z)], alpha_d

    def true_G(x):
        return G[index(x[0], n_x)]

    meas = Measure.finite(ws[:, None], np.full(n_w, 1.0 / n_w))
    return Problem("gp_sim", FiniteSet(xs[:, None]), FiniteSet(ws[:, None]), meas, simulate,
                   true_G=true_G, noise_mode=noise_mode, kernel="sq_exp",
                   info={"A_ratio": A_ratio, "beta": beta, "h": h, "r": r, "G": G})


TABLE_F = np.array([
    [0.0, 0.5, -0.3],
    [0.6, 0.2, 0.4],
    [1.0, -0.2, 0.1],
    [0.7, 0.9, -0.5],
    [0.2, 0.1, 0.8],
])
TABLE_WEIGHTS = np.array([0.5, 0.3, 0.2])


def table_problem(noise_sd=0.1):
    """Finite 5 x 3 problem: five decisions, three weighted tasks, Gaussian noise."""
    xs = np.linspace(0.0, 1.0, TABLE_F.shape[0])
    tasks = np.arange(TABLE_F.shape[1], dtype=float)
    G = TABLE_F @ TABLE_WEIGHTS

    def simulate(x, w, rng):
        i = int(np.rint(float(x[0]) * (xs.size - 1)))
        t = int(np.rint(float(w[0])))
        return TABLE_F[i, t] + noise_sd * rng.standard_normal(), noise_sd ** 2

    return Problem("table", FiniteSet(xs[:, None]), FiniteSet(tasks[:, None]),
                   Measure.finite(tasks[:, None], TABLE_WEIGHTS), simulate,
                   true_G=lambda x: G[int(np.rint(float(x[0]) * (xs.size - 1)))],
                   noise_mode="known", kernel="task_matern52", n_tasks=tasks.size,
                   info={"G": G})


PROBLEMS = ("analytic", "branin", "gp_sim", "table")


def make_problem(cfg):
    """Build a problem from its config dict (``{"name": ..., **params}``)."""
    cfg = dict(cfg)
    name = cfg.pop("name", None)
    if name == "analytic":
        return analytic_problem(**cfg)
    if name == "branin":
        if cfg:
            raise ConfigurationError(f"branin takes no parameters, got {sorted(cfg)}")
        return branin_problem()
    if name == "gp_sim":
        seed = cfg.pop("seed", 0)
        return gp_sim_problem(rng=np.random.default_rng(seed), **cfg)
    if name == "table":
        return table_problem(**cfg)
    raise ConfigurationError(f"unknown problem {name!r}; expected one of {PROBLEMS}")
