"""The outer optimization loop for BQO and the KG / EI baselines.

BQO models the integrand ``F(x, w)`` and picks ``(x, w)`` by the value of
information about ``max_x G(x)``.  KG and EI model ``G`` directly and observe
``F(x, w)`` at a random ``w ~ p``, an unbiased noisy sample of ``G(x)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from . import acquisition as acq
from .domain import Box
from .errors import ConfigurationError, SimulatorFailure
from .gp import History, fit
from .inference import HyperPrior, map_estimate, slice_sample
from .kernels import default_theta, get_kernel
from .optimize import AdamConfig, InnerMaximizer, adam_maximize
from .quadrature import Measure, QuadPosterior

ALGORITHMS = ("bqo_mc", "bqo_disc", "kg", "ei")
DUPLICATE_RADIUS = 1e-3
DUPLICATE_TOL = 1e-9

# Called with every batch of candidates at which a VOI gradient is requested.
GRADIENT_HOOK = None


@dataclass
class InferenceSettings:
    """How hyperparameters are obtained at each step.

    ``mode`` is ``"bayes"`` (slice sampling), ``"map"``, ``"mle"`` (MAP under
    a flat prior) or ``"fixed"``.  ``refit="once"`` estimates them after the
    initial design only.  ``theta`` overrides starting values by group and
    ``prior`` overrides prior specs by group (``["fixed"]`` pins a group).
    """

    mode: str = "map"
    n_samples: int = 10
    burn_in: int = 50
    warm_burn_in: int = 5
    thin: int = 2
    starts: int = 10
    max_iters: int = 200
    refit: str = "every"
    theta: dict = field(default_factory=dict)
    prior: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("bayes", "map", "mle", "fixed"):
            raise ConfigurationError(f"unknown inference mode {self.mode!r}")
        if self.refit not in ("every", "once"):
            raise ConfigurationError(f"unknown refit policy {self.refit!r}")
        if self.n_samples < 1 or self.thin < 1 or self.burn_in < 0 or self.starts < 1:
            raise ConfigurationError("invalid sampler settings")


@dataclass
class Settings:
    """Algorithm settings for one run.

    ``acquisition=None`` picks ``bqo_disc`` for ``d <= 2`` and ``bqo_mc``
    otherwise.  ``n0=None`` uses ``2 (d + p)``.
    """

    acquisition: str | None = None
    budget: int = 50
    n0: int | None = None
    kernel: str | None = None
    adam: AdamConfig = field(default_factory=AdamConfig)
    inference: InferenceSettings = field(default_factory=InferenceSettings)
    disc_points: int = 32
    inner_pool: int | None = None
    inner_iters: int = 40
    rank_m: int = 200
    screen: int = 4
    w_subsample: int = 64
    lambda_mode: str = "auto"
    lambda_value: float = 0.0
    standardize: bool = True
    recommend_iters: int = 100
    kg_scheme: str | None = None

    def __post_init__(self):
        if isinstance(self.adam, dict):
            self.adam = AdamConfig(**self.adam)
        if isinstance(self.inference, dict):
            self.inference = InferenceSettings(**self.inference)
        if self.acquisition is not None and self.acquisition not in ALGORITHMS:
            raise ConfigurationError(f"unknown acquisition {self.acquisition!r}")
        if self.budget < 0 or (self.n0 is not None and self.n0 < 1):
            raise ConfigurationError("budget must be >= 0 and n0 >= 1")
        if self.lambda_mode not in ("auto", "fixed", "homogeneous", "batch_mean"):
            raise ConfigurationError(f"unknown lambda mode {self.lambda_mode!r}")
        if self.kg_scheme not in (None, "disc", "mc"):
            raise ConfigurationError(f"unknown kg scheme {self.kg_scheme!r}")

    @classmethod
    def from_dict(cls, cfg):
        names = {f.name for f in fields(cls)}
        unknown = set(cfg) - names
        if unknown:
            raise ConfigurationError(f"unknown settings {sorted(unknown)}")
        return cls(**cfg)


@dataclass
class RunState:
    """Raw history and counters of one replication."""

    history: History
    rng: np.random.Generator
    n: int
    N: int
    n0: int
    evaluations: int = 0


class Trace(list):
    """Trace rows plus an abort flag."""

    aborted = False
    message = ""


class _Model:
    """A GP model (of ``F`` for BQO, of ``G`` for the baselines) and its fits."""

    def __init__(self, problem, settings, on_G):
        self.problem = problem
        self.settings = settings
        self.on_G = on_G
        d = problem.dim_x
        family = settings.kernel or problem.kernel
        if on_G:
            if family == "task_matern52":
                family = "matern52"
            self.measure = Measure.single_atom(0)
            noise = 1.0
            template = default_theta(family, d, 0, noise_var=noise)
        else:
            self.measure = problem.measure
            noise = 1.0 if problem.noise_mode == "unknown" else None
            template = default_theta(family, d, problem.dim_w, problem.n_tasks, noise_var=noise)
        self.family = family
        self.kernel = get_kernel(family)
        inf = settings.inference
        over = {}
        for key, val in inf.theta.items():
            if key == "alpha_w" and template.dim_w == 0:
                continue
            if key == "noise_var" and template.noise_var is None:
                continue
            over[key] = np.asarray(val, dtype=float) if key in ("alpha_x", "alpha_w", "task_chol") \
                else float(val)
        self.template = template.replace(**over)
        specs = {k: tuple(v) for k, v in inf.prior.items()}
        self.prior = HyperPrior.flat(**specs) if inf.mode == "mle" else HyperPrior.default(**specs)
        self.thetas = None
        self.chain = None
        self.shift, self.scale = 0.0, 1.0
        self.frozen = False

    def standardized(self, history):
        if self.settings.standardize and not self.frozen:
            y = history.values
            self.shift = float(np.mean(y)) if y.size else 0.0
            sd = float(np.std(y)) if y.size > 1 else 0.0
            self.scale = sd if sd > 0 else 1.0
        lam = history.noise_vars
        return History(history.points, (history.values - self.shift) / self.scale,
                       None if lam is None else lam / self.scale ** 2)

    def update(self, history, rng):
        """Refresh hyperparameters and return ``[(QuadPosterior, lambda)]``."""
        inf = self.settings.inference
        hist = self.standardized(history)
        if self.thetas is None or (inf.refit == "every" and inf.mode != "fixed"):
            if inf.mode == "fixed":
                self.thetas = [self.template]
            elif inf.mode in ("map", "mle"):
                init = self.template if self.thetas is None else self.thetas[0]
                self.thetas = [map_estimate(self.kernel, hist, self.prior, init, inf.starts, rng,
                                            inf.max_iters)]
            else:
                init = self.template if self.chain is None else self.chain
                burn = inf.burn_in if self.chain is None else inf.warm_burn_in
                self.thetas = slice_sample(self.kernel, hist, self.prior, init, inf.n_samples,
                                           burn, inf.thin, rng)
                self.chain = self.thetas[-1]
            if inf.refit == "once":
                self.frozen = True
        out = []
        for th in self.thetas:
            qp = QuadPosterior(fit(self.kernel, hist, th), self.measure)
            out.append((qp, self._lambda(hist, th)))
        return out

    def _lambda(self, hist, theta):
        s = self.settings
        mode = s.lambda_mode
        if mode == "fixed":
            return s.lambda_value / self.scale ** 2
        if mode == "auto":
            mode = "batch_mean" if hist.noise_vars is not None else "homogeneous"
        if mode == "batch_mean":
            lam = hist.noise_vars
            return float(np.mean(lam)) if lam is not None and lam.size else 0.0
        return float(theta.noise_var or 0.0)

    def to_original(self, a):
        return self.scale * a + self.shift * self.measure.mass


def _combos(problem, settings, rng, on_G):
    """Finite choices of the candidate and the mask of continuous coordinates."""
    xd = problem.x_domain
    d = problem.dim_x
    if on_G:
        wpts, wfree, p = np.zeros((1, 0)), False, 0
    else:
        wd = problem.w_domain
        p = problem.dim_w
        wfree = not wd.finite
        wpts = None if wfree else wd.points
        if wpts is not None and wpts.shape[0] > settings.w_subsample:
            keep = np.sort(rng.choice(wpts.shape[0], settings.w_subsample, replace=False))
            wpts = wpts[keep]
    xpts = xd.points if xd.finite else None
    xs = xpts if xpts is not None else np.full((1, d), np.nan)
    ws = wpts if wpts is not None else np.full((1, p), np.nan)
    combos = np.concatenate([np.repeat(xs, ws.shape[0], axis=0), np.tile(ws, (xs.shape[0], 1))],
                            axis=1)
    free = np.array([not xd.finite] * d + [wfree] * p, dtype=bool)
    lower = np.concatenate([xd.lower, np.zeros(0) if on_G else problem.w_domain.lower])
    upper = np.concatenate([xd.upper, np.zeros(0) if on_G else problem.w_domain.upper])
    return combos, free, lower, upper


def _noiseless_points(qps):
    qp = qps[0][0]
    return qp._noiseless


def _perturber(noiseless, lower, upper, free):
    def perturb(X, rng):
        if noiseless.shape[0]:
            dist = np.abs(X[:, None, :] - noiseless[None, :, :]).max(axis=-1).min(axis=1)
            hit = dist <= DUPLICATE_TOL
            if hit.any():
                k, D = int(hit.sum()), int(free.sum())
                u = rng.standard_normal((k, D))
                u /= np.linalg.norm(u, axis=1, keepdims=True)
                u *= DUPLICATE_RADIUS * rng.random((k, 1)) ** (1.0 / D)
                Y = X[hit].copy()
                Y[:, free] += u
                X = X.copy()
                X[hit] = np.clip(Y, lower, upper)
        if GRADIENT_HOOK is not None:
            GRADIENT_HOOK(X)
        return X
    return perturb


def _scheme(settings, problem, on_G):
    if on_G:
        if settings.kg_scheme is not None:
            return settings.kg_scheme
        return "disc" if problem.x_domain.finite or problem.dim_x <= 2 else "mc"
    if problem.x_domain.finite:
        return "disc"
    return "disc" if settings.acquisition == "bqo_disc" else "mc"


def _voi_candidate(qps, problem, settings, rng, on_G):
    """Maximize the value of information averaged over hyperparameter draws."""
    combos, free, lower, upper = _combos(problem, settings, rng, on_G)
    scheme = _scheme(settings, problem, on_G)
    xd = problem.x_domain
    disc = acq.Discretization(xd.points if xd.finite else xd.grid(settings.disc_points)) \
        if scheme == "disc" else None
    inner = None
    if scheme == "mc":
        inner = InnerMaximizer(xd, rng, settings.inner_pool, settings.inner_iters)
        proxy = acq.Discretization(inner.pool)
    else:
        proxy = disc

    def voi_values(C, dsc):
        # on the log scale: far from the data every value underflows to zero,
        # and ties would pin the choice to the first candidate
        logs = [acq.voi_discretized_log(qp, C, dsc, lam) for qp, lam in qps]
        return logsumexp(logs, axis=0) - np.log(len(qps))

    if not free.any():
        vals = voi_values(combos, disc)
        return combos[int(np.argmax(vals))]

    # the restart budget is shared across the fixed choices, at least one each
    K = combos.shape[0]
    R = max(1, settings.adam.restarts // K)
    S = max(settings.screen, 1) * settings.adam.restarts
    starts = np.repeat(combos, S, axis=0)
    rand = lower + (upper - lower) * rng.random((K * S, free.size))
    starts[:, free] = rand[:, free]
    score = voi_values(starts, proxy).reshape(K, S)
    top = np.argsort(-score, axis=1, kind="stable")[:, :R]
    x0 = starts.reshape(K, S, -1)[np.arange(K)[:, None], top].reshape(K * R, -1)

    if scheme == "disc":
        def objective(X):
            g = np.zeros(X.shape)
            for qp, lam in qps:
                g += acq.voi_discretized_batch(qp, X, disc, lam, grad=True)[1]
            return None, g / len(qps)

        def rank(X):
            return voi_values(X, disc)
    else:
        def objective(X):
            g = np.zeros(X.shape)
            for qp, lam in qps:
                Z = rng.standard_normal(X.shape[0])
                g += acq.voi_grad_samples(qp, X, Z, lam, inner, wrt="all")[1]
            return None, g / len(qps)

        Zr = rng.standard_normal(settings.rank_m)

        def rank(X):
            return np.mean([acq.voi_mc_samples(qp, X, Zr, lam, inner).mean(axis=1)
                            for qp, lam in qps], axis=0)

    perturb = _perturber(_noiseless_points(qps), lower, upper, free)
    best, _, _, _ = adam_maximize(objective, lower, upper, x0, settings.adam, rng, free=free,
                                  perturb=perturb, rank=rank)
    return best


def _ei_candidate(qps, problem, settings, rng):
    xd = problem.x_domain
    bests = [acq.incumbent(qp) for qp, _ in qps]

    def mean_ei(X, grad=False):
        if not grad:
            return np.mean([acq.ei(qp, X, b) for (qp, _), b in zip(qps, bests)], axis=0)
        out = [acq.ei(qp, X, b, grad=True) for (qp, _), b in zip(qps, bests)]
        return np.mean([o[0] for o in out], axis=0), np.mean([o[1] for o in out], axis=0)

    if xd.finite:
        return xd.points[int(np.argmax(mean_ei(xd.points)))]
    pool = np.vstack([xd.sample(rng, 128 * xd.dim), xd.grid(settings.disc_points)])
    vals = mean_ei(pool)
    order = np.argsort(-vals, kind="stable")[:settings.adam.restarts]
    best_x, best_v = pool[order[0]], vals[order[0]]
    for x0 in pool[order]:
        res = minimize(lambda x: tuple(-np.asarray(t)[0] for t in mean_ei(x[None], grad=True)),
                       x0, jac=True, method="L-BFGS-B", bounds=list(zip(xd.lower, xd.upper)))
        if np.isfinite(res.fun) and -res.fun > best_v:
            best_x, best_v = np.clip(res.x, xd.lower, xd.upper), -res.fun
    return best_x


def recommend(qps, problem, settings, rng):
    """``argmax_x`` of the posterior mean of ``G`` averaged over hyperparameter draws.

    Returns ``(x*, mean value at x*)`` in model units.
    """
    xd = problem.x_domain

    def mean_a(X):
        return np.mean([qp.a_n(X) for qp, _ in qps], axis=0)

    def mean_a_grad(X):
        return np.mean([qp.a_n_grad(X) for qp, _ in qps], axis=0)

    if xd.finite:
        vals = mean_a(xd.points)
        i = int(np.argmax(vals))
        return xd.points[i].copy(), float(vals[i])
    hist = qps[0][0].state.history.points
    pool = [xd.sample(rng, 64 * xd.dim), xd.grid(settings.disc_points)]
    if hist.shape[0]:
        pool.append(xd.clip(hist[:, :xd.dim]))
    pool = np.vstack(pool)
    vals = mean_a(pool)
    order = np.argsort(-vals, kind="stable")[:settings.adam.restarts]
    cfg = AdamConfig(step=settings.adam.step, max_iters=settings.recommend_iters,
                     restarts=settings.adam.restarts, final_fraction=0.01)
    X, _, Xall, scores = adam_maximize(lambda X: (None, mean_a_grad(X)), xd.lower, xd.upper,
                                       pool[order], cfg, rng, rank=mean_a)
    if scores.max() < vals[order[0]]:
        X = pool[order[0]]
    res = minimize(lambda x: (-mean_a(x[None])[0], -mean_a_grad(x[None])[0]), X, jac=True,
                   method="L-BFGS-B", bounds=list(zip(xd.lower, xd.upper)))
    x = np.clip(res.x, xd.lower, xd.upper)
    v = float(mean_a(x[None])[0])
    if v < float(mean_a(X[None])[0]):
        x, v = X, float(mean_a(X[None])[0])
    return x, v


def bqo_step(qps, problem, settings, rng):
    """Next ``(x, w)`` to evaluate for BQO given fitted posteriors."""
    c = _voi_candidate(qps, problem, settings, rng, on_G=False)
    d = problem.dim_x
    return c[:d], c[d:]


def _algorithm(settings, problem):
    if settings.acquisition is not None:
        return settings.acquisition
    return "bqo_disc" if problem.x_domain.finite or problem.dim_x <= 2 else "bqo_mc"


def run_bqo(problem, settings, rng, replication=0, on_step=None):
    """Run one replication of BQO, KG or EI and return its trace.

    Each row holds the iteration, the evaluated point and value, the
    recommendation after that evaluation, its true objective when the
    problem provides one, and the maximum posterior mean of ``G``.
    Row 0 describes the state after the initial design.
    """
    algo = _algorithm(settings, problem)
    on_G = algo in ("kg", "ei")
    d, p = problem.dim_x, problem.dim_w
    n0 = settings.n0 if settings.n0 is not None else 2 * (d + (0 if on_G else p))
    model = _Model(problem, settings, on_G)
    trace = Trace()
    t0 = time.perf_counter()

    dim = d if on_G else d + p
    with_noise = not on_G and problem.noise_mode != "unknown"
    state = RunState(History.empty(dim, with_noise), rng, 0, settings.budget, n0)

    def evaluate(x, w):
        for attempt in range(2):
            try:
                state.evaluations += 1
                if on_G:
                    y, lam = problem.sample_G(x, rng), None
                else:
                    y, lam = problem.sample_F(x, w, rng)
                if not np.isfinite(y):
                    raise SimulatorFailure(f"non-finite value at x={x}, w={w}")
                return y, lam
            except Exception as exc:  # simulator errors are recorded, retried once
                if attempt == 1:
                    raise SimulatorFailure(str(exc)) from exc
        raise AssertionError("unreachable")

    def record(n, x, w, y, qps):
        xr, ar = recommend(qps, problem, settings, rng)
        trace.append({
            "replication": replication, "iteration": n, "algorithm": algo,
            "x": np.atleast_1d(x).tolist(), "w": np.atleast_1d(w).tolist(), "y": y,
            "x_rec": xr.tolist(), "true_G": problem.true_G(xr),
            "max_a": model.to_original(ar), "elapsed": time.perf_counter() - t0,
        })
        if on_step is not None:
            on_step(trace[-1])

    try:
        X, W = problem.design(rng, n0)
        for i in range(n0):
            y, lam = evaluate(X[i], W[i])
            pt = X[i] if on_G else np.concatenate([X[i], W[i]])
            state.history = state.history.append(pt, y, lam)
        qps = model.update(state.history, rng)
        record(0, [], [], float("nan"), qps)
        for n in range(1, state.N + 1):
            if algo == "ei":
                x, w = _ei_candidate(qps, problem, settings, rng), np.zeros(0)
            elif algo == "kg":
                x, w = _voi_candidate(qps, problem, settings, rng, on_G=True), np.zeros(0)
            else:
                x, w = bqo_step(qps, problem, settings, rng)
            y, lam = evaluate(x, w)
            pt = x if on_G else np.concatenate([x, w])
            state.history = state.history.append(pt, y, lam)
            state.n = n
            qps = model.update(state.history, rng)
            record(n, x, w, y, qps)
    except SimulatorFailure as exc:
        trace.aborted = True
        trace.message = str(exc)
    trace.evaluations = state.evaluations
    trace.history = state.history
    return trace
