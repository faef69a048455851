"""Decision and environment domains: boxes and finite point sets."""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError


class Box:
    """Axis-aligned box ``prod_i [lower_i, upper_i]``."""

    finite = False

    def __init__(self, lower, upper):
        self.lower = np.atleast_1d(np.asarray(lower, dtype=float)).copy()
        self.upper = np.atleast_1d(np.asarray(upper, dtype=float)).copy()
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ConfigurationError("box bounds must be 1-D arrays of equal length")
        if np.any(self.upper < self.lower):
            raise ConfigurationError("box upper bound below lower bound")

    @property
    def dim(self):
        return self.lower.size

    @property
    def width(self):
        return self.upper - self.lower

    def sample(self, rng, size):
        u = rng.random((size, self.dim))
        return self.lower + u * self.width

    def clip(self, X):
        return np.clip(X, self.lower, self.upper)

    def contains(self, X, tol=1e-12):
        X = np.atleast_2d(X)
        return np.all((X >= self.lower - tol) & (X <= self.upper + tol), axis=-1)

    def grid(self, per_dim):
        axes = [np.linspace(lo, hi, per_dim) for lo, hi in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def __repr__(self):
        return f"Box({self.lower.tolist()}, {self.upper.tolist()})"


class FiniteSet:
    """Finite collection of points, stored as rows of a 2-D array."""

    finite = True

    def __init__(self, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ConfigurationError("finite set needs a non-empty 2-D point array")
        self.points = pts.copy()

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def size(self):
        return self.points.shape[0]

    @property
    def lower(self):
        return self.points.min(axis=0)

    @property
    def upper(self):
        return self.points.max(axis=0)

    def sample(self, rng, size):
        return self.points[rng.integers(self.size, size=size)]

    def contains(self, X, tol=1e-12):
        X = np.atleast_2d(X)
        d = np.abs(X[:, None, :] - self.points[None, :, :]).max(axis=-1)
        return d.min(axis=1) <= tol

    def __repr__(self):
        return f"FiniteSet({self.size} points in {self.dim}-D)"
