"""Convex constraint sets, their support functions and time grids.

The constraint acts on the spatial gradient of the value function. Two sets
are provided: the centered Euclidean ball (the default everywhere) and the
centered axis-aligned box, i.e. the sup-norm ball, which makes separable
payoffs facelift coordinate by coordinate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DomainError(ValueError):
    """Raised when an argument lies outside the domain of an operation."""


class ConfigError(ValueError):
    """Raised for invalid configuration values."""


def _finite(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise DomainError(f"{name} must be finite")
    return a


@dataclass(frozen=True)
class ConvexBall:
    """Centered Euclidean ball ``{z : |z|_2 <= radius}`` in dimension ``dim``.

    All vector operations accept a single vector of shape ``(dim,)`` or a
    batch of shape ``(n, dim)``; reductions run over the last axis.
    """

    radius: float
    dim: int = 1

    def __post_init__(self):
        if not (np.isfinite(self.radius) and self.radius > 0):
            raise ConfigError(f"radius must be positive, got {self.radius}")
        if int(self.dim) < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")

    norm_ord = 2

    def support(self, y):
        y = _finite(y, "y")
        return self.radius * np.linalg.norm(y, axis=-1)

    def h(self, p):
        p = _finite(p, "p")
        return self.radius - np.linalg.norm(p, axis=-1)

    def project(self, g):
        g = _finite(g, "g")
        n = np.linalg.norm(g, axis=-1, keepdims=True)
        scale = np.where(n > self.radius, self.radius / np.where(n > 0, n, 1.0), 1.0)
        return g * scale

    def penalty(self, g):
        g = _finite(g, "g")
        if g.shape[-1] == 1:
            return np.maximum(np.abs(g[..., 0]) - self.radius, 0.0)
        return np.abs(g - self.project(g)).sum(axis=-1)

    def penalty_grad(self, g):
        """Subgradient of :meth:`penalty` with respect to ``g``."""
        g = np.asarray(g, dtype=float)
        if g.shape[-1] == 1:
            return np.sign(g) * (np.abs(g) > self.radius)
        n = np.linalg.norm(g, axis=-1, keepdims=True)
        out = n > self.radius
        safe = np.where(out, n, 1.0)
        s = np.sign(g)
        l1 = np.abs(g).sum(axis=-1, keepdims=True)
        # d/dg [ |g|_1 (1 - r/|g|_2) ]
        grad = s * (1.0 - self.radius / safe) + self.radius * l1 * g / safe**3
        return np.where(out, grad, 0.0)


@dataclass(frozen=True)
class ConvexBox:
    """Centered box ``{z : |z_i| <= radius}``; its support function is ``radius*|y|_1``."""

    radius: float
    dim: int = 1

    def __post_init__(self):
        if not (np.isfinite(self.radius) and self.radius > 0):
            raise ConfigError(f"radius must be positive, got {self.radius}")
        if int(self.dim) < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")

    norm_ord = np.inf

    def support(self, y):
        y = _finite(y, "y")
        return self.radius * np.abs(y).sum(axis=-1)

    def h(self, p):
        # inf over the Euclidean unit sphere of sum |y_i| (radius - |p_i|):
        # a coordinate vector when p is in C, otherwise y spread over the
        # violating coordinates (Cauchy-Schwarz)
        p = _finite(p, "p")
        a = self.radius - np.abs(p)
        return np.where(a.min(axis=-1) >= 0, a.min(axis=-1), -np.linalg.norm(np.minimum(a, 0.0), axis=-1))

    def project(self, g):
        g = _finite(g, "g")
        return np.clip(g, -self.radius, self.radius)

    def penalty(self, g):
        g = _finite(g, "g")
        return np.maximum(np.abs(g) - self.radius, 0.0).sum(axis=-1)

    def penalty_grad(self, g):
        g = np.asarray(g, dtype=float)
        return np.sign(g) * (np.abs(g) > self.radius)


ConstraintSet = ConvexBall | ConvexBox


def make_constraint(radius: float, dim: int = 1, kind: str = "ball") -> ConstraintSet:
    if kind == "ball":
        return ConvexBall(radius, dim)
    if kind == "box":
        return ConvexBox(radius, dim)
    raise ConfigError(f"unknown constraint kind {kind!r}")


def support_function(C: ConstraintSet, y):
    return C.support(y)


def h_operator(C: ConstraintSet, p):
    """``inf_{|y|=1} (support(y) - y.p)``; nonnegative exactly when ``p`` is in ``C``."""
    return C.h(p)


def project(C: ConstraintSet, g):
    return C.project(g)


def gradient_penalty(C: ConstraintSet, g):
    """L1 distance from ``g`` to its projection on ``C``.

    Exact in dimension one. For the Euclidean ball in higher dimension the L1
    norm of the Euclidean projection residual is used, which is an upper bound
    of the true L1 distance and vanishes exactly on ``C``.
    """
    return C.penalty(g)


@dataclass(frozen=True)
class TimeGrids:
    horizon: float
    constraint_dates: np.ndarray
    sub_grids: tuple = field(default_factory=tuple)

    def __post_init__(self):
        r = np.asarray(self.constraint_dates, dtype=float)
        if r.ndim != 1 or len(r) < 2:
            raise ConfigError("need at least two constraint dates")
        if r[0] != 0.0 or r[-1] != self.horizon:
            raise ConfigError("constraint dates must run from 0 to the horizon")
        if np.any(np.diff(r) <= 0):
            raise ConfigError("constraint dates must be strictly increasing")
        if len(self.sub_grids) != len(r) - 1:
            raise ConfigError("one sub-grid per constraint interval is required")
        for k, g in enumerate(self.sub_grids):
            g = np.asarray(g)
            if g[0] != r[k] or g[-1] != r[k + 1] or np.any(np.diff(g) <= 0):
                raise ConfigError(f"sub-grid {k} does not partition [r_k, r_k+1]")

    @property
    def n_constraints(self) -> int:
        """Number of constraint intervals (kappa)."""
        return len(self.constraint_dates) - 1

    def flat_times(self) -> np.ndarray:
        """All grid times in increasing order, shared endpoints counted once."""
        parts = [np.asarray(self.sub_grids[0])]
        parts += [np.asarray(g)[1:] for g in self.sub_grids[1:]]
        return np.concatenate(parts)

    def constraint_indices(self) -> np.ndarray:
        """Positions of the constraint dates inside :meth:`flat_times`."""
        steps = [len(g) - 1 for g in self.sub_grids]
        return np.concatenate([[0], np.cumsum(steps)])


def build_grids(T: float, kappa: int, n_k: int = 1) -> TimeGrids:
    """Uniform constraint dates ``j*T/kappa`` with ``n_k`` uniform steps in between."""
    if not T > 0:
        raise ConfigError(f"horizon must be positive, got {T}")
    if int(kappa) < 1 or int(n_k) < 1:
        raise ConfigError("kappa and n_k must be >= 1")
    dates = np.linspace(0.0, T, int(kappa) + 1)
    dates[-1] = T
    subs = []
    for k in range(int(kappa)):
        g = np.linspace(dates[k], dates[k + 1], int(n_k) + 1)
        g[0], g[-1] = dates[k], dates[k + 1]
        subs.append(g)
    return TimeGrids(float(T), dates, tuple(subs))
