"""Black-Scholes dynamics, Euler paths and exact terminal sampling."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .constraint import ConfigError, DomainError, TimeGrids

# paths are drawn in fixed-size blocks, each from its own child seed, so the
# result does not depend on how blocks are distributed over workers
BLOCK_SIZE = 8192


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Generator for the substream ``stream`` of the master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream)))


@dataclass(frozen=True)
class BlackScholesModel:
    mu: float = 0.07
    sigma: float = 0.3
    r: float = 0.05
    R: float = 0.05
    x0: tuple = (1.0,)

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        object.__setattr__(self, "x0", tuple(float(v) for v in x0))
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if np.any(x0 <= 0):
            raise ConfigError("initial prices must be positive")
        if self.R < self.r:
            warnings.warn(f"borrowing rate R={self.R} below lending rate r={self.r}", stacklevel=2)

    @property
    def dim(self) -> int:
        return len(self.x0)

    @property
    def x0_array(self) -> np.ndarray:
        return np.array(self.x0)

    def drift(self, t, x):
        return self.mu * np.asarray(x)

    def diffusion(self, t, x):
        """Diagonal of ``sigma(t, x)``."""
        return self.sigma * np.asarray(x)

    def diffusion_inv(self, t, x):
        x = np.asarray(x, dtype=float)
        if np.any(x == 0):
            raise DomainError("diffusion is singular at a zero price")
        return 1.0 / (self.sigma * x)


def euler_step(model: BlackScholesModel, t: float, x, dt: float, dB):
    x = np.asarray(x, dtype=float)
    return x + model.drift(t, x) * dt + model.diffusion(t, x) * np.asarray(dB)


@dataclass(frozen=True)
class PathBatch:
    times: np.ndarray
    states: np.ndarray  # (n_paths, n_times, d)
    increments: np.ndarray  # (n_paths, n_times - 1, d)
    seed_record: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    def to_csv(self, path) -> None:
        """Dump as long-format rows ``path_id, time, coord, value``."""
        n, m, d = self.states.shape
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path_id", "time", "coord", "value"])
            for p in range(n):
                for j in range(m):
                    for c in range(d):
                        w.writerow([p, repr(float(self.times[j])), c, repr(float(self.states[p, j, c]))])


def _euler_block(model, times, x_start, dB):
    n, steps, d = dB.shape
    states = np.empty((n, steps + 1, d))
    states[:, 0] = x_start
    x = states[:, 0]
    for i in range(steps):
        x = euler_step(model, times[i], x, times[i + 1] - times[i], dB[:, i])
        states[:, i + 1] = x
    return states


def simulate_euler(model: BlackScholesModel, times, n_paths: int, rng: np.random.Generator,
                   x_start=None):
    """Euler paths over ``times`` drawn from a single generator; returns (states, dB)."""
    times = np.asarray(times, dtype=float)
    dt = np.diff(times)
    dB = rng.standard_normal((n_paths, len(dt), model.dim)) * np.sqrt(dt)[None, :, None]
    x_start = model.x0_array if x_start is None else x_start
    return _euler_block(model, times, x_start, dB), dB


def simulate_paths(model: BlackScholesModel, grids: TimeGrids | np.ndarray, n_paths: int,
                   seed: int = 0, stream: tuple = ()) -> PathBatch:
    """Euler paths on the flattened grid, reproducible for a given ``(seed, stream)``."""
    if n_paths < 1:
        raise ConfigError("n_paths must be >= 1")
    times = grids.flat_times() if isinstance(grids, TimeGrids) else np.asarray(grids, dtype=float)
    states, incs = [], []
    for blk, start in enumerate(range(0, n_paths, BLOCK_SIZE)):
        m = min(BLOCK_SIZE, n_paths - start)
        s, dB = simulate_euler(model, times, m, make_rng(seed, *stream, blk))
        states.append(s)
        incs.append(dB)
    return PathBatch(times, np.concatenate(states), np.concatenate(incs),
                     {"seed": int(seed), "stream": list(stream), "block_size": BLOCK_SIZE})


def sample_terminal_risk_neutral(model: BlackScholesModel, T: float, n_paths: int,
                                 rng: np.random.Generator, z=None) -> np.ndarray:
    """Exact risk-neutral GBM samples ``x0 exp((r - sigma^2/2) T + sigma sqrt(T) Z)``."""
    if not T > 0:
        raise ConfigError("T must be positive")
    if z is None:
        z = rng.standard_normal((n_paths, model.dim))
    z = np.asarray(z, dtype=float).reshape(n_paths, model.dim)
    s = model.sigma
    return model.x0_array * np.exp((model.r - 0.5 * s * s) * T + s * np.sqrt(T) * z)
