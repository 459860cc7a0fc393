"""Reference prices for equal lending and borrowing rates.

With ``R = r`` the constrained price is the discounted risk-neutral
expectation of the facelifted payoff. Two independent routes compute it: a
Monte-Carlo average over exact lognormal samples and a closed form that
writes a piecewise-linear payoff as a sum of calls.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .constraint import ConfigError
from .sde import BlackScholesModel, make_rng, sample_terminal_risk_neutral

MC_CHUNK = 1 << 18


def bs_call(S, K, r: float, sigma: float, T: float):
    """Black-Scholes call; ``K <= 0`` gives the forward ``S - K e^{-rT}``."""
    S = np.asarray(S, dtype=float)
    K = np.asarray(K, dtype=float)
    disc = math.exp(-r * T)
    if T <= 0 or sigma <= 0:
        fwd = S * math.exp(r * max(T, 0.0))
        return disc * np.maximum(fwd - K, 0.0)
    pos = K > 0
    Ks = np.where(pos, K, 1.0)
    vol = sigma * math.sqrt(T)
    d1 = (np.log(S / Ks) + (r + 0.5 * sigma * sigma) * T) / vol
    call = S * ndtr(d1) - Ks * disc * ndtr(d1 - vol)
    out = np.where(pos, call, S - K * disc)
    return out if out.ndim else float(out)


def bs_put(S, K, r: float, sigma: float, T: float):
    return bs_call(S, K, r, sigma, T) - S + np.asarray(K) * math.exp(-r * T)


@dataclass(frozen=True)
class PiecewiseLinear1D:
    """Continuous piecewise-linear function, extended linearly beyond the ends.

    ``slopes[0]`` applies left of ``breakpoints[0]`` and ``slopes[-1]`` right of
    ``breakpoints[-1]``.
    """

    breakpoints: np.ndarray
    slopes: np.ndarray
    value_at_first: float

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        sl = np.asarray(self.slopes, dtype=float)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "slopes", sl)
        if bp.ndim != 1 or len(bp) < 1 or np.any(np.diff(bp) <= 0):
            raise ConfigError("breakpoints must be a nonempty increasing sequence")
        if sl.shape != (len(bp) + 1,) or not np.all(np.isfinite(sl)):
            raise ConfigError("need one finite slope per segment")

    def values_at_breakpoints(self) -> np.ndarray:
        return self.value_at_first + np.concatenate([[0.0], np.cumsum(self.slopes[1:-1] * np.diff(self.breakpoints))])

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        bp, sl = self.breakpoints, self.slopes
        v = self.values_at_breakpoints()
        out = np.interp(x, bp, v)
        out = np.where(x < bp[0], v[0] + sl[0] * (x - bp[0]), out)
        return np.where(x > bp[-1], v[-1] + sl[-1] * (x - bp[-1]), out)

    @classmethod
    def from_samples(cls, xs, values, tol: float = 1e-9) -> "PiecewiseLinear1D":
        """Interpolant of tabulated values, keeping only points where the slope changes."""
        xs = np.asarray(xs, dtype=float)
        values = np.asarray(values, dtype=float)
        seg = np.diff(values) / np.diff(xs)
        keep = np.concatenate([[True], np.abs(np.diff(seg)) > tol, [True]])
        bx, bv = xs[keep], values[keep]
        inner = np.diff(bv) / np.diff(bx)
        return cls(bx, np.concatenate([[inner[0]], inner, [inner[-1]]]), float(bv[0]))


def facelifted_case2_pw(dhat: float) -> PiecewiseLinear1D:
    """Exact facelift of the case-2 payoff as a piecewise-linear function (``1 <= dhat <= 4``)."""
    if not (1.0 <= dhat <= 4.0):
        raise ConfigError(f"closed form valid for 1 <= dhat <= 4, got {dhat}")
    return PiecewiseLinear1D([1.0 - 0.8 / dhat, 1.0, 1.2], [0.0, dhat, 0.0, 1.0], 0.0)


def case2_pw() -> PiecewiseLinear1D:
    return PiecewiseLinear1D([0.8, 1.0, 1.2], [0.0, 4.0, 0.0, 1.0], 0.0)


def closed_form_price(model: BlackScholesModel, pw: PiecewiseLinear1D, T: float) -> float:
    """Discounted risk-neutral expectation of ``pw`` applied to each coordinate, averaged.

    Uses ``f(x) = f(b0) + s0 (x - b0) + sum_i (s_{i+1} - s_i)(x - b_i)+``.
    """
    disc = math.exp(-model.r * T)
    bp, sl = pw.breakpoints, pw.slopes
    kinks = np.diff(sl)
    prices = []
    for S in model.x0:
        p = disc * (pw.value_at_first - sl[0] * bp[0]) + sl[0] * S
        p += float(np.sum(kinks * bs_call(S, bp, model.r, model.sigma, T)))
        prices.append(p)
    return float(np.mean(prices))


def mc_price(model: BlackScholesModel, payoff, T: float, n_samples: int, seed: int = 0,
             stream: tuple = ()) -> tuple[float, float]:
    """``e^{-rT} E[payoff(X_T)]`` over exact risk-neutral samples, with its standard error.

    ``payoff`` maps an ``(n, d)`` array to ``(n,)`` values.
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    disc = math.exp(-model.r * T)
    total = total_sq = 0.0
    for blk, start in enumerate(range(0, n_samples, MC_CHUNK)):
        m = min(MC_CHUNK, n_samples - start)
        x = sample_terminal_risk_neutral(model, T, m, make_rng(seed, *stream, blk))
        v = np.asarray(payoff(x), dtype=float).reshape(m)
        total += v.sum()
        total_sq += (v * v).sum()
    mean = total / n_samples
    var = max(total_sq / n_samples - mean * mean, 0.0) * n_samples / max(n_samples - 1, 1)
    if n_samples == 1 or var <= 1e-15 * max(mean * mean, 1e-300):
        var = 0.0
    return disc * mean, disc * math.sqrt(var / n_samples)


def separable(pw: PiecewiseLinear1D):
    """Coordinate average ``(1/d) sum_i pw(x_i)`` as an ``(n, d) -> (n,)`` map."""
    return lambda x: pw(np.asarray(x)).mean(axis=-1)
