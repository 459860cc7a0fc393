"""Facelift ``F_C[phi](x) = sup_y phi(x + y) - support_C(y)``.

Three routes are provided:

* closed forms for the piecewise-linear test payoffs,
* a brute-force sup over a dense grid (:class:`GridOracle`), used as the
  independent reference,
* a penalized neural-network regression refined over several rounds
  (:func:`iterative_facelift`), which is what the BSDE scheme uses.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .constraint import ConfigError, ConstraintSet, DomainError
from .nn import (MLP, TrainLoopConfig, TrainingDiverged, forward, input_gradient,
                 loss_and_param_gradients, train)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- payoffs


def payoff_case1(x):
    """Butterfly ``(x-0.8)+ - 2(x-1)+ + (x-1.2)+``."""
    x = np.asarray(x, dtype=float)
    return np.maximum(x - 0.8, 0) - 2 * np.maximum(x - 1.0, 0) + np.maximum(x - 1.2, 0)


def payoff_case2(x):
    """``4[(x-0.8)+ - (x-1)+] + (x-1.2)+``: steep ramp to 0.8, flat, then slope one."""
    x = np.asarray(x, dtype=float)
    return 4 * (np.maximum(x - 0.8, 0) - np.maximum(x - 1.0, 0)) + np.maximum(x - 1.2, 0)


def payoff_case2_nd(x):
    """Coordinate average of :func:`payoff_case2`; ``x`` has shape ``(..., d)``."""
    return payoff_case2(x).mean(axis=-1)


def payoff_case3(x):
    x = np.asarray(x, dtype=float)
    return np.logaddexp(0.0, x) + 4 * np.sin(2 * x) / (1 + 5 * x * x)


def analytic_facelift_case2(x, dhat: float):
    """Closed-form facelift of :func:`payoff_case2` for a slope bound ``1 <= dhat <= 4``.

    Left of 1 it is the tent ``(0.8 - dhat|x-1|)+``; from 1 on the payoff is
    already feasible and is kept.
    """
    if not (1.0 <= dhat <= 4.0):
        raise DomainError(f"closed form valid for 1 <= dhat <= 4, got {dhat}")
    x = np.asarray(x, dtype=float)
    return np.where(x >= 1.0, payoff_case2(x), np.maximum(0.8 - dhat * np.abs(x - 1.0), 0.0))


def analytic_facelift_case2_nd(x, slope: float):
    """Coordinate average of the 1-d closed form with per-coordinate bound ``slope``.

    This is the exact facelift of :func:`payoff_case2_nd` for the box constraint
    of half-width ``slope / d``.
    """
    return analytic_facelift_case2(x, slope).mean(axis=-1)


def analytic_facelift_case1(x, dhat: float):
    """Facelift of the butterfly for ``dhat <= 1``: the tent ``(0.2 - dhat|x-1|)+``."""
    if not (0.0 < dhat <= 1.0):
        raise DomainError(f"closed form valid for 0 < dhat <= 1, got {dhat}")
    x = np.asarray(x, dtype=float)
    return np.maximum(0.2 - dhat * np.abs(x - 1.0), 0.0)


def analytic_facelift_case1_as_printed(x, dhat: float):
    """``(1 - dhat|x-1|)+``; peaks at 1 although the butterfly peaks at 0.2. Kept for audit."""
    x = np.asarray(x, dtype=float)
    return np.maximum(1.0 - dhat * np.abs(x - 1.0), 0.0)


@dataclass
class Payoff:
    """A function ``(n, d) -> (n,)`` with the metadata the oracles need."""

    fn: Callable[[np.ndarray], np.ndarray]
    dim: int = 1
    lipschitz: float = math.inf
    label: str = "custom"
    breakpoints: np.ndarray | None = None
    slopes: np.ndarray | None = None

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1 and self.dim == 1:
            x = x[:, None]
        if x.ndim == 1:
            x = x[None, :]
        return np.asarray(self.fn(x), dtype=float).reshape(len(x))


def make_payoff(label: str, dim: int = 1) -> Payoff:
    if label == "case1":
        return Payoff(lambda x: payoff_case1(x[:, 0]), 1, 1.0, "case1",
                      np.array([0.8, 1.0, 1.2]), np.array([0.0, 1.0, -1.0, 0.0]))
    if label == "case2":
        return Payoff(lambda x: payoff_case2(x[:, 0]), 1, 4.0, "case2",
                      np.array([0.8, 1.0, 1.2]), np.array([0.0, 4.0, 0.0, 1.0]))
    if label == "case2nd":
        # Euclidean Lipschitz constant of the coordinate average of slope-4 ramps
        return Payoff(payoff_case2_nd, dim, 4.0 / math.sqrt(dim), "case2nd")
    if label == "case3":
        return Payoff(lambda x: payoff_case3(x[:, 0]), 1, 8.6, "case3")
    raise ConfigError(f"unknown payoff {label!r}")


def piecewise_linear_payoff(breakpoints, slopes, value_at_first: float) -> Payoff:
    """Continuous piecewise-linear 1-d payoff; ``slopes`` has one more entry than ``breakpoints``."""
    bp = np.asarray(breakpoints, dtype=float)
    sl = np.asarray(slopes, dtype=float)
    if len(sl) != len(bp) + 1 or np.any(np.diff(bp) <= 0):
        raise ConfigError("need sorted breakpoints and one slope per segment")
    vals = value_at_first + np.concatenate([[0.0], np.cumsum(sl[1:-1] * np.diff(bp))])

    def fn(x):
        x = x[:, 0]
        out = np.interp(x, bp, vals)
        out = np.where(x < bp[0], vals[0] + sl[0] * (x - bp[0]), out)
        return np.where(x > bp[-1], vals[-1] + sl[-1] * (x - bp[-1]), out)

    return Payoff(fn, 1, float(np.abs(sl).max()), "custom-piecewise-linear", bp, sl)


def net_payoff(net: MLP, clip: float | None = None, lipschitz: float = math.inf) -> Payoff:
    """Snapshot of a scalar network as a payoff, optionally clipped to ``[-clip, clip]``."""

    def fn(x):
        u = forward(net, x)[:, 0]
        return u if clip is None else np.clip(u, -clip, clip)

    return Payoff(fn, net.in_dim, lipschitz, "net-snapshot")


# ---------------------------------------------------------------- grid oracle


@dataclass
class GridOracle:
    """Payoff tabulated on a regular grid covering ``box`` plus a margin.

    The margin is the distance beyond which the support-function cost exceeds
    any payoff gain, so the discrete sup is not truncated by the grid edge.
    """

    payoff: Payoff
    lo: np.ndarray
    hi: np.ndarray
    h: float
    margin: float
    points: np.ndarray  # (G, d)
    values: np.ndarray  # (G,)
    axes: list = field(default_factory=list)

    @classmethod
    def build(cls, payoff: Payoff, box, h: float, C: ConstraintSet, max_points: int = 4_000_000):
        lo, hi = (np.atleast_1d(np.asarray(b, dtype=float)) for b in box)
        if lo.shape != (payoff.dim,) or np.any(hi <= lo):
            raise ConfigError("box must be nonempty with one interval per dimension")
        if not h > 0:
            raise ConfigError("grid resolution must be positive")
        # the Euclidean ball and the box both satisfy support(y) >= radius*|y|_inf,
        # so a shift y pays off only while the gain over the box minimum exceeds it
        floor = float(_eval_on_axes(payoff, [_axis(lo[i], hi[i], h) for i in range(payoff.dim)],
                                    max_points).min())
        margin = 0.0
        for _ in range(50):
            axes = [_axis(lo[i] - margin, hi[i] + margin, h) for i in range(payoff.dim)]
            vals = _eval_on_axes(payoff, axes, max_points)
            new = float(vals.max() - floor) / C.radius
            if new <= margin + h:
                break
            margin = h * math.ceil(new / h)  # keep the box corners on the grid
        else:
            log.warning("oracle margin did not settle; payoff grows faster than the constraint allows")
        axes = [_axis(lo[i] - margin, hi[i] + margin, h) for i in range(payoff.dim)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, payoff.dim)
        return cls(payoff, lo, hi, h, margin, pts, payoff(pts), axes)

    def error_bound(self, C: ConstraintSet) -> float:
        return (self.payoff.lipschitz + C.radius) * self.h * math.sqrt(self.payoff.dim)


def _axis(a, b, h):
    n = int(math.ceil((b - a) / h - 1e-9))
    return a + h * np.arange(n + 1)


def _eval_on_axes(payoff, axes, max_points):
    size = math.prod(len(a) for a in axes)
    if size > max_points:
        raise ConfigError(f"oracle grid of {size} points exceeds max_points={max_points}")
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    return payoff(pts)


def brute_force_facelift(oracle: GridOracle, C: ConstraintSet, x, chunk_elems: int = 4_000_000):
    """``max_g phi(g) - support_C(g - x)`` over the oracle grid; ``x`` is ``(n, d)`` or ``(n,)`` in 1-d."""
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    if x.ndim == 1:
        x = x[:, None] if oracle.payoff.dim == 1 else x[None, :]
    tol = 1e-12
    if np.any(x < oracle.lo - tol) or np.any(x > oracle.hi + tol):
        raise DomainError("query point outside the oracle box")
    G = len(oracle.points)
    step = max(1, chunk_elems // G)
    out = np.empty(len(x))
    for s in range(0, len(x), step):
        xs = x[s:s + step]
        diff = oracle.points[None, :, :] - xs[:, None, :]
        out[s:s + step] = (oracle.values[None, :] - C.support(diff)).max(axis=1)
    return out[0] if scalar else out


# ---------------------------------------------------------------- NN facelift


STOP_KEYS = {"objective": "objective", "phi": "mse_phi", "reference": "mse_ref"}


@dataclass
class FaceliftTrainSpec:
    eps_pen: float = 1 / 50
    K: int = 3
    sampling_box: tuple = ((0.6,), (1.4,))
    hidden: tuple = (50, 50)
    activation: str = "relu"
    train: TrainLoopConfig = field(default_factory=lambda: TrainLoopConfig(max_iterations=20000))
    literal_previous: bool = False
    stop_rule: str = "objective"  # "objective", "phi", "reference" or "none"
    n_eval: int = 10000

    def validate(self) -> list[str]:
        errs = []
        if not self.eps_pen > 0:
            errs.append("eps_pen must be positive")
        if self.K < 1:
            errs.append("K must be >= 1")
        lo, hi = (np.atleast_1d(b) for b in self.sampling_box)
        if lo.shape != hi.shape or np.any(np.asarray(hi) <= np.asarray(lo)):
            errs.append("sampling box must be nonempty")
        if self.stop_rule not in STOP_KEYS and self.stop_rule != "none":
            errs.append(f"unknown stop rule {self.stop_rule!r}")
        errs += self.train.validate()
        return errs

    def box_arrays(self, dim: int):
        lo, hi = (np.atleast_1d(np.asarray(b, dtype=float)) for b in self.sampling_box)
        if lo.size == 1 and dim > 1:
            lo, hi = np.full(dim, lo[0]), np.full(dim, hi[0])
        return lo, hi


def facelift_loss_fn(phi_vals, C: ConstraintSet, eps_pen: float, prev_vals=None,
                     literal_previous: bool = False):
    """Per-batch L1 facelift loss as a ``(u, jac) -> (value, du, djac)`` map.

    ``|u - phi| + pen_C(Du)/eps + (phi - u)+/eps`` averaged over the batch,
    plus ``(u - prev)+/eps`` when a previous round is given. With
    ``literal_previous`` the extra term is ``(prev - phi)+/eps`` instead, which
    does not depend on the network.
    """
    phi_vals = np.asarray(phi_vals, dtype=float)

    def loss(u, jac):
        n = len(u)
        u = u[:, 0]
        g = jac[:, 0, :]
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(g))):
            # overflowed network: report an infinite loss and let the trainer flag divergence
            return math.inf, np.zeros((n, 1)), np.zeros_like(jac)
        r = u - phi_vals
        pen = C.penalty(g)
        below = np.maximum(-r, 0.0)
        total = np.abs(r) + pen / eps_pen + below / eps_pen
        du = np.sign(r) - (r < 0) / eps_pen
        if prev_vals is not None:
            if literal_previous:
                total = total + np.maximum(prev_vals - phi_vals, 0.0) / eps_pen
            else:
                above = u - prev_vals
                total = total + np.maximum(above, 0.0) / eps_pen
                du = du + (above > 0) / eps_pen
        dg = C.penalty_grad(g) / eps_pen
        return total.mean(), du[:, None] / n, dg[:, None, :] / n

    return loss


def facelift_loss(net: MLP, phi: Payoff, C: ConstraintSet, eps_pen: float, xi,
                  previous: MLP | None = None, literal_previous: bool = False):
    """Loss value and parameter gradients of ``net`` on the sample ``xi``."""
    xi = np.asarray(xi, dtype=float).reshape(-1, phi.dim)
    prev = None if previous is None else forward(previous, xi)[:, 0]
    fn = facelift_loss_fn(phi(xi), C, eps_pen, prev, literal_previous)
    return loss_and_param_gradients(net, xi, fn, with_input_gradient=True)


def uniform_box_sampler(lo, hi):
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)

    def sample(rng, n):
        return lo + (hi - lo) * rng.random((n, len(lo)))

    return sample


@dataclass
class FaceliftResult:
    net: MLP
    rounds: list  # trained net of every round, including a rejected last one
    trace: list  # one dict per round
    stopped_early: bool = False

    @property
    def accepted_rounds(self) -> int:
        return self.trace[-1]["round"] + (0 if self.stopped_early else 1)


def iterative_facelift(phi: Payoff, C: ConstraintSet, spec: FaceliftTrainSpec, rng: np.random.Generator,
                       init: MLP | None = None, reference: Callable | None = None,
                       sampler: Callable | None = None, where: str = "facelift") -> FaceliftResult:
    """Approximate ``F_C[phi]`` from above by successive penalized regressions.

    Round 0 fits ``phi`` under the gradient and domination penalties; every
    later round additionally penalizes exceeding the previous round. Each round
    starts from the previous round's parameters.

    After every round the round-0 objective (L1 fit plus both penalties) is
    measured on a fixed evaluation sample. Under the default
    ``stop_rule="objective"`` the rounds stop as soon as it increases, which
    happens once an iterate dips below the facelift and starts violating the
    constraints; the last non-degraded network is returned. ``"phi"`` compares
    the mean squared distance to ``phi`` instead and ``"reference"`` the
    distance to ``reference``.
    """
    errs = spec.validate()
    if errs:
        raise ConfigError("; ".join(errs))
    if spec.stop_rule == "reference" and reference is None:
        raise ConfigError("stop rule 'reference' needs a reference function")
    d = phi.dim
    if sampler is None:
        sampler = uniform_box_sampler(*spec.box_arrays(d))
    x_eval = sampler(rng, spec.n_eval)
    if init is not None:
        net = init.copy()
    else:
        net = MLP.init([d, *spec.hidden, 1], spec.activation, rng,
                       x_eval.mean(axis=0), x_eval.std(axis=0) + 1e-12)
    phi_eval = phi(x_eval)
    ref_eval = None if reference is None else np.asarray(reference(x_eval), dtype=float).reshape(-1)

    rounds, trace = [], []
    previous = None
    stopped = False
    best = None
    for k in range(spec.K):
        prev_net = previous

        def batch_sampler(rng, n, prev_net=prev_net):
            x = sampler(rng, n)
            prev = None if prev_net is None else forward(prev_net, x)[:, 0]
            return x, phi(x), prev

        def objective(nets, batch, need_grad):
            x, ph, prev = batch
            fn = facelift_loss_fn(ph, C, spec.eps_pen, prev, spec.literal_previous)
            value, grads = loss_and_param_gradients(nets[0], x, fn, with_input_gradient=True)
            return value, [grads]

        try:
            res = train([net], objective, batch_sampler, spec.train, rng, where=f"{where} round {k}")
        except TrainingDiverged as exc:
            raise TrainingDiverged(exc.iteration, exc.param_norms, f"{where} round {k}") from exc
        net = res.nets[0]
        rounds.append(net)
        u = forward(net, x_eval)[:, 0]
        grad = input_gradient(net, x_eval)[:, 0, :]
        entry = {"round": k, "train_loss": res.best_loss,
                 "mse_phi": float(np.mean((u - phi_eval) ** 2)),
                 "grad_violation": float(C.penalty(grad).mean()),
                 "dom_violation": float(np.maximum(phi_eval - u, 0.0).mean())}
        entry["objective"] = float(np.mean(np.abs(u - phi_eval))) + (
            entry["grad_violation"] + entry["dom_violation"]) / spec.eps_pen
        if ref_eval is not None:
            e = (u - ref_eval) ** 2
            entry["mse_ref"] = float(e.mean())
            entry["stderr_ref"] = float(e.std(ddof=1) / math.sqrt(len(e)))
        trace.append(entry)
        log.debug("%s round %d: %s", where, k, entry)
        if k and spec.stop_rule != "none":
            key = STOP_KEYS[spec.stop_rule]
            if entry[key] > trace[-2][key]:
                stopped = True
                break
        best = net
        previous = net
    return FaceliftResult(best, rounds, trace, stopped)


def facelift_error(net, reference, box=None, n_eval: int = 10000, rng=None, sampler=None):
    """Monte-Carlo mean squared error of ``net`` against ``reference`` and its standard error."""
    rng = np.random.default_rng(rng)
    if sampler is None:
        sampler = uniform_box_sampler(*box)
    x = sampler(rng, n_eval)
    u = forward(net, x)[:, 0] if isinstance(net, MLP) else np.asarray(net(x)).reshape(-1)
    ref = np.asarray(reference(x), dtype=float).reshape(-1)
    e = (u - ref) ** 2
    return float(e.mean()), float(e.std(ddof=1) / math.sqrt(len(e)))
