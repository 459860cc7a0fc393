"""Backward deep scheme for BSDEs with a facelift applied at constraint dates.

Going backward over the time grid, each step regresses the next-date value
onto the one-step target ``y - f(t, x, y, z) h + z.dB`` with a value network
and a gradient network, and at every constraint date the fitted value
function is clipped to ``[-M, M]`` and replaced by its penalized
neural-network facelift.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .constraint import ConfigError, ConstraintSet, DomainError, TimeGrids, build_grids
from .facelift import FaceliftTrainSpec, Payoff, iterative_facelift, net_payoff
from .nn import MLP, TrainLoopConfig, TrainingDiverged, backprop, forward, forward_cached, input_gradient, train
from .sde import BlackScholesModel, euler_step, make_rng

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- driver


@dataclass(frozen=True)
class DriverSpec:
    """Differential-rates driver.

    ``mode="literal"`` uses ``-(R-r)(y - z.sigma^{-1}x)``; ``"negative_part"``
    keeps only the borrowing side ``-(R-r) min(y - z.sigma^{-1}x, 0)``;
    ``"zero"`` is the null driver.
    """

    r: float = 0.05
    R: float = 0.05
    mu: float = 0.07
    sigma: float = 0.3
    mode: str = "literal"

    def __post_init__(self):
        if self.mode not in ("literal", "negative_part", "zero"):
            raise ConfigError(f"unknown driver mode {self.mode!r}")

    @classmethod
    def from_model(cls, model: BlackScholesModel, mode: str = "literal") -> "DriverSpec":
        return cls(model.r, model.R, model.mu, model.sigma, mode)


def _driver_terms(spec: DriverSpec, x):
    x = np.asarray(x, dtype=float)
    if np.any(x == 0):
        raise DomainError("driver needs nonzero prices")
    sinv = 1.0 / (spec.sigma * x)  # diagonal of sigma(x)^{-1}
    return sinv * (spec.mu - spec.r) * x, sinv * x


def driver_f(spec: DriverSpec, t, x, y, z):
    """Driver value; ``x, z`` are ``(d,)`` or ``(n, d)``, ``y`` scalar or ``(n,)``."""
    if spec.mode == "zero":
        return np.zeros_like(np.asarray(y, dtype=float))
    c, e = _driver_terms(spec, x)
    z = np.asarray(z, dtype=float)
    u = np.asarray(y, dtype=float) - (z * e).sum(axis=-1)
    if spec.mode == "negative_part":
        u = np.minimum(u, 0.0)
    return -spec.r * np.asarray(y) - (z * c).sum(axis=-1) - (spec.R - spec.r) * u


def driver_partials(spec: DriverSpec, t, x, y, z):
    """``(df/dy (n,), df/dz (n, d))``; the negative part uses the subgradient 0 at the kink."""
    y = np.asarray(y, dtype=float)
    if spec.mode == "zero":
        return np.zeros_like(y), np.zeros_like(np.asarray(z, dtype=float))
    c, e = _driver_terms(spec, x)
    if spec.mode == "literal":
        w = np.ones_like(y)
    else:
        w = (y - (np.asarray(z) * e).sum(axis=-1) < 0).astype(float)
    k = (spec.R - spec.r) * w
    return -spec.r - k, -c + k[..., None] * e


def one_step_target(spec: DriverSpec, t, x, y, z, h: float, dB):
    """``F(t, x, y, z, h, dB) = y - f(t, x, y, z) h + z.dB``."""
    if not h > 0:
        raise ConfigError("step length must be positive")
    return np.asarray(y) - driver_f(spec, t, x, y, z) * h + (np.asarray(z) * np.asarray(dB)).sum(axis=-1)


# ---------------------------------------------------------------- configuration


@dataclass
class SchemeConfig:
    grids: TimeGrids = field(default_factory=lambda: build_grids(1.0, 20, 1))
    clip: float | None = None  # None: twice the sup of the facelifted terminal payoff
    hidden: tuple = (50, 50)
    activation: str = "tanh"
    first_step: TrainLoopConfig = field(default_factory=lambda: TrainLoopConfig(
        max_iterations=4000, schedule="plateau"))
    step: TrainLoopConfig = field(default_factory=lambda: TrainLoopConfig(
        max_iterations=1500, schedule="plateau"))
    terminal_facelift: FaceliftTrainSpec = field(default_factory=lambda: FaceliftTrainSpec(
        K=2, train=TrainLoopConfig(max_iterations=6000)))
    facelift: FaceliftTrainSpec = field(default_factory=lambda: FaceliftTrainSpec(
        K=2, train=TrainLoopConfig(max_iterations=600)))
    eps_per_date: tuple | None = None  # eps_pen per constraint date r_0..r_kappa
    warm_start: bool = True
    facelift_warm_start: bool = True
    initial_spread: bool = True
    # skip an intermediate facelift when the mean (|Dv| - radius)+ over the state
    # sample is at most this; None always facelifts
    feasibility_tol: float | None = 1e-3
    driver_mode: str = "literal"
    n_eval: int = 10000

    def validate(self) -> list[str]:
        errs = []
        if self.clip is not None and not self.clip > 0:
            errs.append("clip bound must be positive")
        if self.activation not in ("relu", "tanh", "elu"):
            errs.append(f"unknown activation {self.activation!r}")
        if min(self.hidden, default=0) < 1:
            errs.append("hidden layer sizes must be positive")
        if self.driver_mode not in ("literal", "negative_part", "zero"):
            errs.append(f"unknown driver mode {self.driver_mode!r}")
        if self.feasibility_tol is not None and self.feasibility_tol < 0:
            errs.append("feasibility_tol must be nonnegative")
        if self.eps_per_date is not None and len(self.eps_per_date) != len(self.grids.constraint_dates):
            errs.append("eps_per_date needs one value per constraint date")
        for name in ("first_step", "step"):
            errs += [f"{name}: {e}" for e in getattr(self, name).validate()]
        for name in ("terminal_facelift", "facelift"):
            errs += [f"{name}: {e}" for e in getattr(self, name).validate()]
        return errs


# ---------------------------------------------------------------- value functions


@dataclass
class StepNets:
    """Networks of one grid date and the value function stored for it."""

    index: int  # position in the flattened time grid
    time: float
    value_net: MLP | None
    z_net: MLP | None
    clip: float
    facelift_net: MLP | None = None
    constraint_date: int | None = None  # k if this is r_k
    diagnostics: dict = field(default_factory=dict)

    @property
    def facelifted(self) -> bool:
        return self.facelift_net is not None

    def value(self, x) -> np.ndarray:
        """Stored value ``(n, d) -> (n,)``: the facelift if applied, clipped to ``[-M, M]``."""
        net = self.facelift_net if self.facelift_net is not None else self.value_net
        return np.clip(forward(net, x)[:, 0], -self.clip, self.clip)

    def raw_value(self, x) -> np.ndarray:
        return np.clip(forward(self.value_net, x)[:, 0], -self.clip, self.clip)


def state_sampler(model: BlackScholesModel, times: np.ndarray, j: int, initial_spread: bool):
    """Sampler of ``(X_j, dB_j, X_{j+1})`` along Euler paths of the flattened grid.

    With ``initial_spread`` the date-0 states are drawn from the one-step law
    instead of the point mass at ``x0``, so that the date-0 value network (and
    its facelift) is learned on a neighbourhood of ``x0``.
    """
    d = model.dim
    x0 = model.x0_array
    mult = 1.0 + model.mu * np.diff(times)

    def spread(rng, n):
        dt = times[1] - times[0]
        return euler_step(model, 0.0, x0, dt, rng.standard_normal((n, d)) * math.sqrt(dt))

    def sample(rng, n):
        if j == 0:
            x = spread(rng, n) if initial_spread else np.broadcast_to(x0, (n, d)).copy()
        else:
            dt = np.diff(times[:j + 1])
            dB = rng.standard_normal((n, j, d)) * np.sqrt(dt)[None, :, None]
            # GBM Euler: x_{i+1} = x_i (1 + mu dt + sigma dB)
            x = x0 * np.prod(mult[:j, None] + model.sigma * dB, axis=1)
        if j == len(times) - 1:
            return x, None, None
        dt = times[j + 1] - times[j]
        dB = rng.standard_normal((n, d)) * math.sqrt(dt)
        return x, dB, euler_step(model, times[j], x, dt, dB)

    return sample


# ---------------------------------------------------------------- steps


def train_step(j: int, next_value: Callable, model: BlackScholesModel, grids: TimeGrids,
               cfg: SchemeConfig, rng: np.random.Generator, init: tuple | None = None,
               train_cfg: TrainLoopConfig | None = None) -> StepNets:
    """Fit value and gradient networks at grid index ``j`` against ``next_value`` at ``j + 1``."""
    times = grids.flat_times()
    t, h = times[j], times[j + 1] - times[j]
    driver = DriverSpec.from_model(model, cfg.driver_mode)
    sampler = state_sampler(model, times, j, cfg.initial_spread)
    d = model.dim

    def batches(rng, n):
        x, dB, x_next = sampler(rng, n)
        return x, dB, next_value(x_next)

    if init is None:
        probe = sampler(rng, cfg.n_eval)[0]
        shift, scale = probe.mean(axis=0), probe.std(axis=0) + 1e-12
        vnet = MLP.init([d, *cfg.hidden, 1], cfg.activation, rng, shift, scale)
        znet = MLP.init([d, *cfg.hidden, d], cfg.activation, rng, shift, scale)
    else:
        vnet, znet = init

    def objective(nets, batch, need_grad):
        x, dB, target = batch
        y, cy = forward_cached(nets[0], x)
        z, cz = forward_cached(nets[1], x)
        y = y[:, 0]
        F = one_step_target(driver, t, x, y, z, h, dB)
        res = target - F
        loss = float(np.mean(res * res))
        if not need_grad:
            return loss, None
        fy, fz = driver_partials(driver, t, x, y, z)
        g = -2.0 * res / len(res)  # dL/dF
        gy = g * (1.0 - fy * h)
        gz = g[:, None] * (dB - fz * h)
        return loss, [backprop(nets[0], cy, gy[:, None]), backprop(nets[1], cz, gz)]

    try:
        res = train([vnet, znet], objective, batches, train_cfg or cfg.step, rng, where=f"step {j}")
    except TrainingDiverged as exc:
        raise TrainingDiverged(exc.iteration, exc.param_norms, f"step {j}") from exc
    return StepNets(j, float(t), res.nets[0], res.nets[1], math.inf,
                    diagnostics={"residual_loss": res.best_loss, "trace": res.trace})


def k_increment(pre: Callable, post: Callable, x) -> dict:
    """Jump created by the facelift at a constraint date, over the sample ``x``."""
    a = np.asarray(pre(x), dtype=float)
    b = np.asarray(post(x), dtype=float)
    up, down = np.maximum(b - a, 0.0), np.maximum(a - b, 0.0)
    return {"mean_up": float(up.mean()), "mean_down": float(down.mean()),
            "mean_diff": float((b - a).mean()),
            "quantiles": [float(q) for q in np.quantile(b - a, [0.05, 0.5, 0.95])]}


def apply_constraint(step: StepNets, phi: Payoff, C: ConstraintSet, spec: FaceliftTrainSpec, M: float,
                     rng: np.random.Generator, sampler: Callable, init: MLP | None = None) -> StepNets:
    """Clip ``phi`` to ``[-M, M]``, facelift it on states from ``sampler`` and record the K-increment."""
    target = Payoff(lambda x: np.clip(phi(x), -M, M), phi.dim, phi.lipschitz, phi.label)
    res = iterative_facelift(target, C, spec, rng, init=init, sampler=sampler,
                             where=f"facelift at grid index {step.index}")
    step.facelift_net = res.net
    step.clip = M
    x_eval = sampler(rng, spec.n_eval)
    step.diagnostics["k_increment"] = k_increment(target, step.value, x_eval)
    step.diagnostics["facelift_trace"] = res.trace
    return step


def gradient_violation(net: MLP, C: ConstraintSet, x) -> float:
    """Mean of ``(-H(Dv))+`` over ``x``, i.e. how far the gradients of ``net`` leave ``C``."""
    g = input_gradient(net, x)[:, 0, :]
    return float(np.maximum(-C.h(g), 0.0).mean())


# ---------------------------------------------------------------- scheme


@dataclass
class SolveResult:
    y0: float
    steps: list  # StepNets ordered by grid index, terminal date last
    diagnostics: list  # one row per grid index
    seed: int = 0


def _constant_sampler(sample_x):
    return lambda rng, n: sample_x(rng, n)[0]


def solve(model: BlackScholesModel, payoff: Payoff, C: ConstraintSet | None, scheme: SchemeConfig,
          seed: int = 0) -> SolveResult:
    """Run the backward scheme; ``C=None`` gives the plain deep BSDE solver."""
    errs = scheme.validate()
    if errs:
        raise ConfigError("; ".join(errs))
    grids = scheme.grids
    times = grids.flat_times()
    N = len(times) - 1
    cidx = {int(i): k for k, i in enumerate(grids.constraint_indices())}
    root = 0

    def rng_for(*stream):
        return make_rng(seed, *stream)

    def eps_for(k, spec):
        if scheme.eps_per_date is None:
            return spec
        return replace(spec, eps_pen=float(scheme.eps_per_date[k]))

    # terminal date
    t0 = time.perf_counter()
    term_sampler = _constant_sampler(state_sampler(model, times, N, scheme.initial_spread))
    terminal = StepNets(N, float(times[N]), None, None, math.inf, constraint_date=cidx[N])
    x_eval = term_sampler(rng_for(root, N, 9), scheme.n_eval)
    if C is None:
        M = scheme.clip if scheme.clip is not None else 2.0 * float(np.abs(payoff(x_eval)).max())
        terminal.clip = M
        next_value = lambda x: np.clip(payoff(x), -M, M)  # noqa: E731
        terminal.diagnostics["k_increment"] = None
    else:
        spec = eps_for(cidx[N], scheme.terminal_facelift)
        M0 = scheme.clip if scheme.clip is not None else math.inf
        apply_constraint(terminal, payoff, C, spec, M0, rng_for(root, N, 1), term_sampler)
        if scheme.clip is None:
            M = 2.0 * float(np.abs(forward(terminal.facelift_net, x_eval)).max())
            terminal.clip = M
        else:
            M = scheme.clip
            if np.abs(forward(terminal.facelift_net, x_eval)).max() > M:
                log.warning("clip bound %.4g below the facelifted terminal payoff", M)
        next_value = terminal.value
    terminal.diagnostics["wall_time"] = time.perf_counter() - t0
    steps = [terminal]
    facelift_init = terminal.facelift_net

    init = None
    for j in range(N - 1, -1, -1):
        t0 = time.perf_counter()
        cfg_j = scheme.first_step if (j == N - 1 or not scheme.warm_start) else scheme.step
        step = train_step(j, next_value, model, grids, scheme, rng_for(root, j, 0),
                          init=init if scheme.warm_start else None, train_cfg=cfg_j)
        step.clip = M
        if C is not None and j in cidx:
            step.constraint_date = cidx[j]
            phi = net_payoff(step.value_net)
            sampler = _constant_sampler(state_sampler(model, times, j, scheme.initial_spread))
            x_chk = sampler(rng_for(root, j, 2), scheme.n_eval)
            viol = gradient_violation(step.value_net, C, x_chk)
            step.diagnostics["gradient_violation"] = viol
            if scheme.feasibility_tol is not None and viol <= scheme.feasibility_tol:
                # gradients already in C: the facelift is the identity
                step.diagnostics["k_increment"] = k_increment(step.value, step.value, x_chk)
                step.diagnostics["facelift_skipped"] = True
            else:
                apply_constraint(step, phi, C, eps_for(cidx[j], scheme.facelift), M, rng_for(root, j, 1),
                                 sampler, init=facelift_init if scheme.facelift_warm_start else None)
                step.diagnostics["facelift_skipped"] = False
                facelift_init = step.facelift_net
        step.diagnostics["wall_time"] = time.perf_counter() - t0
        log.info("step %d (t=%.3f): residual %.3e, violation %.2e, value at x0 %.5f", j, step.time,
                 step.diagnostics["residual_loss"], step.diagnostics.get("gradient_violation", math.nan),
                 step.value(model.x0_array[None, :])[0])
        init = (step.value_net, step.z_net)
        next_value = step.value
        steps.append(step)

    steps.reverse()
    y0 = float(steps[0].value(model.x0_array[None, :])[0])
    rows = []
    for s in steps:
        ki = s.diagnostics.get("k_increment")
        rows.append({"k": s.index, "time": s.time,
                     "residual_loss": s.diagnostics.get("residual_loss", math.nan),
                     "k_increment": math.nan if not ki else ki["mean_diff"],
                     "k_increment_down": math.nan if not ki else ki["mean_down"],
                     "gradient_violation": s.diagnostics.get("gradient_violation", math.nan),
                     "wall_time": s.diagnostics.get("wall_time", math.nan)})
    return SolveResult(y0, steps, rows, seed)


def _solve_job(args):
    model, payoff_label, dim, C, scheme, seed = args
    from .facelift import make_payoff
    return solve(model, make_payoff(payoff_label, dim), C, scheme, seed)


def multi_run(model: BlackScholesModel, payoff: Payoff, C: ConstraintSet | None, scheme: SchemeConfig,
              seeds, workers: int = 1):
    """Independent solves over ``seeds``; returns ``(mean, std or None, results)``.

    ``std`` is the sample standard deviation and is ``None`` for a single run.
    Parallel workers rebuild the payoff from its label, so only registered
    payoffs can be run with ``workers > 1``.
    """
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("at least one seed is required")
    if workers > 1:
        jobs = [(model, payoff.label, payoff.dim, C, scheme, s) for s in seeds]
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_solve_job, jobs))
    else:
        results = [solve(model, payoff, C, scheme, s) for s in seeds]
    y = np.array([r.y0 for r in results])
    std = float(y.std(ddof=1)) if len(y) > 1 else None
    return float(y.mean()), std, results
