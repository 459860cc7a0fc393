"""Feedforward networks with exact input gradients, Adam and a training loop.

Input gradients are obtained by pushing tangents forward through the layers
alongside the primal values. Parameter gradients of a loss that depends on
both the outputs and the input gradients are then computed by one reverse
sweep over the primal and the tangent computations, which is exact (no
finite differences) for every activation provided here.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .constraint import ConfigError

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


# activation: (rho, rho', rho'')
def _relu(a):
    return np.maximum(a, 0.0)


def _relu_d(a):
    # derivative at exactly 0 is taken as 0
    return (a > 0).astype(a.dtype)


def _relu_dd(a):
    return None


def _tanh_d(a):
    t = np.tanh(a)
    return 1.0 - t * t


def _tanh_dd(a):
    t = np.tanh(a)
    return -2.0 * t * (1.0 - t * t)


def _elu(a):
    return np.where(a > 0, a, np.expm1(np.minimum(a, 0.0)))


def _elu_d(a):
    return np.where(a > 0, 1.0, np.exp(np.minimum(a, 0.0)))


def _elu_dd(a):
    return np.where(a > 0, 0.0, np.exp(np.minimum(a, 0.0)))


ACTIVATIONS = {
    "relu": (_relu, _relu_d, _relu_dd),
    "tanh": (np.tanh, _tanh_d, _tanh_dd),
    "elu": (_elu, _elu_d, _elu_dd),
}
ACTIVATION_IDS = {"relu": 0, "tanh": 1, "elu": 2}


@dataclass
class MLP:
    """Fully connected network ``R^d -> R^out`` with a linear output layer.

    ``weights[l]`` has shape ``(fan_in, fan_out)`` so a batch ``x`` of shape
    ``(n, d)`` is propagated as ``x @ W + b``. Inputs are first standardized
    by the fixed (non-trained) ``in_shift`` and ``in_scale``.
    """

    weights: list
    biases: list
    activations: tuple
    in_shift: np.ndarray | None = None
    in_scale: np.ndarray | None = None

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ConfigError("weights and biases differ in length")
        if len(self.activations) != len(self.weights) - 1:
            raise ConfigError("one activation per hidden layer is required")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {a!r}")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ConfigError(f"layer {l} has inconsistent shapes")
            if l and W.shape[0] != self.weights[l - 1].shape[1]:
                raise ConfigError(f"layer {l} does not chain with layer {l - 1}")
        d = self.weights[0].shape[0]
        self.in_shift = np.zeros(d) if self.in_shift is None else np.asarray(self.in_shift, dtype=float)
        self.in_scale = np.ones(d) if self.in_scale is None else np.asarray(self.in_scale, dtype=float)
        if self.in_shift.shape != (d,) or self.in_scale.shape != (d,) or np.any(self.in_scale <= 0):
            raise ConfigError("input normalization must match the input dimension")

    @classmethod
    def init(cls, layer_sizes: Sequence[int], activation="relu", rng=None,
             in_shift=None, in_scale=None) -> "MLP":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(rng)
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ConfigError(f"bad layer sizes {sizes}")
        acts = (activation,) * (len(sizes) - 2) if isinstance(activation, str) else tuple(activation)
        Ws, bs = [], []
        for fi, fo in zip(sizes[:-1], sizes[1:]):
            lim = math.sqrt(6.0 / (fi + fo))
            Ws.append(rng.uniform(-lim, lim, size=(fi, fo)))
            bs.append(np.zeros(fo))
        return cls(Ws, bs, acts, in_shift, in_scale)

    @property
    def layer_sizes(self) -> list:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> list:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> "MLP":
        return MLP(list(params[0::2]), list(params[1::2]), self.activations,
                   self.in_shift, self.in_scale)

    def copy(self) -> "MLP":
        return self.with_params([p.copy() for p in self.params()])

    def __call__(self, x):
        return forward(self, x)


def _as_batch(net: MLP, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ConfigError(f"input of shape {x.shape} does not match input dim {net.in_dim}")
    return (x - net.in_shift) / net.in_scale, single


def _affine(h, W, b):
    if W.shape[0] == 1:
        return h * W[0] + b
    return h @ W + b


def forward(net: MLP, x) -> np.ndarray:
    """Evaluate the network; ``(d,) -> (out,)`` or ``(n, d) -> (n, out)``."""
    x, single = _as_batch(net, x)
    h = x
    for W, b, act in zip(net.weights[:-1], net.biases[:-1], net.activations):
        h = ACTIVATIONS[act][0](_affine(h, W, b))
    u = h @ net.weights[-1] + net.biases[-1]
    return u[0] if single else u


def _forward_tangent(net: MLP, x: np.ndarray, keep: bool):
    """Primal pass plus input tangents. Tangent arrays have shape (n, d, width)."""
    n, d = x.shape
    hs, tans, pre = [x], [None], []
    h = x
    tan = None
    for l, (W, b, act) in enumerate(zip(net.weights[:-1], net.biases[:-1], net.activations)):
        rho, drho, _ = ACTIVATIONS[act]
        a = _affine(h, W, b)
        if tan is None:
            a_dot = np.broadcast_to(W / net.in_scale[:, None], (n, d, W.shape[1]))
        else:
            a_dot = (tan.reshape(n * d, -1) @ W).reshape(n, d, -1)
        s = drho(a)
        h = rho(a)
        tan = a_dot * s[:, None, :]
        if keep:
            pre.append((a, a_dot, s))
            hs.append(h)
            tans.append(tan)
    Wo, bo = net.weights[-1], net.biases[-1]
    u = h @ Wo + bo
    if tan is None:
        jac_t = np.broadcast_to(Wo / net.in_scale[:, None], (n, d, Wo.shape[1]))
    else:
        jac_t = (tan.reshape(n * d, -1) @ Wo).reshape(n, d, -1)
    return u, jac_t, (hs, tans, pre)


def input_gradient(net: MLP, x) -> np.ndarray:
    """Jacobian of the outputs in the inputs; ``(n, d) -> (n, out, d)``."""
    x, single = _as_batch(net, x)
    _, jac_t, _ = _forward_tangent(net, x, keep=False)
    jac = np.swapaxes(jac_t, 1, 2)
    return jac[0] if single else jac


# A loss maps (outputs (n, out), jacobian (n, out, d) or None) to
# (value, dL/doutputs, dL/djacobian or None).
LossFn = Callable[[np.ndarray, np.ndarray | None], tuple]


def loss_and_param_gradients(net: MLP, x, loss: LossFn, with_input_gradient: bool = False):
    """Value of ``loss`` on the batch ``x`` and its exact gradients in all parameters.

    With ``with_input_gradient`` the loss also receives the input Jacobian and
    the returned gradients include the dependence through it.
    """
    if not with_input_gradient:
        u, cache = forward_cached(net, x)
        value, gu, _ = loss(u, None)
        _check_grad(gu, u.shape)
        return float(value), backprop(net, cache, gu)

    x, _ = _as_batch(net, x)
    n, d = x.shape
    L = len(net.weights)
    u, jac_t, (hs, tans, pre) = _forward_tangent(net, x, keep=True)
    jac = np.swapaxes(jac_t, 1, 2)
    value, gu, gjac = loss(u, jac)
    _check_grad(gu, u.shape)
    if gjac is None:
        gjac_t = np.zeros_like(jac_t)
    else:
        _check_grad(gjac, jac.shape)
        gjac_t = np.swapaxes(gjac, 1, 2)

    grads = [None] * (2 * L)
    g, gt = gu, gjac_t  # adjoints of the layer output and of its tangent
    for l in range(L - 1, -1, -1):
        W = net.weights[l]
        h_prev, t_prev = hs[l], tans[l]
        gW = h_prev.T @ g
        if t_prev is None:
            gW = gW + gt.sum(axis=0) / net.in_scale[:, None]
        else:
            gW = gW + t_prev.reshape(n * d, -1).T @ gt.reshape(n * d, -1)
        grads[2 * l] = gW
        grads[2 * l + 1] = g.sum(axis=0)
        if l == 0:
            break
        a, a_dot, s = pre[l - 1]
        gh = g @ W.T
        gh_t = (gt.reshape(n * d, -1) @ W.T).reshape(n, d, -1)
        dd = ACTIVATIONS[net.activations[l - 1]][2](a)
        g = gh * s
        if dd is not None:  # None: second derivative vanishes a.e.
            g += (gh_t * a_dot).sum(axis=1) * dd
        gt = gh_t * s[:, None, :]
    return float(value), grads


def forward_cached(net: MLP, x):
    """Batched forward pass keeping what :func:`backprop` needs."""
    x, _ = _as_batch(net, x)
    hs, pre = [x], []
    h = x
    for W, b, act in zip(net.weights[:-1], net.biases[:-1], net.activations):
        a = _affine(h, W, b)
        pre.append(a)
        h = ACTIVATIONS[act][0](a)
        hs.append(h)
    u = h @ net.weights[-1] + net.biases[-1]
    return u, (hs, pre)


def backprop(net: MLP, cache, gu: np.ndarray) -> list:
    """Parameter gradients given the adjoint ``gu`` of the batch outputs."""
    hs, pre = cache
    L = len(net.weights)
    grads = [None] * (2 * L)
    g = gu
    for l in range(L - 1, -1, -1):
        grads[2 * l] = hs[l].T @ g
        grads[2 * l + 1] = g.sum(axis=0)
        if l:
            g = (g @ net.weights[l].T) * ACTIVATIONS[net.activations[l - 1]][1](pre[l - 1])
    return grads


def _check_grad(g, shape):
    if g is None or np.shape(g) != tuple(shape):
        raise ConfigError(f"loss gradient of shape {np.shape(g)} does not match {tuple(shape)}")


def mse_loss(target: np.ndarray) -> LossFn:
    """Mean over the batch of the squared output error (summed over outputs)."""

    def loss(u, _jac):
        r = u - target
        return np.mean(np.sum(r * r, axis=1)), 2.0 * r / len(u), None

    return loss


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], lr: float = 1e-3, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0, lr, **kw)


def adam_step(state: AdamState, params: list, grads: list) -> list:
    """In-place bias-corrected Adam update of ``params``; returns ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ConfigError("parameter, gradient and state lists differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    step = state.lr * math.sqrt(c2) / c1
    eps = state.eps * math.sqrt(c2)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= step * m / (np.sqrt(v) + eps)
    return params


def weight_norm(net: MLP) -> np.ndarray:
    """``sum_i lambda_i alpha_i`` of a single-hidden-layer network."""
    if len(net.weights) != 2:
        raise ConfigError("weight-norm restriction needs a single hidden layer")
    return net.weights[0] @ net.weights[1][:, 0]


def project_weight_norm(net: MLP, bound: float) -> MLP:
    """Rescale the output weights so that ``|sum_i lambda_i alpha_i| <= bound``."""
    s = np.linalg.norm(weight_norm(net))
    if s > bound:
        net.weights[1] *= bound / s
    return net


# ---------------------------------------------------------------- training


@dataclass
class TrainLoopConfig:
    batch_size: int = 1000
    max_iterations: int = 20000
    eval_every: int = 100
    eval_batch: int = 10000
    lr: float = 1e-3
    schedule: str = "constant"  # or "plateau"
    plateau_window: int = 10
    plateau_factor: float = 0.5
    plateau_min_improvement: float = 1e-3
    lr_floor_ratio: float = 0.01
    weight_norm_bound: float | None = None

    def validate(self) -> list[str]:
        errs = []
        for name in ("batch_size", "eval_every", "eval_batch"):
            if getattr(self, name) <= 0:
                errs.append(f"{name} must be positive")
        if self.max_iterations < 0:
            errs.append("max_iterations must be nonnegative")
        elif self.max_iterations and self.eval_every > self.max_iterations:
            errs.append("eval_every exceeds max_iterations")
        if self.lr <= 0:
            errs.append("lr must be positive")
        if self.schedule not in ("constant", "plateau"):
            errs.append(f"unknown lr schedule {self.schedule!r}")
        return errs


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, param_norms: list, where: str = ""):
        self.iteration = iteration
        self.param_norms = param_norms
        self.where = where
        msg = f"non-finite loss at iteration {iteration}"
        if where:
            msg = f"{where}: {msg}"
        super().__init__(f"{msg}; parameter norms {[round(p, 4) for p in param_norms]}")


@dataclass
class TrainResult:
    nets: list
    trace: list = field(default_factory=list)  # (iteration, eval_loss, lr)
    best_loss: float = math.inf
    iterations: int = 0


# objective(nets, batch, need_grad) -> (loss, grads per net or None)
Objective = Callable[[Sequence[MLP], object, bool], tuple]
Sampler = Callable[[np.random.Generator, int], object]


def train(nets: Sequence[MLP], objective: Objective, sampler: Sampler, cfg: TrainLoopConfig,
          rng: np.random.Generator, where: str = "") -> TrainResult:
    """Minibatch Adam on ``objective`` keeping the parameters with the best evaluation loss.

    A single evaluation batch is drawn before training and reused at every
    evaluation so that successive losses are comparable.
    """
    errs = cfg.validate()
    if errs:
        raise ConfigError("; ".join(errs))
    nets = [n.copy() for n in nets]
    if cfg.max_iterations == 0:
        return TrainResult(nets)
    sizes = [len(n.params()) for n in nets]
    params = [p for n in nets for p in n.params()]
    state = AdamState.zeros_like(params, lr=cfg.lr)
    eval_data = sampler(rng, cfg.eval_batch)

    def unpack():
        out, i = [], 0
        for n, s in zip(nets, sizes):
            out.append(n.with_params(params[i:i + s]))
            i += s
        return out

    current = unpack()
    best = [n.copy() for n in current]
    result = TrainResult(best)
    history = []
    base_lr = cfg.lr
    for it in range(1, cfg.max_iterations + 1):
        batch = sampler(rng, cfg.batch_size)
        loss, grads = objective(current, batch, True)
        if not math.isfinite(loss):
            raise TrainingDiverged(it, [float(np.linalg.norm(p)) for p in params], where)
        adam_step(state, params, [g for gs in grads for g in gs])
        if cfg.weight_norm_bound is not None:
            for n in current:
                if len(n.weights) == 2 and n.out_dim == 1:
                    project_weight_norm(n, cfg.weight_norm_bound)
        if it % cfg.eval_every == 0 or it == cfg.max_iterations:
            ev, _ = objective(current, eval_data, False)
            if not math.isfinite(ev):
                raise TrainingDiverged(it, [float(np.linalg.norm(p)) for p in params], where)
            result.trace.append((it, float(ev), state.lr))
            if ev < result.best_loss:
                result.best_loss = float(ev)
                result.nets = [n.copy() for n in current]
            history.append(result.best_loss)
            if cfg.schedule == "plateau" and len(history) > cfg.plateau_window:
                old = history[-cfg.plateau_window - 1]
                if result.best_loss > old * (1.0 - cfg.plateau_min_improvement):
                    new_lr = max(state.lr * cfg.plateau_factor, base_lr * cfg.lr_floor_ratio)
                    if new_lr < state.lr:
                        log.debug("%s it %d: lr %.2e -> %.2e", where, it, state.lr, new_lr)
                        state.lr = new_lr
                        history.clear()
    result.iterations = cfg.max_iterations
    return result


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(net: MLP, path) -> Path:
    """Write a versioned ``.npz`` record, creating parent directories; reloading is bit-exact."""
    arrays = {"version": np.array(CHECKPOINT_VERSION),
              "in_shift": net.in_shift, "in_scale": net.in_scale,
              "layer_sizes": np.array(net.layer_sizes),
              "activation_ids": np.array([ACTIVATION_IDS[a] for a in net.activations], dtype=int)}
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        arrays[f"W{l}"] = W
        arrays[f"b{l}"] = b
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> MLP:
    with np.load(path) as z:
        version = int(z["version"])
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        names = {v: k for k, v in ACTIVATION_IDS.items()}
        acts = tuple(names[int(i)] for i in z["activation_ids"])
        L = len(z["layer_sizes"]) - 1
        return MLP([z[f"W{l}"].copy() for l in range(L)], [z[f"b{l}"].copy() for l in range(L)], acts,
                   z["in_shift"].copy(), z["in_scale"].copy())
