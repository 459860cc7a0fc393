"""Experiment configuration: presets, file loading, validation and object builders.

A configuration is a JSON tree. Resolution order is preset defaults, then
the config file, then command-line flags. The resolved tree is echoed in
full into every manifest, so a manifest can be fed back as ``--config``.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from pathlib import Path

from .bsde import SchemeConfig
from .constraint import ConfigError, ConstraintSet, build_grids, make_constraint
from .facelift import FaceliftTrainSpec
from .nn import TrainLoopConfig
from .sde import BlackScholesModel

EXPERIMENTS = ("facelift-case1", "facelift-case2", "facelift-case3", "facelift-case2nd",
               "bsde-price", "reference-price", "oracle-dump")
PAYOFFS = ("case1", "case2", "case2nd", "case3")
FACELIFT_PAYOFF = {"facelift-case1": "case1", "facelift-case2": "case2", "facelift-case3": "case3",
                   "facelift-case2nd": "case2nd"}


def _train(max_iterations, schedule="constant", **kw):
    d = dict(batch_size=1000, max_iterations=max_iterations, eval_every=100, eval_batch=10000, lr=1e-3,
             schedule=schedule, plateau_window=10, plateau_factor=0.5, plateau_min_improvement=1e-3,
             lr_floor_ratio=0.01, weight_norm_bound=None)
    d.update(kw)
    return d


def _facelift(hidden, iterations, K=3, **kw):
    d = dict(eps_pen=1 / 50, K=K, sampling_box=[[0.6], [1.4]], hidden=list(hidden), activation="relu",
             literal_previous=False, stop_rule="objective", n_eval=10000, train=_train(iterations))
    d.update(kw)
    return d


def preset(desk_scale: bool = True) -> dict:
    """Full default tree for the desk-scale or the full-scale preset."""
    if desk_scale:
        facelift = _facelift((50, 50), 6000)
        scheme = dict(hidden=[50, 50], first_step=_train(4000, "plateau"), step=_train(1500, "plateau"),
                      terminal_facelift=_facelift((50, 50), 6000, K=2),
                      facelift=_facelift((50, 50), 600, K=2))
        n_ref = 100_000
    else:
        facelift = _facelift((200, 200), 100_000)
        scheme = dict(hidden=[100, 100], first_step=_train(20_000, "plateau"), step=_train(10_000, "plateau"),
                      terminal_facelift=_facelift((200, 200), 50_000, K=2),
                      facelift=_facelift((200, 200), 10_000, K=2))
        n_ref = 10_000_000
    scheme.update(clip=None, activation="tanh", eps_per_date=None, warm_start=True, facelift_warm_start=True,
                  initial_spread=True, feasibility_tol=1e-3, driver_mode="literal", n_eval=10000)
    return {
        "experiment": "bsde-price",
        "seed": 0,
        "n_runs": 1,
        "workers": 1,
        "out_dir": "runs",
        "desk_scale": desk_scale,
        "payoff": "case2",
        "dim": 1,
        "model": {"mu": 0.07, "sigma": 0.3, "r": 0.05, "R": 0.05, "x0": [1.0]},
        "constraint": {"enabled": True, "radius": 2.0, "kind": "ball"},
        "grids": {"T": 1.0, "kappa": 20, "n_k": 1},
        "facelift": facelift,
        "scheme": scheme,
        "sweep": {"radius": [], "R": []},
        "reference": {"n_samples": n_ref, "methods": ["mc", "closed_form"]},
        "oracle": {"h": 1e-3, "box": [[0.6], [1.4]]},
        "plot_grid": {"n": 401},
        "analytic": True,
        "save_checkpoints": True,
    }


def deep_merge(base: dict, over: dict, path: str = "", unknown: list | None = None) -> dict:
    """Recursive update of ``base`` by ``over``; keys absent from ``base`` are reported in ``unknown``."""
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{path}{k}"
        if k not in base:
            if unknown is not None:
                unknown.append(key)
            out[k] = copy.deepcopy(v)
        elif isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = deep_merge(base[k], v, key + ".", unknown)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_file(path) -> dict:
    """Read a config file; a manifest is accepted and its resolved config is used."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    if "config" in data and "build_id" in data:
        data = data["config"]
    return data


def resolve(file_cfg: dict | None = None, overrides: dict | None = None) -> tuple[dict, list]:
    """Merge preset, file and flag overrides; returns ``(config, unknown keys)``."""
    file_cfg = file_cfg or {}
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    desk = overrides.get("desk_scale", file_cfg.get("desk_scale", True))
    unknown: list = []
    cfg = deep_merge(preset(bool(desk)), file_cfg, unknown=unknown)
    cfg = deep_merge(cfg, overrides, unknown=unknown)
    return cfg, unknown


def config_id(cfg: dict) -> str:
    """Short stable hash of the resolved configuration."""
    blob = json.dumps(cfg, sort_keys=True).encode()
    return hashlib.sha1(blob).hexdigest()[:10]


def build_id() -> str:
    """Hash of the package sources, standing in for a commit id."""
    h = hashlib.sha1()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


# ---------------------------------------------------------------- builders


def _kw(d: dict, cls_name: str, allowed) -> dict:
    extra = set(d) - set(allowed)
    if extra:
        raise ConfigError(f"{cls_name}: unknown keys {sorted(extra)}")
    return d


TRAIN_KEYS = ("batch_size", "max_iterations", "eval_every", "eval_batch", "lr", "schedule", "plateau_window",
              "plateau_factor", "plateau_min_improvement", "lr_floor_ratio", "weight_norm_bound")


def build_train(d: dict) -> TrainLoopConfig:
    d = _kw(d, "train", TRAIN_KEYS)
    try:
        return TrainLoopConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def build_facelift_spec(d: dict, dim: int = 1) -> FaceliftTrainSpec:
    d = dict(_kw(d, "facelift", ("eps_pen", "K", "sampling_box", "hidden", "activation", "literal_previous",
                                 "stop_rule", "n_eval", "train")))
    lo, hi = d.pop("sampling_box")
    if len(lo) == 1 and dim > 1:
        lo, hi = lo * dim, hi * dim
    return FaceliftTrainSpec(sampling_box=(tuple(lo), tuple(hi)), hidden=tuple(d.pop("hidden")),
                             train=build_train(d.pop("train")), **d)


def build_model(cfg: dict, R: float | None = None) -> BlackScholesModel:
    m = dict(cfg["model"])
    x0 = list(m.pop("x0"))
    dim = int(cfg["dim"])
    if len(x0) == 1 and dim > 1:
        x0 = x0 * dim
    if len(x0) != dim:
        raise ConfigError(f"model.x0 has {len(x0)} entries for dim={dim}")
    if R is not None:
        m["R"] = R
    _kw(m, "model", ("mu", "sigma", "r", "R"))
    return BlackScholesModel(x0=tuple(float(v) for v in x0), **m)


def build_constraint(cfg: dict, radius: float | None = None) -> ConstraintSet | None:
    c = cfg["constraint"]
    if not c.get("enabled", True):
        return None
    return make_constraint(float(c["radius"] if radius is None else radius), int(cfg["dim"]), c.get("kind", "ball"))


def build_scheme(cfg: dict) -> SchemeConfig:
    s = dict(_kw(cfg["scheme"], "scheme", ("hidden", "first_step", "step", "terminal_facelift", "facelift",
                                           "clip", "activation", "eps_per_date", "warm_start",
                                           "facelift_warm_start", "initial_spread", "feasibility_tol",
                                           "driver_mode", "n_eval")))
    g = cfg["grids"]
    dim = int(cfg["dim"])
    eps = s.pop("eps_per_date")
    return SchemeConfig(
        grids=build_grids(float(g["T"]), int(g["kappa"]), int(g["n_k"])),
        hidden=tuple(s.pop("hidden")),
        first_step=build_train(s.pop("first_step")),
        step=build_train(s.pop("step")),
        terminal_facelift=build_facelift_spec(s.pop("terminal_facelift"), dim),
        facelift=build_facelift_spec(s.pop("facelift"), dim),
        eps_per_date=None if eps is None else tuple(eps),
        **s,
    )


# ---------------------------------------------------------------- validation


def validate(cfg: dict, unknown: list | None = None) -> list[str]:
    """Every problem found in ``cfg``, without running anything."""
    diags: list[str] = []
    exp = cfg.get("experiment")
    if exp not in EXPERIMENTS:
        diags.append(f"unknown experiment {exp!r}; expected one of {', '.join(EXPERIMENTS)}")
    if cfg.get("payoff") not in PAYOFFS:
        diags.append(f"unknown payoff {cfg.get('payoff')!r}")
    for key in ("seed", "n_runs", "workers", "dim"):
        v = cfg.get(key)
        if not isinstance(v, int) or isinstance(v, bool) or v < (0 if key == "seed" else 1):
            diags.append(f"{key} must be an integer >= {0 if key == 'seed' else 1}")
    diags = [f"unknown config key {k!r}" for k in (unknown or [])] + diags
    if len(diags) > len(unknown or []):
        return diags  # the remaining checks need a well-formed core
    dim = cfg["dim"]
    payoff = FACELIFT_PAYOFF.get(exp, cfg["payoff"])
    if payoff != "case2nd" and dim != 1:
        diags.append(f"payoff {payoff} is one-dimensional but dim={dim}")

    def attempt(label, fn):
        try:
            return fn()
        except (ConfigError, ValueError, TypeError, KeyError) as exc:
            diags.append(f"{label}: {exc}")
            return None

    attempt("model", lambda: build_model(cfg))
    C = attempt("constraint", lambda: build_constraint(cfg))
    spec = attempt("facelift", lambda: build_facelift_spec(cfg["facelift"], dim))
    if spec is not None:
        diags += [f"facelift: {e}" for e in spec.validate()]
    scheme = attempt("scheme", lambda: build_scheme(cfg))
    if scheme is not None:
        diags += [f"scheme: {e}" for e in scheme.validate()]
    sweep = cfg.get("sweep") or {}
    for key in ("radius", "R"):
        vals = sweep.get(key, [])
        if not isinstance(vals, list) or not all(isinstance(v, (int, float)) for v in vals):
            diags.append(f"sweep.{key} must be a list of numbers")
    radii = list(sweep.get("radius") or []) or [cfg["constraint"].get("radius")]
    for r in radii:
        if not (isinstance(r, (int, float)) and r > 0 and math.isfinite(r)):
            diags.append(f"constraint radius must be positive, got {r!r}")
    if cfg["constraint"].get("enabled", True) and payoff in ("case2", "case2nd"):
        for r in radii:
            if isinstance(r, (int, float)) and r * (dim if cfg["constraint"].get("kind") == "box" else 1) < 1.0:
                diags.append(f"radius {r:g} is below the asymptotic slope 1 of case2: the facelift is infinite")
    if cfg.get("analytic") and cfg["constraint"].get("enabled", True) and payoff in ("case2", "case2nd"):
        kind = cfg["constraint"].get("kind", "ball")
        for r in radii:
            if not isinstance(r, (int, float)):
                continue
            slope = r * dim if (payoff == "case2nd" and kind == "box") else r
            if payoff == "case2nd" and kind != "box" and dim > 1:
                diags.append("the separable case2nd closed form needs constraint.kind='box'")
                break
            if not 1.0 <= slope <= 4.0:
                diags.append(f"analytic case2 facelift needs a slope bound in [1, 4], got {slope:g} "
                             "(set analytic=false to use the grid oracle only)")
    if C is not None and payoff == "case1" and cfg.get("analytic") and not radii[0] <= 1.0:
        diags.append("analytic case1 facelift needs radius <= 1 (set analytic=false)")
    ref = cfg.get("reference", {})
    if not isinstance(ref.get("n_samples"), int) or ref.get("n_samples", 0) < 1:
        diags.append("reference.n_samples must be a positive integer")
    if set(ref.get("methods", [])) - {"mc", "closed_form"}:
        diags.append("reference.methods must be a subset of ['mc', 'closed_form']")
    oc = cfg.get("oracle", {})
    if not (isinstance(oc.get("h"), (int, float)) and oc["h"] > 0):
        diags.append("oracle.h must be positive")
    if not (isinstance(cfg.get("plot_grid", {}).get("n"), int) and cfg["plot_grid"]["n"] >= 2):
        diags.append("plot_grid.n must be an integer >= 2")
    return diags
