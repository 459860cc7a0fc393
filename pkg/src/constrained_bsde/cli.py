"""Command-line experiment runner.

Subcommands ``facelift``, ``bsde-price``, ``reference-price``, ``oracle-dump``
and ``validate`` share the flags ``--config --seed --runs --out-dir
--desk-scale --experiment``. Every run writes CSV files with a header row and
a ``manifest.json`` holding the resolved config, the seeds and a build id;
passing that manifest back as ``--config`` reproduces the run.

Exit status: 0 on success, 2 for configuration errors (including an unknown
experiment), 1 for failures while running.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import math
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .bsde import multi_run
from .constraint import ConfigError, ConvexBall, DomainError
from .facelift import (
    GridOracle, Payoff, analytic_facelift_case1, analytic_facelift_case2, analytic_facelift_case2_nd,
    brute_force_facelift, facelift_error, iterative_facelift, make_payoff,
)
from .nn import TrainingDiverged, forward, save_checkpoint
from .reference import (
    PiecewiseLinear1D, case2_pw, closed_form_price, facelifted_case2_pw, mc_price, separable,
)
from .sde import make_rng

log = logging.getLogger("constrained_bsde")

SUBCOMMANDS = ("facelift", "bsde-price", "reference-price", "oracle-dump", "validate")
ORACLE_MAX_DIM = 2


class _RunIdFilter(logging.Filter):
    run_id = "-"

    def filter(self, record):
        record.run_id = self.run_id
        return True


_run_filter = _RunIdFilter()


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s [%(run_id)s] %(name)s: %(message)s"))
    handler.addFilter(_run_filter)
    root = logging.getLogger("constrained_bsde")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


def write_csv(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(["" if (isinstance(v, float) and math.isnan(v)) else v for v in row])
    return path


def write_manifest(out: Path, cfg: dict, seeds, outputs, extra: dict | None = None) -> Path:
    manifest = {
        "build_id": cfgmod.build_id(),
        "config_id": cfgmod.config_id(cfg),
        "experiment": cfg["experiment"],
        "seeds": list(seeds),
        "config": cfg,
        "outputs": sorted(str(Path(p).relative_to(out)) for p in outputs),
        "versions": {"python": platform.python_version(), "numpy": np.__version__},
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------- references


def _payoff_label(cfg: dict) -> str:
    return cfgmod.FACELIFT_PAYOFF.get(cfg["experiment"], cfg["payoff"])


def analytic_reference(cfg: dict, label: str, radius: float):
    """Closed-form facelift as ``(n, d) -> (n,)``, or ``None`` when there is none."""
    if not cfg["analytic"] or not cfg["constraint"]["enabled"]:
        return None
    dim = cfg["dim"]
    if label == "case2" and 1.0 <= radius <= 4.0:
        return lambda x: analytic_facelift_case2(x[:, 0], radius)
    if label == "case2nd" and cfg["constraint"]["kind"] == "box" and 1.0 <= radius * dim <= 4.0:
        return lambda x: analytic_facelift_case2_nd(x, radius * dim)
    if label == "case1" and 0.0 < radius <= 1.0:
        return lambda x: analytic_facelift_case1(x[:, 0], radius)
    return None


def grid_oracle(cfg: dict, payoff: Payoff, C, box) -> GridOracle | None:
    if payoff.dim > ORACLE_MAX_DIM:
        return None
    h = float(cfg["oracle"]["h"])
    if payoff.dim > 1:
        h = max(h, 0.01)
    return GridOracle.build(payoff, box, h, C)


def facelift_pw(cfg: dict, label: str, radius: float | None) -> PiecewiseLinear1D:
    """The (facelifted) 1-d payoff as a piecewise-linear function for pricing."""
    if label in ("case2", "case2nd"):
        slope = None if radius is None else (radius * cfg["dim"] if label == "case2nd" else radius)
        if slope is None or slope >= 4.0:
            return case2_pw()
        if slope >= 1.0:
            return facelifted_case2_pw(slope)
        raise DomainError(f"case2 grows with slope 1, so its facelift is infinite for slope bound {slope:g}")
    payoff = make_payoff("case2" if label == "case2nd" else label)
    xs = np.linspace(0.0, 4.0, 4001)
    if radius is None:
        return PiecewiseLinear1D.from_samples(xs, payoff(xs), tol=1e-6)
    C = ConvexBall(radius if label != "case2nd" else radius * cfg["dim"])
    oracle = GridOracle.build(payoff, ((xs[0],), (xs[-1],)), 1e-3, C)
    return PiecewiseLinear1D.from_samples(xs, brute_force_facelift(oracle, C, xs), tol=1e-6)


# ---------------------------------------------------------------- experiments


def run_facelift(cfg: dict, out: Path) -> list:
    label = _payoff_label(cfg)
    dim = cfg["dim"]
    payoff = make_payoff(label, dim)
    C = cfgmod.build_constraint(cfg)
    if C is None:
        raise ConfigError("the facelift experiments need an enabled constraint")
    spec = cfgmod.build_facelift_spec(cfg["facelift"], dim)
    box = spec.box_arrays(dim)
    radius = float(cfg["constraint"]["radius"])
    analytic = analytic_reference(cfg, label, radius)
    try:
        oracle = grid_oracle(cfg, payoff, C, box)
    except ConfigError as exc:
        if analytic is None:
            raise
        log.warning("grid oracle skipped, the closed form is the reference: %s", exc)
        oracle = None
    reference = analytic
    if reference is None and oracle is not None:
        reference = lambda x: brute_force_facelift(oracle, C, x)  # noqa: E731

    t = np.linspace(0.0, 1.0, cfg["plot_grid"]["n"])
    xs = box[0] + t[:, None] * (box[1] - box[0])  # 1-d grid, or the box diagonal in higher dimension
    curve_rows = None
    trace_rows = []
    outputs = []
    seeds = [cfg["seed"] + i for i in range(cfg["n_runs"])]
    for run, seed in enumerate(seeds):
        _run_filter.run_id = f"{cfgmod.config_id(cfg)}/run{run}"
        t0 = time.perf_counter()
        res = iterative_facelift(payoff, C, spec, make_rng(seed, 0), reference=reference,
                                 where=f"{label} run {run}")
        wall = time.perf_counter() - t0
        for e in res.trace:
            accepted = e["round"] < res.accepted_rounds
            trace_rows.append([run, seed, e["round"], e.get("mse_ref", math.nan), e.get("stderr_ref", math.nan),
                               e["mse_phi"], e["objective"], e["grad_violation"], e["dom_violation"],
                               int(accepted), wall])
        mse, se = (math.nan, math.nan) if reference is None else facelift_error(
            res.net, reference, box, spec.n_eval, make_rng(seed, 1))
        log.info("facelift %s: %d accepted rounds, mse %.3e (stderr %.1e), %.1fs",
                 label, res.accepted_rounds, mse, se, wall)
        if run == 0:
            cols = [xs[:, 0] if dim == 1 else t, payoff(xs),
                    analytic(xs) if analytic else np.full(len(xs), math.nan),
                    brute_force_facelift(oracle, C, xs) if oracle else np.full(len(xs), math.nan)]
            cols += [forward(net, xs)[:, 0] for net in res.rounds]
            cols.append(forward(res.net, xs)[:, 0])
            curve_rows = [[float(v) for v in row] for row in zip(*cols)]
            curve_header = ["x" if dim == 1 else "t_diagonal", "phi", "analytic", "oracle"]
            curve_header += [f"nn_{k}" for k in range(len(res.rounds))] + ["nn_final"]
            if cfg["save_checkpoints"]:
                outputs.append(save_checkpoint(res.net, out / "checkpoints" / "facelift_run0.npz"))
    outputs.append(write_csv(out / "facelift_curve.csv", curve_header, curve_rows))
    outputs.append(write_csv(out / "error_trace.csv",
                             ["run", "seed", "k", "mse", "stderr", "mse_phi", "objective", "grad_violation",
                              "dom_violation", "accepted", "wall_time"], trace_rows))
    return seeds, outputs


def _sweep(cfg: dict):
    radii = cfg["sweep"].get("radius") or [cfg["constraint"]["radius"]]
    rates = cfg["sweep"].get("R") or [cfg["model"]["R"]]
    return list(itertools.product(radii, rates))


def run_bsde(cfg: dict, out: Path) -> list:
    label = cfg["payoff"]
    dim = cfg["dim"]
    payoff = make_payoff(label, dim)
    scheme = cfgmod.build_scheme(cfg)
    seeds = [cfg["seed"] + i for i in range(cfg["n_runs"])]
    enabled = cfg["constraint"]["enabled"]
    result_rows, summary_rows, outputs = [], [], []
    for radius, R in _sweep(cfg):
        model = cfgmod.build_model(cfg, R=float(R))
        C = cfgmod.build_constraint(cfg, radius=float(radius))
        cid = f"r{radius:g}_R{R:g}" if enabled else f"free_R{R:g}"
        _run_filter.run_id = f"{cfgmod.config_id(cfg)}/{cid}"
        t0 = time.perf_counter()
        mean, std, results = multi_run(model, payoff, C, scheme, seeds, workers=cfg["workers"])
        wall = time.perf_counter() - t0
        ref = math.nan
        if R == model.r and label in ("case2", "case2nd") and (
                label == "case2" or cfg["constraint"]["kind"] == "box" or not enabled):
            ref = closed_form_price(model, facelift_pw(cfg, label, float(radius) if enabled else None),
                                    scheme.grids.horizon)
        log.info("%s: Y0 mean %.5f std %s reference %s (%.0fs)", cid, mean,
                 "n/a" if std is None else f"{std:.5f}", f"{ref:.5f}" if ref == ref else "n/a", wall)
        summary_rows.append([cid, radius if enabled else "", R, len(seeds), mean,
                             "" if std is None else std, ref, wall])
        for run, res in enumerate(results):
            for row in res.diagnostics:
                result_rows.append([cid, f"{cid}/run{run}", res.seed, row["k"], row["time"], row["residual_loss"],
                                    row["k_increment"], row["k_increment_down"], row["gradient_violation"],
                                    res.y0, row["wall_time"]])
            if cfg["save_checkpoints"]:
                base = out / "checkpoints" / cid / f"run{run}"
                for s in res.steps:
                    for name, net in (("value", s.value_net), ("z", s.z_net), ("facelift", s.facelift_net)):
                        if net is not None:
                            outputs.append(save_checkpoint(net, base / f"step{s.index:03d}_{name}.npz"))
    outputs.append(write_csv(out / "results.csv",
                             ["config_id", "run_id", "seed", "k", "time", "residual_loss", "k_increment",
                              "k_increment_down", "gradient_violation", "Y0", "wall_time"], result_rows))
    outputs.append(write_csv(out / "summary.csv",
                             ["config_id", "radius", "R", "n_runs", "mean", "std", "reference", "wall_time"],
                             summary_rows))
    return seeds, outputs


def run_reference(cfg: dict, out: Path) -> list:
    """Reference prices for ``R = r``; the sweep over ``R`` does not apply and is ignored."""
    label = cfg["payoff"]
    enabled = cfg["constraint"]["enabled"]
    model = cfgmod.build_model(cfg)
    rows = []
    n = cfg["reference"]["n_samples"]
    T = float(cfg["grids"]["T"])
    for radius in cfg["sweep"].get("radius") or [cfg["constraint"]["radius"]]:
        pw = facelift_pw(cfg, label, float(radius) if enabled else None)
        cid = f"r{radius:g}" if enabled else "free"
        for method in cfg["reference"]["methods"]:
            if method == "mc":
                price, se = mc_price(model, separable(pw), T, n, seed=cfg["seed"])
                rows.append([cid, radius if enabled else "", method, price, se, n])
            else:
                rows.append([cid, radius if enabled else "", method, closed_form_price(model, pw, T), 0.0, 0])
            log.info("%s %s: %.6f", cid, method, rows[-1][3])
    return [cfg["seed"]], [write_csv(out / "reference.csv",
                                     ["config_id", "radius", "method", "price", "stderr", "n_samples"], rows)]


def run_oracle_dump(cfg: dict, out: Path) -> list:
    label = cfg["payoff"]
    dim = cfg["dim"]
    payoff = make_payoff(label, dim)
    C = cfgmod.build_constraint(cfg)
    if C is None:
        raise ConfigError("oracle-dump needs an enabled constraint")
    lo, hi = (np.asarray(b, dtype=float) for b in cfg["oracle"]["box"])
    if lo.size == 1 and dim > 1:
        lo, hi = np.full(dim, lo[0]), np.full(dim, hi[0])
    oracle = grid_oracle(cfg, payoff, C, (lo, hi))
    if oracle is None:
        raise ConfigError(f"the grid oracle is limited to dim <= {ORACLE_MAX_DIM}")
    t = np.linspace(0.0, 1.0, cfg["plot_grid"]["n"])
    xs = lo + t[:, None] * (hi - lo)
    analytic = analytic_reference(cfg, label, float(cfg["constraint"]["radius"]))
    cols = [xs[:, 0] if dim == 1 else t, payoff(xs), brute_force_facelift(oracle, C, xs),
            analytic(xs) if analytic else np.full(len(xs), math.nan)]
    rows = [[float(v) for v in r] for r in zip(*cols)]
    header = ["x" if dim == 1 else "t_diagonal", "phi", "oracle", "analytic"]
    return [cfg["seed"]], [write_csv(out / "oracle.csv", header, rows)]


RUNNERS = {"bsde-price": run_bsde, "reference-price": run_reference, "oracle-dump": run_oracle_dump}


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="constrained-bsde", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config file or a manifest from an earlier run")
        s.add_argument("--seed", type=int)
        s.add_argument("--runs", type=int, help="number of independent runs")
        s.add_argument("--out-dir")
        s.add_argument("--desk-scale", action=argparse.BooleanOptionalAction, default=None)
        s.add_argument("--experiment")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _experiment_for(command: str, requested: str | None, from_file: str | None) -> str:
    if command == "facelift":
        exp = requested or (from_file if from_file in cfgmod.FACELIFT_PAYOFF else "facelift-case2")
        if exp not in cfgmod.FACELIFT_PAYOFF:
            raise ConfigError(f"experiment {exp!r} is not a facelift experiment")
        return exp
    if command == "validate":
        return requested or from_file or "bsde-price"
    if requested and requested != command:
        raise ConfigError(f"experiment {requested!r} cannot run under subcommand {command!r}")
    return command


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        file_cfg = cfgmod.load_file(args.config) if args.config else {}
        exp = _experiment_for(args.command, args.experiment, file_cfg.get("experiment"))
        cfg, unknown = cfgmod.resolve(file_cfg, {"experiment": exp, "seed": args.seed, "n_runs": args.runs,
                                                 "out_dir": args.out_dir, "desk_scale": args.desk_scale})
        diags = cfgmod.validate(cfg, unknown)
        if args.command == "reference-price" and cfg["payoff"] == "case2nd" and cfg["dim"] > 1 \
                and cfg["constraint"]["enabled"] and cfg["constraint"]["kind"] != "box":
            diags.append("reference-price for case2nd needs constraint.kind='box' (separable facelift)")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.command == "validate":
        print(json.dumps({"config": cfg, "diagnostics": diags}, indent=2, sort_keys=True))
        return 2 if diags else 0
    if diags:
        for d in diags:
            print(f"error: {d}", file=sys.stderr)
        return 2

    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    _run_filter.run_id = cfgmod.config_id(cfg)
    log.info("running %s into %s (build %s)", exp, out, cfgmod.build_id())
    runner = run_facelift if exp in cfgmod.FACELIFT_PAYOFF else RUNNERS[exp]
    t0 = time.perf_counter()
    try:
        seeds, outputs = runner(cfg, out)
    except (ConfigError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 1
        log.exception("run failed")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    write_manifest(out, cfg, seeds, outputs, {"wall_time": time.perf_counter() - t0})
    log.info("done in %.1fs", time.perf_counter() - t0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
