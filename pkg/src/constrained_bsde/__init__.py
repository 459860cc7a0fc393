"""Facelift operator, neural-network facelift and the deep backward scheme for constrained BSDEs."""
from .bsde import SchemeConfig, SolveResult, multi_run, solve
from .constraint import ConfigError, ConvexBall, ConvexBox, DomainError, build_grids, make_constraint
from .facelift import FaceliftTrainSpec, GridOracle, brute_force_facelift, iterative_facelift, make_payoff
from .nn import MLP, TrainLoopConfig, TrainingDiverged
from .reference import closed_form_price, mc_price
from .sde import BlackScholesModel, simulate_paths

__version__ = "0.1.0"

__all__ = [
    "BlackScholesModel", "ConfigError", "ConvexBall", "ConvexBox", "DomainError", "FaceliftTrainSpec",
    "GridOracle", "MLP", "SchemeConfig", "SolveResult", "TrainLoopConfig", "TrainingDiverged",
    "brute_force_facelift", "build_grids", "closed_form_price", "iterative_facelift", "make_constraint",
    "make_payoff", "mc_price", "multi_run", "simulate_paths", "solve",
]
