"""Measurement-robust control Lyapunov function stabilisation with fixed-time tracking of the
barrier-relaxed optimal input, plus the self-triggered closed-loop simulator around it."""

__version__ = "0.1.0"

from .clf import BallRadii, ClfSpec, ball_radii, beta, phi
from .config import ConfigError, ScenarioConfig, dump_scenario, from_preset, loads_scenario, parse_scenario
from .dynamics import InputBox, PlantModel, lotka_volterra_model, train_model
from .presets import PRESETS, build_scenario
from .robust import (AffinePolytope, RobustBounds, compute_bounds, eps_bar, eps_min, inflate_constraints,
                     pick_feasible_u, trigger_delta)
from .simulator import Scenario, Trace, measure, run_closed_loop, summarize, verify_decay
from .tracker import BarrierObjective, objective_eval, optimal_u_oracle, psi, udot

__all__ = [
    "AffinePolytope", "BallRadii", "BarrierObjective", "ClfSpec", "ConfigError", "InputBox", "PRESETS",
    "PlantModel", "RobustBounds", "Scenario", "ScenarioConfig", "Trace", "ball_radii", "beta",
    "build_scenario", "compute_bounds", "dump_scenario", "eps_bar", "eps_min", "from_preset",
    "inflate_constraints", "loads_scenario", "lotka_volterra_model", "measure", "objective_eval",
    "optimal_u_oracle", "parse_scenario", "phi", "pick_feasible_u", "psi", "run_closed_loop",
    "summarize", "train_model", "trigger_delta", "udot", "verify_decay",
]
