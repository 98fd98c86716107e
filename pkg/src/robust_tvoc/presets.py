"""Case-study presets and builders turning configuration sections into model objects."""

from __future__ import annotations

import copy

import numpy as np

from .clf import ClfSpec, lotka_volterra_clf, quadratic_clf, train_clf
from .dynamics import (LOTKA_VOLTERRA_PARAMS, TRAIN_PARAMS, PlantModel, linear_test_model,
                       lotka_volterra_model, train_model)
from .simulator import Scenario

LV_INITIAL_VALUES = [[5.0, 8.0], [10.0, 6.0], [15.0, 4.0], [10.0, 3.0], [5.0, 2.0], [1.0, 3.0], [1.0, 5.0]]

PRESETS = {
    "train": {
        "model": {"kind": "train", "params": dict(TRAIN_PARAMS)},
        "clf": {"decay_coef": 0.025, "w_tilde_factor": 0.6, "decay_form": "derived"},
        "robust": {"eps": 0.01, "r": 1.0, "r_tilde": 0.7, "r_star": 0.5, "eps_bar_combine": "max"},
        "tracker": {"Q": [[1.0]], "W": [3.0, 3.0, 3.0, 3.0, 1.0, 1.0], "mu0": 1.0, "mu_decay": 0.5,
                    "gamma": 0.01, "placement": "input", "freeze_constraints": True,
                    "mu_clock": "global", "min_steps": 20},
        "sim": {"h": 0.01, "horizon": 60.0, "seed": 0, "x0": [[27.0]], "x0_is_measurement": True,
                "companions": 4, "coast": "zero"},
    },
    "lotka-volterra": {
        "model": {"kind": "lotka-volterra", "params": dict(LOTKA_VOLTERRA_PARAMS)},
        "clf": {"decay_coef": 1.0, "w_tilde_factor": 0.5, "decay_form": "derived"},
        "robust": {"eps": 0.01, "r": 0.7, "r_tilde": 0.3, "r_star": 0.2, "eps_bar_combine": "max"},
        "tracker": {"Q": [[1.0, 0.0], [0.0, 3.0]], "W": [1.0] * 12, "mu0": 1.0, "mu_decay": 0.5,
                    "gamma": 0.01, "placement": "input", "freeze_constraints": True,
                    "mu_clock": "global", "min_steps": 5},
        "sim": {"h": 0.001, "horizon": 3.0, "seed": 0, "x0": copy.deepcopy(LV_INITIAL_VALUES),
                "x0_is_measurement": False, "companions": 4, "coast": "zero"},
    },
    "linear": {
        "model": {"kind": "linear", "params": {"a": -1.0, "b": 1.0, "u_min": -1.0, "u_max": 1.0}},
        "clf": {"decay_coef": 0.5, "w_tilde_factor": 0.5, "decay_form": "derived"},
        "robust": {"eps": 0.001, "r": 0.5, "r_tilde": 0.4, "r_star": 0.2, "eps_bar_combine": "max"},
        "tracker": {"Q": [[1.0]], "W": [1.0] * 6, "mu0": 1.0, "mu_decay": 0.5, "gamma": 0.01,
                    "placement": "input", "freeze_constraints": True, "mu_clock": "global",
                    "min_steps": 20},
        "sim": {"h": 0.01, "horizon": 5.0, "seed": 0, "x0": [[2.0]], "x0_is_measurement": False,
                "companions": 4, "coast": "zero"},
    },
}


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r} (choose from {', '.join(sorted(PRESETS))})")
    return copy.deepcopy(PRESETS[name])


def build_model(section: dict) -> PlantModel:
    kind = section["kind"]
    params = dict(section.get("params", {}))
    if kind == "train":
        return train_model(params)
    if kind == "lotka-volterra":
        return lotka_volterra_model(params)
    if kind == "linear":
        return linear_test_model(params.get("a", -1.0), params.get("b", 1.0),
                                 (params.get("u_min", -1.0), params.get("u_max", 1.0)))
    raise ValueError(f"unknown model kind {kind!r}")


def build_clf(section: dict, model: PlantModel) -> ClfSpec:
    factor = section["w_tilde_factor"]
    if model.name == "train":
        return train_clf(model, section["decay_coef"], factor)
    if model.name == "lotka-volterra":
        return lotka_volterra_clf(model, section.get("decay_form", "derived"), factor)
    return quadratic_clf(np.eye(model.n), section["decay_coef"], factor)


def objective_matrices(section: dict, model: PlantModel):
    """``(Q on u, optional state matrix)`` according to the placement switch."""
    M = np.atleast_2d(np.asarray(section["Q"], dtype=float))
    if section.get("placement", "input") == "state":
        return np.zeros((model.m, model.m)), M
    return M, None


def build_scenario(cfg, index: int = 0) -> Scenario:
    """Resolve a configuration (``ScenarioConfig`` or section dict) into a runnable scenario."""
    sec = cfg.sections() if hasattr(cfg, "sections") else cfg
    model = build_model(sec["model"])
    clf = build_clf(sec["clf"], model)
    rb, tr, sim = sec["robust"], sec["tracker"], sec["sim"]
    x0_all = sim["x0"]
    if not 0 <= index < len(x0_all):
        raise IndexError(f"initial value index {index} out of range (have {len(x0_all)})")
    Q, state_Q = objective_matrices(tr, model)
    name = getattr(cfg, "preset", None) or sec["model"]["kind"]
    return Scenario(
        name=f"{name}[{index}]" if len(x0_all) > 1 else name,
        model=model, clf=clf, eps=rb["eps"], r=rb["r"], r_star=rb["r_star"],
        r_tilde=rb.get("r_tilde"),
        x0=model.to_shifted(np.asarray(x0_all[index], dtype=float)),
        x0_is_measurement=sim["x0_is_measurement"],
        Q=Q, W=np.asarray(tr["W"], dtype=float), gamma=tr["gamma"], mu0=tr["mu0"],
        mu_decay=tr["mu_decay"], state_Q=state_Q, mu_clock=tr["mu_clock"],
        freeze_constraints=tr["freeze_constraints"], coast=sim["coast"], h=sim["h"],
        min_steps=tr["min_steps"], horizon=sim["horizon"], seed=sim["seed"] + index,
        n_companions=sim["companions"], eps_bar_combine=rb["eps_bar_combine"],
    )
