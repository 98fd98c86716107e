"""Scenario files: TOML sections ``[model] [clf] [robust] [tracker] [sim]`` over an optional preset."""

from __future__ import annotations

import copy
import json
import math
import re
from dataclasses import dataclass

import numpy as np
import tomli

from .presets import PRESETS, build_clf, build_model, preset as preset_sections

SECTIONS = ("model", "clf", "robust", "tracker", "sim")

# key -> (type tag, required)
SCHEMA = {
    "model": {"kind": ("str", True), "params": ("table", False)},
    "clf": {"decay_coef": ("float", True), "w_tilde_factor": ("float", True),
            "decay_form": ("str", False)},
    "robust": {"eps": ("float", True), "r": ("float", True), "r_tilde": ("float", False),
               "r_star": ("float", True), "eps_bar_combine": ("str", False)},
    "tracker": {"Q": ("matrix", True), "W": ("vector", True), "mu0": ("float", True),
                "mu_decay": ("float", True), "gamma": ("float", True), "placement": ("str", False),
                "freeze_constraints": ("bool", False), "mu_clock": ("str", False),
                "min_steps": ("int", False)},
    "sim": {"h": ("float", True), "horizon": ("float", True), "seed": ("int", True),
            "x0": ("matrix", True), "x0_is_measurement": ("bool", False),
            "companions": ("int", False), "coast": ("str", False)},
}

DEFAULTS = {
    "clf": {"decay_form": "derived"},
    "robust": {"eps_bar_combine": "max"},
    "tracker": {"placement": "input", "freeze_constraints": True, "mu_clock": "global", "min_steps": 20},
    "sim": {"x0_is_measurement": False, "companions": 4, "coast": "zero"},
}

CHOICES = {
    ("model", "kind"): ("train", "lotka-volterra", "linear"),
    ("clf", "decay_form"): ("derived", "printed"),
    ("robust", "eps_bar_combine"): ("max", "min"),
    ("tracker", "placement"): ("input", "state"),
    ("tracker", "mu_clock"): ("global", "interval"),
    ("sim", "coast"): ("zero", "supmin"),
}


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass
class ScenarioConfig:
    preset: str | None
    model: dict
    clf: dict
    robust: dict
    tracker: dict
    sim: dict

    def sections(self) -> dict:
        return {name: getattr(self, name) for name in SECTIONS}

    def copy(self) -> "ScenarioConfig":
        return copy.deepcopy(self)


# -- locating keys for error messages ------------------------------------------

def _locate(text: str | None, section: str | None, key: str | None = None) -> int | None:
    if not text:
        return None
    current = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"^\[\s*([A-Za-z0-9_.\-]+)\s*\]", line)
        if m:
            current = m.group(1)
            if key is None and current == section:
                return no
            continue
        if key is not None and (current == section or (current or "").startswith(f"{section}.")
                                or (section is None and current is None)):
            if re.match(rf"^{re.escape(key)}\s*=", line) or re.match(rf'^"{re.escape(key)}"\s*=', line):
                return no
    return None


# -- type coercion -------------------------------------------------------------

def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _coerce(tag: str, value, where: str, line):
    def fail(expect):
        raise ConfigError(f"{where}: expected {expect}, got {type(value).__name__} {value!r}", line)

    if tag == "float":
        if not _is_num(value):
            fail("a number")
        return float(value)
    if tag == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            fail("an integer")
        return int(value)
    if tag == "bool":
        if not isinstance(value, bool):
            fail("true or false")
        return value
    if tag == "str":
        if not isinstance(value, str):
            fail("a string")
        return value
    if tag == "vector":
        if not isinstance(value, list) or not all(_is_num(v) for v in value):
            fail("a list of numbers")
        return [float(v) for v in value]
    if tag == "matrix":
        if (not isinstance(value, list) or not value
                or not all(isinstance(r, list) and all(_is_num(v) for v in r) for r in value)):
            fail("a list of number lists")
        return [[float(v) for v in r] for r in value]
    if tag == "table":
        if not isinstance(value, dict) or not all(_is_num(v) for v in value.values()):
            fail("a table of numbers")
        return {k: float(v) for k, v in value.items()}
    raise AssertionError(tag)


# -- parse / validate ----------------------------------------------------------

def loads_scenario(text: str, overrides: dict | None = None) -> ScenarioConfig:
    """Parse scenario text; ``overrides`` maps ``(section, key)`` to values applied last."""
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"malformed TOML: {exc}", int(m.group(1)) if m else None) from exc
    for key in raw:
        if key != "preset" and key not in SECTIONS:
            raise ConfigError(f"unknown key or section {key!r}", _locate(text, None, key) or _locate(text, key))
    name = raw.get("preset")
    if name is not None:
        if not isinstance(name, str) or name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r} (choose from {', '.join(sorted(PRESETS))})",
                              _locate(text, None, "preset"))
        base = preset_sections(name)
    else:
        base = {s: copy.deepcopy(DEFAULTS.get(s, {})) for s in SECTIONS}
    for sec in SECTIONS:
        given = raw.get(sec, {})
        if not isinstance(given, dict):
            raise ConfigError(f"{sec!r} must be a table", _locate(text, None, sec))
        for key, value in given.items():
            line = _locate(text, sec, key) or _locate(text, f"{sec}.{key}")
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {sec}.{key}", line)
            tag = SCHEMA[sec][key][0]
            value = _coerce(tag, value, f"{sec}.{key}", line)
            if tag == "table" and name is not None and key == "params":
                base[sec].setdefault("params", {}).update(value)
            else:
                base[sec][key] = value
    for (sec, key), value in (overrides or {}).items():
        if key not in SCHEMA[sec]:
            raise ConfigError(f"unknown key {sec}.{key}")
        if value is None:
            base[sec].pop(key, None)
        else:
            base[sec][key] = _coerce(SCHEMA[sec][key][0], value, f"{sec}.{key}", None)
    cfg = ScenarioConfig(preset=name, **base)
    validate(cfg, text)
    return cfg


def parse_scenario(path, overrides: dict | None = None) -> ScenarioConfig:
    with open(path, "rb") as fh:
        text = fh.read().decode("utf-8")
    return loads_scenario(text, overrides)


def from_preset(name: str, overrides: dict | None = None) -> ScenarioConfig:
    return loads_scenario(f'preset = "{name}"\n', overrides)


def validate(cfg: ScenarioConfig, text: str | None = None) -> None:
    """Type-independent checks: required keys, ranges, shapes and ball geometry."""
    sec = cfg.sections()

    def where(s, k):
        return _locate(text, s, k)

    def need(cond, s, k, msg):
        if not cond:
            raise ConfigError(f"{s}.{k}: {msg}", where(s, k))

    for s, keys in SCHEMA.items():
        for k, (_, required) in keys.items():
            if required and k not in sec[s]:
                raise ConfigError(f"missing required key {s}.{k}", _locate(text, s))
    for (s, k), options in CHOICES.items():
        if k in sec[s]:
            need(sec[s][k] in options, s, k, f"must be one of {', '.join(options)}")
    rb, tr, sim = cfg.robust, cfg.tracker, cfg.sim
    need(rb["eps"] > 0, "robust", "eps", "must be positive")
    need(rb["r"] > 0, "robust", "r", "must be positive")
    need(rb["r_star"] > 0, "robust", "r_star", "must be positive")
    need(0 < cfg.clf["w_tilde_factor"] < 1, "clf", "w_tilde_factor", "must lie in (0, 1)")
    need(cfg.clf["decay_coef"] > 0, "clf", "decay_coef", "must be positive")
    need(tr["mu0"] > 0, "tracker", "mu0", "must be positive")
    need(tr["mu_decay"] > 0, "tracker", "mu_decay", "must be positive (weights strictly decreasing)")
    need(tr["gamma"] >= 0, "tracker", "gamma", "must be non-negative")
    need(tr.get("min_steps", 1) >= 1, "tracker", "min_steps", "must be at least 1")
    need(sim["h"] > 0, "sim", "h", "must be positive")
    need(sim["horizon"] > 0, "sim", "horizon", "must be positive")
    need(sim.get("companions", 0) >= 0, "sim", "companions", "must be non-negative")
    need(sim["seed"] >= 0, "sim", "seed", "must be non-negative")

    try:
        model = build_model(cfg.model)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"model: {exc}", _locate(text, "model")) from exc
    n, m = model.n, model.m
    K = 2 ** (m + 1) + 2 * m
    need(len(tr["W"]) == K, "tracker", "W", f"needs {K} weights ({2 ** (m + 1)} decay rows + {2 * m} box rows)")
    need(all(w > 0 for w in tr["W"]), "tracker", "W", "weights must be positive")
    Q = np.asarray(tr["Q"], dtype=float)
    size = n if tr.get("placement", "input") == "state" else m
    need(Q.shape == (size, size), "tracker", "Q", f"must be {size}x{size}")
    need(np.allclose(Q, Q.T), "tracker", "Q", "must be symmetric")
    if tr.get("placement", "input") == "input":
        need(np.linalg.eigvalsh(Q)[0] > 0, "tracker", "Q", "must be positive definite")
    for x0 in sim["x0"]:
        need(len(x0) == n, "sim", "x0", f"every initial value needs {n} entries")
        need(bool(model.in_domain(model.to_shifted(np.asarray(x0)))), "sim", "x0",
             f"initial value {x0} outside the model domain ({model.domain_text})")

    clf = build_clf(cfg.clf, model)
    eps, r, r_star = rb["eps"], rb["r"], rb["r_star"]
    limit = float(clf.alpha2_inv(clf.alpha1(r)))
    need(r_star < limit - 2 * eps, "robust", "r_star",
         f"violates r* < alpha2^-1(alpha1(r)) - 2 eps ({r_star:g} >= {limit:g} - {2 * eps:g})")
    if "r_tilde" in rb:
        rt = rb["r_tilde"]
        need(r_star < rt <= limit + 1e-12, "robust", "r_tilde",
             f"violates r* < r~ <= alpha2^-1(alpha1(r)) ({r_star:g} < {rt:g} <= {limit:g})")
        need(rt - 2 * eps - r_star > 0, "robust", "r_tilde",
             f"violates r~ - 2 eps - r* > 0 ({rt:g} - {2 * eps:g} - {r_star:g})")


# -- canonical serialisation ---------------------------------------------------

def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isnan(v) or math.isinf(v):
            raise ValueError("non-finite values cannot be serialised")
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialise {type(v).__name__}")


def dump_scenario(cfg: ScenarioConfig) -> str:
    """Canonical text: fixed section and key order, every resolved field written."""
    out = []
    if cfg.preset is not None:
        out.append(f"preset = {_toml_value(cfg.preset)}")
        out.append("")
    for sec in SECTIONS:
        body = getattr(cfg, sec)
        out.append(f"[{sec}]")
        for key in SCHEMA[sec]:
            if key in body and SCHEMA[sec][key][0] != "table":
                out.append(f"{key} = {_toml_value(body[key])}")
        out.append("")
        for key in SCHEMA[sec]:
            if key in body and SCHEMA[sec][key][0] == "table":
                out.append(f"[{sec}.{key}]")
                for k in sorted(body[key]):
                    out.append(f"{json.dumps(k) if not re.match(r'^[A-Za-z0-9_-]+$', k) else k} = "
                               f"{_toml_value(float(body[key][k]))}")
                out.append("")
    return "\n".join(out)
