"""Command line entry point: ``robust-tvoc {bounds,run,batch,verify,plotdata}``.

Exit codes: 0 success, 1 validation failure (bad configuration or a failed
property check), 2 runtime abort, 3 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .checks import (check_constraint_soundness, check_derivatives, check_eps_bar_oracle,
                     check_settling)
from .clf import InvalidGeometryError
from .config import ConfigError, dump_scenario, from_preset, loads_scenario, parse_scenario
from .presets import build_scenario
from .robust import EstimationError, InvalidRelaxationError, coasting_control, eps_min
from .simulator import (SimulationAbort, prepare, run_closed_loop, summarize, write_companions_csv,
                        write_intervals_csv, write_summary, write_trace_csv)

EXIT_OK, EXIT_INVALID, EXIT_ABORT, EXIT_USAGE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _scenario_flags(p: argparse.ArgumentParser, index: bool = True) -> None:
    p.add_argument("--preset", help="train, lotka-volterra or linear")
    p.add_argument("--config", help="scenario TOML file (may itself name a preset)")
    p.add_argument("--seed", type=int)
    p.add_argument("--horizon", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--r-tilde", type=float, dest="r_tilde")
    p.add_argument("--r-star", type=float, dest="r_star")
    p.add_argument("--w-tilde-factor", type=float, dest="w_tilde_factor")
    p.add_argument("--freeze-constraints", choices=("on", "off"), dest="freeze")
    p.add_argument("--coast", choices=("zero", "supmin"))
    p.add_argument("--decay-form", choices=("printed", "derived"), dest="decay_form")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any configuration key; VALUE is a TOML literal")
    if index:
        p.add_argument("--index", type=int, default=0, help="which initial value to use")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="robust-tvoc", description="Measurement-robust CLF tracking control simulations.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("bounds", help="robustness constants and eps_min")
    _scenario_flags(p)
    p.add_argument("--out-dir")

    p = sub.add_parser("run", help="one closed-loop simulation")
    _scenario_flags(p)
    p.add_argument("--out-dir", default="out")
    p.add_argument("--manifest", help="re-run exactly the scenario recorded in a manifest")

    p = sub.add_parser("batch", help="one run per configured initial value")
    _scenario_flags(p, index=False)
    p.add_argument("--out-dir", default="out")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("verify", help="tracker and robust-constraint property suites")
    _scenario_flags(p)
    p.add_argument("--samples", type=float, default=1.0, help="scale factor on the sample counts")
    p.add_argument("--out-dir")

    p = sub.add_parser("plotdata", help="figure data files plus a plotting script stub")
    _scenario_flags(p, index=False)
    p.add_argument("--out-dir", default="plots")
    return ap


# -- configuration ---------------------------------------------------------------

def _parse_set(items) -> dict:
    import tomli

    out = {}
    for item in items:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        lhs, rhs = item.split("=", 1)
        sec, key = lhs.strip().split(".", 1)
        try:
            out[(sec, key)] = tomli.loads(f"v = {rhs.strip()}")["v"]
        except tomli.TOMLDecodeError:
            out[(sec, key)] = rhs.strip()
    return out


def overrides_from(args) -> dict:
    ov = _parse_set(getattr(args, "set", []))
    for sec, key, attr in (("sim", "seed", "seed"), ("sim", "horizon", "horizon"), ("robust", "eps", "eps"),
                           ("robust", "r_tilde", "r_tilde"), ("robust", "r_star", "r_star"),
                           ("clf", "w_tilde_factor", "w_tilde_factor"), ("sim", "coast", "coast"),
                           ("clf", "decay_form", "decay_form")):
        v = getattr(args, attr, None)
        if v is not None:
            ov[(sec, key)] = v
    if getattr(args, "freeze", None) is not None:
        ov[("tracker", "freeze_constraints")] = args.freeze == "on"
    for sec, _ in ov:
        if sec not in ("model", "clf", "robust", "tracker", "sim"):
            raise UsageError(f"unknown section {sec!r} in override")
    return ov


def resolve_config(args):
    if args.config and args.preset:
        raise UsageError("give either --preset or --config, not both")
    ov = overrides_from(args)
    if args.config:
        if not os.path.exists(args.config):
            raise UsageError(f"no such configuration file: {args.config}")
        cfg = parse_scenario(args.config, ov)
    elif args.preset:
        cfg = from_preset(args.preset, ov)
    else:
        raise UsageError("one of --preset or --config is required")
    if getattr(args, "decay_form", None) is not None and cfg.model["kind"] != "lotka-volterra":
        raise UsageError("--decay-form only applies to the lotka-volterra model")
    return cfg


# -- helpers ---------------------------------------------------------------------

def _sha256(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    return v


def _write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def bounds_report(cfg, index: int = 0) -> dict:
    scn = build_scenario(cfg, index)
    _, xhat0, balls, region, bounds = prepare(scn)
    coast = coasting_control(scn.model, scn.model.box, region)
    return {
        "scenario": scn.name,
        "L": [float(v) for v in bounds.L],
        "F_bar": bounds.F_bar,
        "F_bar0": bounds.F_bar0,
        "w_bar": bounds.w_bar,
        "u_M": [float(v) for v in bounds.u_M],
        "eps_min": eps_min(bounds),
        "eps": scn.eps,
        "R": balls.R,
        "R_star": balls.R_star,
        "r": balls.r,
        "r_tilde": balls.r_tilde,
        "r_star": balls.r_star,
        "overshoot_basis": balls.overshoot_basis,
        "coast_delta": (balls.r_tilde - 2 * scn.eps - balls.r_star) / bounds.F_bar0,
        "coast_supmin_u": [float(v) for v in coast.u],
        "coast_supmin_speed": coast.sup,
        "first_measurement": [float(v) for v in scn.model.to_original(xhat0)],
        "grid_meta": bounds.grid_meta,
    }


def _run_one(cfg_text: str, index: int, out_dir: str, suffix: str = "") -> dict:
    """Run one scenario and write its files; returns the artifact list and summary."""
    cfg = loads_scenario(cfg_text)
    scn = build_scenario(cfg, index)
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            trace = run_closed_loop(scn)
            abort = None
        except SimulationAbort as exc:
            trace, abort = exc.trace, str(exc)
    wall = time.perf_counter() - t0
    paths = {
        "trace": os.path.join(out_dir, f"trace{suffix}.csv"),
        "intervals": os.path.join(out_dir, f"intervals{suffix}.csv"),
        "companions": os.path.join(out_dir, f"companions{suffix}.csv"),
        "summary": os.path.join(out_dir, f"summary{suffix}.json"),
    }
    summary = {"aborted": abort}
    if trace is not None and trace.t:
        write_trace_csv(trace, paths["trace"])
        write_intervals_csv(trace, paths["intervals"])
        write_companions_csv(trace, paths["companions"])
        summary.update(summarize(trace))
    write_summary(_jsonable(summary), paths["summary"])
    grid_meta = trace.bounds.grid_meta if trace is not None and trace.bounds is not None else {}
    return {"index": index, "paths": {k: v for k, v in paths.items() if os.path.exists(v)},
            "summary": summary, "wall_time_s": wall, "grid_meta": grid_meta}


def _manifest(command: str, cfg_text: str, results: list, out_dir: str, extra=()) -> dict:
    artifacts = []
    for res in results:
        for kind, path in sorted(res["paths"].items()):
            artifacts.append({"kind": kind, "index": res["index"],
                              "path": os.path.relpath(path, out_dir), "sha256": _sha256(path)})
    for kind, path in extra:
        artifacts.append({"kind": kind, "index": None, "path": os.path.relpath(path, out_dir),
                          "sha256": _sha256(path)})
    return {
        "tool": "robust-tvoc",
        "version": __version__,
        "command": command,
        "indices": [r["index"] for r in results],
        "config": cfg_text,
        "grid_meta": results[0]["grid_meta"] if results else {},
        "artifacts": artifacts,
        "wall_time_s": sum(r["wall_time_s"] for r in results),
    }


def _status(summary: dict) -> str:
    if summary.get("aborted"):
        return f"ABORTED: {summary['aborted']}"
    return (f"target entry {summary.get('target_entry_time')} persistent {summary.get('target_persistent')} "
            f"companions {summary.get('companions_persistent')} intervals {summary.get('n_intervals')} "
            f"min delta {summary.get('min_delta_tracking')} decay violations {summary.get('decay_violations')}")


# -- subcommands -----------------------------------------------------------------

def cmd_bounds(args) -> int:
    cfg = resolve_config(args)
    rep = bounds_report(cfg, args.index)
    for key in ("scenario", "L", "F_bar", "F_bar0", "w_bar", "u_M", "eps_min", "eps", "R", "R_star", "r",
                "r_tilde", "r_star", "overshoot_basis", "coast_delta", "coast_supmin_u",
                "coast_supmin_speed"):
        val = rep[key]
        if isinstance(val, float):
            val = f"{val:.6g}"
        elif isinstance(val, list):
            val = "[" + ", ".join(f"{v:.6g}" for v in val) + "]"
        print(f"{key} = {val}")
    print("summary: " + json.dumps(_jsonable(rep), sort_keys=True))
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        _write_json(rep, os.path.join(args.out_dir, "bounds.json"))
    return EXIT_OK


def cmd_run(args) -> int:
    if args.manifest:
        with open(args.manifest) as fh:
            man = json.load(fh)
        cfg_text, index = man["config"], man["indices"][0]
        cfg = loads_scenario(cfg_text)
    else:
        cfg = resolve_config(args)
        cfg_text, index = dump_scenario(cfg), args.index
    n_x0 = len(cfg.sim["x0"])
    if not 0 <= index < n_x0:
        raise UsageError(f"--index {index} out of range (0..{n_x0 - 1})")
    os.makedirs(args.out_dir, exist_ok=True)
    cfg_path = os.path.join(args.out_dir, "scenario.toml")
    with open(cfg_path, "w") as fh:
        fh.write(cfg_text)
    res = _run_one(cfg_text, index, args.out_dir)
    _write_json(_manifest("run", cfg_text, [res], args.out_dir, [("config", cfg_path)]),
                os.path.join(args.out_dir, "manifest.json"))
    print(f"{res['summary'].get('scenario', index)}: {_status(res['summary'])}")
    return EXIT_ABORT if res["summary"].get("aborted") else EXIT_OK


def cmd_batch(args) -> int:
    cfg = resolve_config(args)
    cfg_text = dump_scenario(cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    cfg_path = os.path.join(args.out_dir, "scenario.toml")
    with open(cfg_path, "w") as fh:
        fh.write(cfg_text)
    indices = list(range(len(cfg.sim["x0"])))
    jobs = [(cfg_text, i, args.out_dir, f"_{i}") for i in indices]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_one, *zip(*jobs)))
    else:
        results = [_run_one(*j) for j in jobs]
    results.sort(key=lambda r: r["index"])
    combined = {
        "runs": [r["summary"] for r in results],
        "all_entered_target": all(r["summary"].get("target_entry_time") is not None for r in results),
        "all_persistent": all(r["summary"].get("target_persistent") is True for r in results),
        "all_companions_persistent": all(r["summary"].get("companions_persistent") is True for r in results),
        "total_decay_violations": sum(r["summary"].get("decay_violations", 0) or 0 for r in results),
        "aborted": [r["index"] for r in results if r["summary"].get("aborted")],
    }
    comb_path = os.path.join(args.out_dir, "summary.json")
    write_summary(_jsonable(combined), comb_path)
    _write_json(_manifest("batch", cfg_text, results, args.out_dir,
                          [("config", cfg_path), ("combined_summary", comb_path)]),
                os.path.join(args.out_dir, "manifest.json"))
    for r in results:
        print(f"[{r['index']}] {_status(r['summary'])}")
    return EXIT_ABORT if combined["aborted"] else EXIT_OK


def cmd_verify(args) -> int:
    cfg = resolve_config(args)
    scale = args.samples
    if scale <= 0:
        raise UsageError("--samples must be positive")

    def n(k):
        return max(1, int(round(k * scale)))

    scn = build_scenario(cfg, args.index)
    _, _, balls, region, bounds = prepare(scn)
    results = list(check_derivatives(n(1000)))
    results.append(check_settling(n(50)))
    results.extend(check_eps_bar_oracle(n(1000)))
    results.append(check_constraint_soundness(scn.model, scn.clf, bounds, region, balls.r_star,
                                              gamma=float(cfg.tracker["gamma"]), n_centers=n(1000)))
    for r in results:
        print(r.line())
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        _write_json([vars(r) for r in results], os.path.join(args.out_dir, "verify.json"))
    return EXIT_OK if all(r.passed for r in results) else EXIT_INVALID


# the stub is emitted as text; this package never imports the plotting library
PLOT_LIB = "matplotlib.pyplot"
PLOT_STUB = '''"""Plot the CSV files in this directory (requires matplotlib)."""
import csv
import glob
import os

import {lib} as plt

HERE = os.path.dirname(os.path.abspath(__file__))


def read(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return {k: [float(r[k]) if r[k] not in ("",) else float("nan") for r in rows] for k in rows[0]}


def main():
    circles = os.path.join(HERE, "balls.csv")
    fig, ax = plt.subplots()
    if os.path.exists(os.path.join(HERE, "ball_levels.csv")):
        levels = read(os.path.join(HERE, "ball_levels.csv"))
        for path in sorted(glob.glob(os.path.join(HERE, "state_*.csv"))):
            d = read(path)
            ax.plot(d["t"], d["x1"], label=os.path.basename(path))
            for k in d:
                if k.startswith("companion"):
                    ax.plot(d["t"], d[k], ":", color="brown", lw=0.8)
        for name, lo, hi in zip(levels["index"], levels["lower"], levels["upper"]):
            ax.axhline(lo, ls="--", lw=0.8)
            ax.axhline(hi, ls="--", lw=0.8)
        ax.set_xlabel("t")
        ax.set_ylabel("x")
    else:
        c = read(circles)
        for k in c:
            if k.endswith("_x1"):
                ax.plot(c[k], c[k[:-3] + "_x2"], "--", lw=0.8)
        for path in sorted(glob.glob(os.path.join(HERE, "phase_*.csv"))):
            d = read(path)
            ax.plot(d["x1"], d["x2"])
            for k in d:
                if k.startswith("companion") and k.endswith("_x1"):
                    ax.plot(d[k], d[k[:-3] + "_x2"], ":", color="brown", lw=0.8)
        ax.set_xlabel("x1")
        ax.set_ylabel("x2")
        ax.set_aspect("equal")
    fig.savefig(os.path.join(HERE, "figure.png"), dpi=150)


if __name__ == "__main__":
    main()
'''


def _write_rows(path, header, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def cmd_plotdata(args) -> int:
    cfg = resolve_config(args)
    os.makedirs(args.out_dir, exist_ok=True)
    written = []
    aborted = False
    balls = None
    for index in range(len(cfg.sim["x0"])):
        scn = build_scenario(cfg, index)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            try:
                trace = run_closed_loop(scn)
            except SimulationAbort as exc:
                trace, aborted = exc.trace, True
        if trace is None or not trace.t:
            continue
        model = scn.model
        balls = balls or trace.balls
        t, X, xh, U = trace.arrays()
        orig = np.stack([model.to_original(X[:, j]) for j in range(X.shape[1])], axis=1)
        comp = orig[:, 2:]
        if model.n == 1:
            path = os.path.join(args.out_dir, f"state_{index}.csv")
            header = (["t", "x1", "xhat1", "u1"] + [f"companion{j}" for j in range(comp.shape[1])])
            rows = np.column_stack([t, orig[:, 0, 0], model.to_original(xh)[:, 0], U[:, 0], comp[:, :, 0]])
        else:
            path = os.path.join(args.out_dir, f"phase_{index}.csv")
            header = (["t", "x1", "x2"] + [f"companion{j}_x{i + 1}" for j in range(comp.shape[1])
                                           for i in range(model.n)])
            rows = np.column_stack([t, orig[:, 0], comp.reshape(len(t), -1)])
        _write_rows(path, header, rows)
        written.append(path)
    if balls is not None:
        model = build_scenario(cfg, 0).model
        radii = [("overshoot", balls.R_star), ("target", balls.r), ("trigger", balls.r_tilde),
                 ("core", balls.r_star)]
        if model.n == 1:
            path = os.path.join(args.out_dir, "ball_levels.csv")
            rows = [(k, model.x_star[0] - rad, model.x_star[0] + rad) for k, (_, rad) in enumerate(radii)]
            _write_rows(path, ["index", "lower", "upper"], rows)
        else:
            path = os.path.join(args.out_dir, "balls.csv")
            th = np.linspace(0.0, 2.0 * np.pi, 361)
            cols, header = [], []
            for name, rad in radii:
                cols += [model.x_star[0] + rad * np.cos(th), model.x_star[1] + rad * np.sin(th)]
                header += [f"{name}_x1", f"{name}_x2"]
            _write_rows(path, header, np.column_stack(cols))
        written.append(path)
    stub = os.path.join(args.out_dir, "plot_figures.py")
    with open(stub, "w") as fh:
        fh.write(PLOT_STUB.replace("{lib}", PLOT_LIB))
    written.append(stub)
    for p in written:
        print(p)
    return EXIT_ABORT if aborted else EXIT_OK


COMMANDS = {"bounds": cmd_bounds, "run": cmd_run, "batch": cmd_batch, "verify": cmd_verify,
            "plotdata": cmd_plotdata}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except (ConfigError, InvalidGeometryError, InvalidRelaxationError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (SimulationAbort, EstimationError, RuntimeError, ValueError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
