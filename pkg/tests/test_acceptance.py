"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

Run alone with ``python3 tests/test_acceptance.py`` or as part of ``pytest``.
"""

import csv
import json
import time

import numpy as np
import pytest

from robust_tvoc.checks import check_constraint_soundness, check_derivatives, check_eps_bar_oracle, check_settling
from robust_tvoc.cli import bounds_report
from robust_tvoc.config import from_preset
from robust_tvoc.presets import build_scenario
from robust_tvoc.simulator import prepare


def emit(capsys, number, title, passed, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if passed else 'FAIL'} criterion {number} ({title}): {detail}")
    assert passed, detail


def _lv_summaries(out):
    combined = json.load(open(out / "summary.json"))
    return combined, combined["runs"]


def _lv_intervals(out, i):
    with open(out / f"intervals_{i}.csv") as fh:
        return list(csv.DictReader(fh))


def test_criterion_1_eps_min(capsys):
    cases = [({}, 1.7e-3), ({("clf", "w_tilde_factor"): 0.3}, 3e-3),
             ({("robust", "r_tilde"): 0.35, ("robust", "r_star"): 0.25}, 0.43e-3)]
    parts, ok = [], True
    for ov, target in cases:
        t0 = time.perf_counter()
        val = bounds_report(from_preset("train", ov))["eps_min"]
        wall = time.perf_counter() - t0
        good = abs(val - target) <= 0.15 * target and wall < 30
        ok &= good
        parts.append(f"{val:.3e} vs {target:.2e} ({100 * (val / target - 1):+.1f}%, {wall:.1f} s)")
    emit(capsys, 1, "eps_min reproduction", ok, "; ".join(parts))


def test_criterion_2_train_closed_loop(capsys, train_run):
    trace, s, wall = train_run
    ok = (s["target_entry_time"] is not None and s["target_entry_time"] <= 60.0 and s["target_persistent"]
          and s["decay_violations"] == 0 and wall < 60)
    emit(capsys, 2, "train closed loop", ok,
         f"enters B_1(30) at t = {s['target_entry_time']:.2f} s, persistent {s['target_persistent']}, "
         f"companions persistent {s['companions_persistent']}, decay violations {s['decay_violations']}, "
         f"{wall:.1f} s")


def test_criterion_3_lotka_volterra_batch(capsys, lv_batch):
    out, code, wall = lv_batch
    combined, runs = _lv_summaries(out)
    traces = sorted(p.name for p in out.glob("trace_*.csv"))
    entries = [r["target_entry_time"] for r in runs]
    ok = (code == 0 and len(traces) == 7 and combined["all_entered_target"] and combined["all_persistent"]
          and combined["all_companions_persistent"] and wall < 300)
    emit(capsys, 3, "Lotka-Volterra batch", ok,
         f"{len(traces)} trace files, all enter B_0.7(10,4) (entry {min(entries):.2f}..{max(entries):.2f}) "
         f"and persist {combined['all_persistent']}, companions persist {combined['all_companions_persistent']}, "
         f"{wall:.0f} s")


def test_criterion_4_eps_bar_oracle(capsys):
    res = check_eps_bar_oracle(1000)
    emit(capsys, 4, "closed-form vs bisection required accuracy", all(r.passed for r in res),
         "; ".join(f"m={m}: worst {r.worst:.2e} over {r.samples}" for m, r in zip((1, 2), res)))


def test_criterion_5_constraint_soundness(capsys):
    results = []
    for name, index, centers in (("train", 0, 1000), ("lotka-volterra", 0, 500), ("lotka-volterra", 5, 500)):
        scn = build_scenario(from_preset(name), index)
        _, _, balls, region, bounds = prepare(scn)
        results.append(check_constraint_soundness(scn.model, scn.clf, bounds, region, balls.r_star,
                                                  gamma=scn.gamma, n_centers=centers))
    total = sum(r.samples for r in results)
    worst = max(r.worst for r in results)
    emit(capsys, 5, "inflated constraints imply phi <= gamma", total >= 100_000 and worst <= 1e-9,
         f"worst phi - gamma = {worst:.3e} over {total} samples")


def test_criterion_6_fixed_time_settling(capsys, train_run, lv_batch):
    _, s, _ = train_run
    out, _, _ = lv_batch
    long_lv = [float(r["eT_end"]) for i in range(7) for r in _lv_intervals(out, i)
               if r["mode"] == "tracking" and float(r["delta_k"]) >= 0.05 and r["truncated"] == "0"]
    n_train = sum(1 for r in train_run[0].intervals if r.mode == "tracking" and r.delta >= 0.05 and not r.truncated)
    synth = check_settling(50)
    worst_lv = max(long_lv) if long_lv else 0.0
    ok = s["max_eT_long"] is not None and s["max_eT_long"] <= 1e-3 and worst_lv <= 1e-3 and synth.passed
    emit(capsys, 6, "tracking error at interval ends", ok,
         f"train max e_T {s['max_eT_long']:.2e} over {n_train} intervals with delta >= 0.05; "
         f"Lotka-Volterra {len(long_lv)} such intervals (max e_T {worst_lv:.2e}); "
         f"synthetic worst {synth.worst:.2e} over {synth.samples}")


def test_criterion_7_derivatives(capsys):
    res = check_derivatives(1000)
    emit(capsys, 7, "analytic derivatives and strong convexity", all(r.passed for r in res),
         "; ".join(r.detail or f"{r.name.split(' vs')[0]} {r.worst:.2e}" for r in res))


def test_criterion_8_zeno(capsys, train_run, lv_batch):
    _, s, _ = train_run
    out, _, _ = lv_batch
    _, runs = _lv_summaries(out)
    ok = True
    parts = []
    for summ in [s] + runs:
        good = summ["min_delta_tracking"] >= summ["delta_floor"] > 0 and summ["min_delta"] > 0
        counts = summ["event_counts"]
        good &= all(isinstance(v, int) and v >= 0 for v in counts.values())
        ok &= good
        parts.append(f"{summ['scenario']}: min delta {summ['min_delta_tracking']:.3e} >= floor "
                     f"{summ['delta_floor']:.3e}, {counts['measure']} measurements")
    # within each run every coasting interval has the same positive length
    for i in range(7):
        coast = {float(r["delta_k"]) for r in _lv_intervals(out, i) if r["mode"] == "coasting"}
        ok &= len(coast) <= 1 and all(d > 0 for d in coast)
    emit(capsys, 8, "Zeno exclusion", ok, "; ".join(parts))


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
