import time
import warnings

import pytest

from robust_tvoc.cli import dispatch
from robust_tvoc.config import from_preset
from robust_tvoc.presets import build_scenario
from robust_tvoc.simulator import run_closed_loop, summarize


def timed_run(cfg, index=0):
    scn = build_scenario(cfg, index)
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        trace = run_closed_loop(scn)
    wall = time.perf_counter() - t0
    return trace, summarize(trace, wall), wall


@pytest.fixture(scope="session")
def train_run():
    return timed_run(from_preset("train"))


@pytest.fixture(scope="session")
def lv_batch(tmp_path_factory):
    """The Lotka-Volterra batch through the command line: ``(out_dir, exit code, wall time)``."""
    out = tmp_path_factory.mktemp("lv_batch")
    t0 = time.perf_counter()
    code = dispatch(["batch", "--preset", "lotka-volterra", "--out-dir", str(out)])
    return out, code, time.perf_counter() - t0


@pytest.fixture(scope="session")
def linear_run():
    return timed_run(from_preset("linear"))
