import time

import numpy as np
import pytest

from goodood.numcore import Mlp, make_rng


def fd_grad(f, x, h=1e-5):
    """Central finite differences of a scalar function over every entry of x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


@pytest.fixture
def rng():
    return make_rng(1234)


def random_mlp(rng, dims=(3, 5, 4, 2), acts=("tanh", "relu", "identity")):
    return Mlp.init(list(dims), list(acts), rng)


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """One full pipeline run on the default configuration (about a minute)."""
    from goodood import pipeline
    from goodood.config import RunConfig
    cfg = RunConfig(out_dir=str(tmp_path_factory.mktemp("run") / "default"))
    start = time.perf_counter()
    summary = pipeline.run_all(cfg)
    RUN_SECONDS["default"] = time.perf_counter() - start
    return cfg, summary


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[int, str] = {}
RUN_SECONDS: dict[str, float] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
