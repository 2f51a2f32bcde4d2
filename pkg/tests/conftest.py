import math

import numpy as np
import pytest
from hypothesis import settings

from stochsource.experiments import RunConfig, build_model
from stochsource.forward import ExponentialFactor, ModelSpec, assemble_operator, simulate_paths
from stochsource.grid import Grid, TimeMesh

# property tests replay the same examples on every run
settings.register_profile("repo", derandomize=True)
settings.load_profile("repo")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def report():
    """Record one pass/fail line for the end-of-session summary."""

    def _report(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)

    return _report


def make_model(M=100, K=20, *, length=math.pi, T=1.0, a=1.0, c=0.0, f=None, g=0.0, u0=0.0, R=None, theta=1.0):
    grid = Grid(length, M)
    op = assemble_operator(grid, a, c)

    def field(v):
        if callable(v):
            return grid.sample(v)
        return np.full(grid.node_count, float(v))

    f = np.zeros(grid.node_count) if f is None else field(f)
    return ModelSpec(op, f, R or ExponentialFactor(1.0, 0.0), field(g), field(u0), TimeMesh(T, K), theta)


@pytest.fixture(scope="session")
def example1():
    return build_model(RunConfig(example="example1"))


@pytest.fixture(scope="session")
def example2():
    return build_model(RunConfig(example="example2"))


# Time steps for checks against the continuous-time spectral variance.  At
# dt = 1/20 the implicit scheme's terminal variance is O(dt) below the
# continuous one (about 3% mid-domain), which is bias rather than sampling error.
FINE_K = 500


@pytest.fixture(scope="session")
def example2_fine():
    return build_model(RunConfig(example="example2", K=FINE_K))


@pytest.fixture(scope="session")
def example2_paths(example2_fine):
    """Terminal fields of 10^4 paths of example 2 on the fine time mesh."""
    model, _ = example2_fine
    return simulate_paths(model, range(1, 10_001))
