import numpy as np
import pytest

from rcmlab.env import EnvironmentSpec, distribution_from_dict, sample_environment

LAWS = {
    "constant": {"kind": "constant", "value": 1.0},
    "uniform": {"kind": "uniform", "lower": 0.5},
    "bernoulli": {"kind": "bernoulli", "p": 0.5, "lo": 1.0, "hi": 2.0},
    "pareto": {"kind": "pareto", "gamma_star": 8.0},
    "lognormal": {"kind": "lognormal", "sigma": 1.0},
}


def make_spec(law="uniform", d=2, L=16, seed=0, truncation=None):
    dist = law if isinstance(law, dict) else LAWS[law]
    return EnvironmentSpec(d=d, L=L, distribution=distribution_from_dict(dist), seed=seed, truncation=truncation)


def make_env(law="uniform", d=2, L=16, seed=0):
    return sample_environment(make_spec(law, d, L, seed))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --------------------------------------------------------------------------
# acceptance report: one line per criterion, repeated in the terminal summary
# --------------------------------------------------------------------------

ACCEPTANCE_LINES = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = {}


@pytest.fixture
def acceptance(request):
    def record(n, passed, detail):
        line = f"criterion {n}: {'PASS' if passed else 'FAIL'} - {detail}"
        request.config.stash[ACCEPTANCE_LINES][n] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
