import numpy as np
import pytest

import homoglab as hl


@pytest.fixture(scope="session")
def switch_family():
    return hl.make_family("switch")


@pytest.fixture(scope="session")
def switch_avg(switch_family):
    return hl.build_averaged(switch_family)


@pytest.fixture(scope="session")
def const_family():
    return hl.make_family("const")


@pytest.fixture(scope="session")
def slowvary_family():
    return hl.make_family("slowvary")


@pytest.fixture(scope="session")
def small_grid():
    return hl.SimGrid(0.5, 40)


@pytest.fixture(scope="session")
def switch_bundle(switch_family, small_grid):
    return hl.simulate_eps(switch_family, 0.3, [0.5, 0.0], small_grid,
                           n_paths=2000, seed=11, substeps=2)


@pytest.fixture(scope="session")
def avg_bundle(switch_avg, small_grid):
    return hl.simulate_avg(switch_avg, [0.5, 0.0], small_grid,
                           n_paths=2000, seed=12)


def base_config(**overrides):
    doc = {
        "family": {"id": "switch", "params": [], "d": 1, "k": 2},
        "x0": [0.5, 0.0],
        "t_end": 0.5,
        "eps_list": [1.0, 0.3],
        "mc": {"n_paths": 1000, "n_steps": 25, "seed": 42},
        "bsde": {"basis_degree": 3, "sign_feature": True, "n_picard": 3},
        "averaging": {"tol": 1e-4},
        "tolerances": {},
        "outputs": {"dir": "out", "formats": ["csv", "json"]},
    }
    doc.update(overrides)
    return doc


@pytest.fixture()
def config_doc():
    return base_config()


# one pass/fail line per acceptance criterion, shown after the test summary
# (fd-level capture would otherwise swallow prints from passing tests)
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
