from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from robustdm.models import LGModel, MoEModel, UtilityGrowth
from robustdm.robust import Preferences, SolverOptions, solve

settings.register_profile("repo", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

# beta = 0.5 and theta = 2 give alpha = -1
BETA, THETA = 0.5, 2.0


@pytest.fixture(scope="session")
def prefs():
    return Preferences(BETA, THETA)


@pytest.fixture(scope="session")
def u1():
    return UtilityGrowth(lambda1=[1.0])


@pytest.fixture(scope="session")
def lg_iid():
    return LGModel([0.0], [[0.0]], [[1.0]])


@pytest.fixture(scope="session")
def lg_ar():
    return LGModel([0.0], [[0.5]], [[1.0]])


@pytest.fixture(scope="session")
def moe4():
    return MoEModel([0.3, 0.3, 0.2, 0.2], [[-1.0], [1.0], [0.0], [2.0]],
                    [[[0.5]], [[0.3]], [[0.0]], [[0.6]]], [[[1.0]], [[0.8]], [[1.2]], [[0.5]]])


@pytest.fixture(scope="session")
def moe2():
    return MoEModel([0.6, 0.4], [[0.5], [-0.5]], [[[0.5]], [[0.2]]], [[[1.0]], [[1.5]]])


@pytest.fixture(scope="session")
def sol_iid(lg_iid, prefs, u1):
    return solve(lg_iid, prefs, u1)


@pytest.fixture(scope="session")
def sol_ar(lg_ar, prefs, u1):
    return solve(lg_ar, prefs, u1, SolverOptions(nodes=101, extrap="linear"))


@pytest.fixture(scope="session")
def sol_moe(moe2, prefs, u1):
    return solve(moe2, prefs, u1)


def central(grid, model, k=3.0):
    sd = np.sqrt(np.diag(np.atleast_2d(model.stationary_cov)))
    return grid.central_mask(model.stationary_mean, k * sd)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
