import numpy as np
import pytest

from varpg.environments import (
    build_geometric_chain,
    build_nonconvex_example,
    geometric_direct_policy,
)


@pytest.fixture
def nonconvex():
    return build_nonconvex_example()


@pytest.fixture
def geometric():
    return build_geometric_chain(), geometric_direct_policy(0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
