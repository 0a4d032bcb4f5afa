import pytest

from detrust_fl import dmcfe
from detrust_fl.group import GroupParams, setup_group

import gmpy2

_criteria: dict[str, list[str]] = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    name = marker.args[0]
    outcome = "PASS" if call.excinfo is None else "FAIL"
    _criteria.setdefault(name, []).append(outcome)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcomes in _criteria.items():
        status = "PASS" if all(o == "PASS" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"{status}  {name}")


@pytest.fixture(scope="session")
def tiny_group():
    """p = 23, q = 11, g = 4."""
    return GroupParams(p=gmpy2.mpz(23), q=gmpy2.mpz(11), g=gmpy2.mpz(4), bits=5)


@pytest.fixture(scope="session")
def group16():
    return setup_group(16, seed=1, allow_insecure=True)


@pytest.fixture(scope="session")
def group64():
    return setup_group(64, seed=3, allow_insecure=True)


@pytest.fixture(scope="session")
def group128():
    return setup_group(128, seed=5, allow_insecure=True)


def make_keys(pp, seed=0, mode="dealer"):
    return dmcfe.keygen_ceremony(pp, dmcfe.seeded_rng("test-keys", seed), mode=mode)
