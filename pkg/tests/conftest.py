import pytest

from pbcell.electrolyte import symmetric
from pbcell.geometry import build_disk_cell, build_slab


@pytest.fixture(scope="session")
def sym():
    return symmetric()


@pytest.fixture(scope="session")
def slab200():
    return build_slab(1.0, 200, 1.0)


@pytest.fixture(scope="session")
def graded_slab():
    return build_slab(1.0, 2000, 1.008)


@pytest.fixture(scope="session")
def uniform_slab():
    return build_slab(1.0, 2000, 1.0)


@pytest.fixture(scope="session")
def coarse_disk():
    return build_disk_cell(0.25, 0.05, 0.1, 6)


@pytest.fixture(scope="session")
def disk():
    return build_disk_cell(0.25, 0.02, 0.1, 10)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line; echoed in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(number, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:>2}: {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
