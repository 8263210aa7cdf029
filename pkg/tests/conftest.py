import pytest

from canardkit.canard import build_section_chart, locate_periodic_canard, prepare_geometry
from canardkit.sysdef import builtin_system


@pytest.fixture(scope="session")
def paper3d():
    return builtin_system("paper3d", {"a": 3, "eps": 0.1})


@pytest.fixture(scope="session")
def geometry(paper3d):
    return prepare_geometry(paper3d)


@pytest.fixture(scope="session")
def chart(paper3d, geometry):
    return build_section_chart(paper3d, geometry.records[0], (geometry.ga, geometry.gr))


@pytest.fixture(scope="session")
def canard01(paper3d, chart):
    """Periodic canard at a = 3, eps = 0.1, shared by several modules' tests."""
    return locate_periodic_canard(paper3d, chart)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(capsys):
    """Record one pass/fail line per acceptance criterion; shown in the terminal summary."""

    def emit(n, passed, detail, elapsed, limit):
        ok = passed and elapsed < limit
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}  [{elapsed:.1f} s, limit {limit:g} s]"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
