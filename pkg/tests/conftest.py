import pytest

from cxr_ef.cohort import generate_synthetic_cohort


@pytest.fixture(scope="session")
def synthetic200(tmp_path_factory):
    """The default desk cohort: n=200, class_signal=1.0, seed=7."""
    out = tmp_path_factory.mktemp("synthetic200")
    return generate_synthetic_cohort(200, 1.0, 7, out)



def pytest_terminal_summary(terminalreporter):
    from .helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
