import numpy as np
import pytest

from dosemetrics.volumes import DoseGrid

# acceptance-criterion results collected here and echoed in the summary
ACCEPTANCE_LOG: list[tuple[str, bool, str]] = []


def record_criterion(name: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE_LOG.append((name, passed, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LOG:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, passed, detail in ACCEPTANCE_LOG:
        status = "PASS" if passed else "FAIL"
        line = f"[{status}] {name}"
        if detail:
            line += f": {detail}"
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_grid(rng, dims=(8, 8, 8), spacing=(2.0, 2.0, 2.0), high=80.0,
                unit_scale=1.0) -> DoseGrid:
    nx, ny, nz = dims
    vals = rng.uniform(0.0, high, size=(nz, ny, nx))
    return DoseGrid(dims=dims, spacing_mm=spacing, values=vals, unit_scale=unit_scale)
