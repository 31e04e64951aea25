import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from kirkwood.closure import ClosureModel  # noqa: E402
from kirkwood.grand_canonical import BoxRegion  # noqa: E402
from kirkwood.potentials import HardCore, ModelParams  # noqa: E402


@pytest.fixture(scope="session")
def tonks_params():
    return ModelParams(1.0, 0.2, HardCore(0.5))


@pytest.fixture(scope="session")
def unit_box():
    return BoxRegion([0.0], [1.0])


@pytest.fixture(scope="session")
def tonks(tonks_params):
    return ClosureModel(tonks_params)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(lines, key=lambda k: (int(str(k).rstrip("b")), str(k))):
        terminalreporter.write_line(lines[key])
