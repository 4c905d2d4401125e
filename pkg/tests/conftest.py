import numpy as np
import pytest

# criterion id -> (passed, detail); filled by test_acceptance, printed at the end
ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_addoption(parser):
    parser.addoption(
        "--full-acceptance",
        action="store_true",
        default=False,
        help="run the full-budget training comparison (hours on one core)",
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running test")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split()[0]), k)):
        status, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{status}] {key}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
