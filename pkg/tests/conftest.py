import pytest
import torch

CRITERIA: list[str] = []


@pytest.fixture(scope="session", autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def report_criterion():
    def record(number, passed: bool, detail: str):
        name = f"criterion {number}" if isinstance(number, int) else number
        line = f"{name}: {'PASS' if passed else 'FAIL'} ({detail})"
        CRITERIA.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
