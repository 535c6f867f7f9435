import pytest
import torch

from transdiff.numeric import precision


@pytest.fixture
def f64():
    with precision("float64"):
        yield


@pytest.fixture(autouse=True)
def _restore_dtype():
    saved = torch.get_default_dtype()
    yield
    torch.set_default_dtype(saved)


def pytest_terminal_summary(terminalreporter):
    from report import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
