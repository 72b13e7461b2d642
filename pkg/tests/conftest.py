import numpy as np
import pytest

from scenevae.tensor import precision, reset_tape


@pytest.fixture(autouse=True)
def _clean_tape():
    reset_tape()
    yield
    reset_tape()


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): one of the numbered acceptance criteria")
    config._acceptance = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None or call.when != "call":
        return
    n = marker.args[0]
    ok = call.excinfo is None
    detail = getattr(item, "acceptance_detail", "")
    if not ok:
        detail = (detail + " | " if detail else "") + call.excinfo.exconly().splitlines()[0][:160]
    item.config._acceptance[n] = (ok, item.name, detail)


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, "_acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, name, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def detail(request):
    """Attach a one-line measurement to the acceptance summary."""
    def set_detail(text):
        request.node.acceptance_detail = text
    return set_detail
