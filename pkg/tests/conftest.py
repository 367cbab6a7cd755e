import numpy as np
import pytest
from hypothesis import strategies as st

from stcsnn.events import EventStream


def random_stream(rng, n_max=200, width=8, height=6, t_max=5000):
    n = int(rng.integers(0, n_max + 1))
    return EventStream(rng.integers(0, width, n), rng.integers(0, height, n),
                       rng.integers(0, t_max + 1, n), rng.integers(0, 2, n), width, height)


@st.composite
def streams(draw, max_events=60, width=5, height=4, max_t=2000):
    n = draw(st.integers(0, max_events))
    col = lambda hi: draw(st.lists(st.integers(0, hi), min_size=n, max_size=n))
    return EventStream(col(width - 1), col(height - 1), col(max_t), col(1), width, height)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    lines = getattr(terminalreporter.config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def report(request):
    """Record one acceptance line; printed now and again in the run summary."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def emit(number, status, detail):
        line = f"criterion {number}: {status}  {detail}"
        lines.append(line)
        print(line)
    return emit
