import numpy as np
import pytest
from hypothesis import strategies as st

from dsehs import model, solver


@pytest.fixture(scope="session")
def table1():
    return model.table1_config()


@pytest.fixture(scope="session")
def table1_solution(table1):
    return solver.pds_value_iteration(table1, theta=1e-6)


@pytest.fixture(scope="session")
def table1_system(table1):
    return solver.MarkovSystem.build(table1)


@pytest.fixture
def tiny():
    return model.tiny_config()


def _stochastic_rows(draw, n):
    rows = []
    for _ in range(n):
        w = np.array(draw(st.lists(st.integers(0, 5), min_size=n, max_size=n)), dtype=float)
        if w.sum() == 0:
            w[draw(st.integers(0, n - 1))] = 1.0
        rows.append(w / w.sum())
    return np.array(rows)


def _pmf(draw, max_len=3):
    k = draw(st.integers(1, max_len))
    w = np.array(draw(st.lists(st.integers(0, 6), min_size=k, max_size=k)), dtype=float)
    if w.sum() == 0:
        w[-1] = 1.0
    return w / w.sum()


@st.composite
def small_configs(draw, max_buffer=4, max_battery=4, max_channels=3, tx_energy=None):
    """Random small models with exact-ish probabilities (integer weights normalized)."""
    n_h = draw(st.integers(1, max_channels))
    plr = sorted(draw(st.lists(st.integers(0, 10), min_size=n_h, max_size=n_h, unique=True)), reverse=True)
    n_e = draw(st.integers(1, max_battery))
    etx = tx_energy if tx_energy is not None else draw(st.integers(1, n_e))
    return model.ModelConfig(
        buffer_capacity=draw(st.integers(0, max_buffer)),
        battery_capacity=n_e,
        plr=[q / 10 for q in plr],
        channel_kernel=_stochastic_rows(draw, n_h),
        arrival_pmf=_pmf(draw),
        harvest_pmf=_pmf(draw),
        tx_energy=etx,
        overflow_penalty=draw(st.sampled_from([0.0, 1.0, 10.0, 50.0])),
        discount=draw(st.sampled_from([0.0, 0.5, 0.8, 0.9])),
    )


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
