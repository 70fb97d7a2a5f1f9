"""Shared fixtures: grids, markets, and small simulated ensembles."""
import numpy as np
import pytest

from bondlab.curve_space import Curve, MaturityGrid, SobolevIndex
from bondlab.dynamics import SimConfig, flat_forward_curve, simulate_mild
from bondlab.market_model import (
    CoefficientSchedule,
    DriftCurve,
    VolatilityOperator,
    constant_coefficients,
    humped_volatility,
)


@pytest.fixture
def grid():
    return MaturityGrid(x_max=4.0, n_points=257)


@pytest.fixture
def fine_grid():
    return MaturityGrid(x_max=4.0, n_points=1025)


@pytest.fixture
def s1():
    return SobolevIndex(1)


@pytest.fixture
def s2():
    return SobolevIndex(2)


def make_market(grid, gamma=0.2, rate=0.05, scale=0.01):
    """One-factor market: sigma(x) = scale * x * exp(-x), m = sigma * gamma."""
    sigma_curve = humped_volatility(grid, scale)
    sigma = VolatilityOperator((sigma_curve,))
    m_vals = gamma * sigma_curve.values()
    m = DriftCurve(Curve(grid, m_vals, 0.0))
    schedule = constant_coefficients(m, sigma)
    p0 = flat_forward_curve(grid, rate)
    return p0, schedule, np.array([gamma])


def make_zero_vol_market(grid, rate=0.05):
    """Deterministic market: sigma = 0 (one dead factor), m = 0."""
    zero = Curve(grid, np.zeros(grid.n_points), 0.0)
    sigma = VolatilityOperator((zero,))
    m = DriftCurve(zero)
    schedule = constant_coefficients(m, sigma)
    p0 = flat_forward_curve(grid, rate)
    return p0, schedule, np.array([0.0])


@pytest.fixture
def market(grid, s1):
    """Standard small ensemble with retained states under P."""
    p0, schedule, gamma = make_market(grid)
    config = SimConfig(grid=grid, s=s1, horizon=1.0, n_steps=64, n_paths=64, seed=7)
    path = simulate_mild(p0, schedule, config, keep_states=True)
    return {
        "p0": p0,
        "schedule": schedule,
        "gamma": gamma,
        "config": config,
        "path": path,
    }
