"""Fixtures compartidas: generadores con semilla y paneles AR pequeños"""

import numpy as np
import pytest

from messm.model import InitialState, ParameterVector, build_ar_noise
from messm.simulate import SimConfig, simulate_panel


@pytest.fixture
def rng():
    return np.random.default_rng(20261017)


@pytest.fixture
def fixed_init():
    return InitialState("fixed", np.zeros(1), np.array([[1.0]]))


@pytest.fixture
def ar_problem(fixed_init):
    """AR + ruido con m = 6, T = 25, estado inicial fijo"""
    model, effects = build_ar_noise(6, fixed_init)
    truth = ParameterVector.from_parts(model, effects, [0.5], [0.3, 0.4, 0.05])
    data, record = simulate_panel(SimConfig(model, effects, truth, n_times=25, seed=7))
    return data, model, effects, truth, record


@pytest.fixture
def ar_stationary_problem():
    """AR + ruido estacionario con Δ₀ = (0.3, 0.3, 3, 0.1), m = 8, T = 20"""
    model, effects = build_ar_noise(8)
    truth = ParameterVector.from_parts(model, effects, [0.3], [0.3, 3.0, 0.1])
    data, record = simulate_panel(SimConfig(model, effects, truth, n_times=20, seed=11))
    return data, model, effects, truth, record
