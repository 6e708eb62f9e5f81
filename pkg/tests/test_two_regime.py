"""Panel sintético de dos regímenes con faltantes: ajuste, errores estándar y MKF-KS"""

import numpy as np
import pytest

from messm.em import FitConfig, fit_em
from messm.mkfks import TRAJECTORY_COLUMNS, ParticleConfig, run_filter
from messm.model import ParameterVector, build_ar_noise, build_two_regime
from messm.score import observed_information
from messm.simulate import MissingSpec, SimConfig, simulate_panel

TRUTH = {"mu1": 0.85, "mu2": 0.86, "d1": 0.33, "d2": 0.76, "d3": 0.007, "d4": 0.044}


@pytest.fixture
def two_regime_problem():
    base, base_effects = build_ar_noise(40)
    model, effects = build_two_regime(base, base_effects, t_prime=10, n_times=20)
    truth = ParameterVector.from_dict(model, effects, TRUTH)
    config = SimConfig(model, effects, truth, n_times=20, seed=31,
                       missing=MissingSpec(kind="bernoulli", rate=0.15))
    data, record = simulate_panel(config)
    return data, model, effects, truth, record


@pytest.mark.slow
def test_known_theta_fit_is_within_three_standard_errors(two_regime_problem):
    data, model, effects, truth, record = two_regime_problem
    assert not data.mask.all()

    init = truth.with_parts(truth.fixed_effects, [0.6, 0.4, 0.007, 0.044])
    config = FitConfig(max_iter=2000, tol=1e-8, known_theta=record.theta)
    fit = fit_em(data, model, effects, init, config)
    assert fit.converged

    info = observed_information(data, model, effects, fit.params, config)
    assert info.names == ("d1", "d2")
    assert info.positive_definite
    estimate = fit.params.as_dict()
    for name, se in zip(info.names, info.se):
        assert abs(estimate[name] - TRUTH[name]) < 3 * se


@pytest.mark.slow
def test_filter_writes_trajectory_with_oracle_comparison(two_regime_problem):
    data, model, effects, truth, record = two_regime_problem
    report = run_filter(data, model, effects, truth, ParticleConfig(n_particles=500, h=0.1, seed=2),
                        oracle_theta=record.theta)

    assert report.trajectory.columns == TRAJECTORY_COLUMNS
    assert report.trajectory.height == data.m * data.n_times
    assert {"mkfks", "oracle_kf", "ratio_median_oracle_kf"} <= set(report.mse)
    assert report.mse["ratio_median_oracle_kf"] < 2.0
    assert np.isfinite(report.trajectory["pred_mean"].to_numpy()).all()
