import numpy as np
import pytest

from messm.em import FitConfig
from messm.errors import ConfigError
from messm.model import ParameterVector, build_ar_noise, build_swarm, build_two_regime
from messm.posterior import McmcConfig
from messm.simulate import MissingSpec, SimConfig, StudyConfig, run_study, simulate_panel


def _ar_config(m=5, T=12, seed=1, **kwargs):
    model, effects = build_ar_noise(m)
    params = ParameterVector.from_parts(model, effects, [0.3], [0.3, 3.0, 0.1])
    return SimConfig(model, effects, params, n_times=T, seed=seed, **kwargs)


def test_simulation_shapes():
    data, truth = simulate_panel(_ar_config())
    assert data.y.shape == (5, 12, 1)
    assert truth.x.shape == (5, 13, 1)
    assert truth.theta.shape == truth.b.shape == (5, 1)
    np.testing.assert_allclose(truth.theta, 0.3 + truth.b)
    assert data.mask.all()
    dumped = truth.to_dict()
    assert dumped["schema"] == 1 and dumped["params"]["d2"] == 3.0


def test_simulation_is_reproducible():
    a, ta = simulate_panel(_ar_config(seed=8))
    b, tb = simulate_panel(_ar_config(seed=8))
    c, _ = simulate_panel(_ar_config(seed=8), replication=1)
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(ta.x, tb.x)
    assert not np.array_equal(a.y, c.y)


def test_interval_missing_is_one_based_and_half_open():
    config = _ar_config(missing=MissingSpec(kind="interval", tau=3, tau_star=6))
    data, truth = simulate_panel(config)
    expected = np.ones((5, 12), dtype=bool)
    expected[:, 2:5] = False
    np.testing.assert_array_equal(data.mask, expected)
    assert np.isnan(data.y[:, 2:5]).all()
    assert np.isfinite(truth.y_full).all()


def test_bernoulli_missing_rate():
    config = _ar_config(m=50, T=40, missing=MissingSpec(kind="bernoulli", rate=0.2))
    data, _ = simulate_panel(config)
    assert abs(1.0 - data.mask.mean() - 0.2) < 0.05


@pytest.mark.parametrize("spec", [
    MissingSpec(kind="interval", tau=5, tau_star=5),
    MissingSpec(kind="interval", tau=0, tau_star=3),
    MissingSpec(kind="interval", tau=2),
    MissingSpec(kind="bernoulli", rate=1.0),
    MissingSpec(kind="random"),
])
def test_invalid_missing_specs(spec):
    with pytest.raises(ConfigError):
        _ar_config(missing=spec)


def test_zero_variances_give_deterministic_paths(fixed_init):
    model, effects = build_ar_noise(3, fixed_init)
    params = ParameterVector.from_parts(model, effects, [0.5], [0.0, 0.0, 0.0])
    data, truth = simulate_panel(SimConfig(model, effects, params, n_times=6, seed=2))
    np.testing.assert_array_equal(truth.b, 0.0)
    ratios = truth.x[:, 1:, 0] / truth.x[:, :-1, 0]
    np.testing.assert_allclose(ratios, 0.5)
    np.testing.assert_allclose(data.y[..., 0], truth.x[:, 1:, 0])


def test_negative_variance_is_rejected():
    model, effects = build_ar_noise(3)
    params = ParameterVector.from_parts(model, effects, [0.5], [0.3, -1.0, 0.1])
    with pytest.raises(ConfigError):
        SimConfig(model, effects, params, n_times=6)


def test_two_regime_simulation_switches_effects():
    base, base_effects = build_ar_noise(4)
    model, effects = build_two_regime(base, base_effects, t_prime=5, n_times=10)
    params = ParameterVector.from_dict(model, effects, {
        "mu1": 0.2, "mu2": 0.8, "d1": 0.3, "d2": 1.0, "d3": 0.0, "d4": 0.0,
    })
    _, truth = simulate_panel(SimConfig(model, effects, params, n_times=10, seed=3))
    np.testing.assert_allclose(truth.theta, [[0.2, 0.8]] * 4)
    with pytest.raises(ConfigError):
        SimConfig(model, effects, params, n_times=5)


def test_swarm_simulation_layout():
    model, effects = build_swarm(3, 0.5, np.eye(2, 4))
    params = ParameterVector.from_dict(model, effects, {
        "alpha": 0.2, "beta": 0.5, "gamma": 0.1,
        "d_r": 0.1, "d_q": 0.5, "d_sigma": 0.2, "d_b": 0.01,
    })
    data, truth = simulate_panel(SimConfig(model, effects, params, n_times=7, seed=4))
    assert data.y.shape == (3, 7, 2)
    assert truth.x.shape == (3, 8, 4)
    assert data.mask.all()
    assert truth.theta.shape == (3, 3)


# ============================================================================
# ESTUDIO
# ============================================================================

def _study(**kwargs):
    base = dict(
        factory=build_ar_noise,
        truth={"mu": 0.3, "d1": 0.3, "d2": 3.0, "d3": 0.1},
        init={"mu": 0.4, "d1": 0.5, "d2": 2.0, "d3": 0.2},
        grid=((4, 10), (6, 8)),
        replications=2,
        fit=FitConfig(max_iter=2, mcmc=McmcConfig(n_draws=10, burn_in=20, thin=1)),
        seed=5,
    )
    base.update(kwargs)
    return StudyConfig(**base)


def test_micro_study_table():
    result = run_study(_study())
    table = result.table
    assert table.height == 2
    assert {"m", "T", "n_ok", "n_failed", "n_unconverged", "mu_Estimate", "mu_SE",
            "d3_Estimate", "d3_SE"} <= set(table.columns)
    counts = table.select(["n_ok", "n_failed", "n_unconverged"]).to_numpy().sum(axis=1)
    np.testing.assert_array_equal(counts, [2, 2])
    assert result.replications.height == 4


def test_study_counts_failed_replications():
    result = run_study(_study(init={"mu": 0.4, "d1": 0.5, "d2": -2.0, "d3": 0.2}))
    np.testing.assert_array_equal(result.table["n_failed"].to_numpy(), [2, 2])
    assert result.replications["error"].is_not_null().all()


def test_study_threads_do_not_change_results():
    one = run_study(_study())
    two = run_study(_study(threads=2))
    assert one.table.equals(two.table)


def test_study_config_validation():
    with pytest.raises(ConfigError):
        _study(estimator="newton")
    with pytest.raises(ConfigError):
        _study(grid=())
