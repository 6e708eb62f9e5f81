import numpy as np
import pytest
from scipy import stats

from messm.errors import ConfigError, SamplerError
from messm.model import PanelData, ParameterVector, build_ar_noise, build_swarm
from messm.posterior import (
    EffectsPrior,
    McmcConfig,
    ThetaSamples,
    posterior_moments,
    sample_posterior,
)

FAST = McmcConfig(n_draws=20, burn_in=100, thin=2, seed=5)


def test_moments_arithmetic():
    _, effects = build_ar_noise(1)
    samples = ThetaSamples(draws=np.array([[[0.2]], [[0.4]]]), acceptance=np.ones(1),
                           burn_in=0, thin=1, seed=0)
    moments = posterior_moments(samples, effects, np.array([0.25]))
    assert moments.theta_mean[0, 0] == pytest.approx(0.3)
    assert moments.b_mean[0, 0] == pytest.approx(0.05)
    assert moments.b_cov[0, 0, 0] == pytest.approx(0.01)


def test_constant_draws_have_zero_variance():
    _, effects = build_ar_noise(3)
    samples = ThetaSamples.from_known(np.array([0.1, 0.2, 0.3]))
    moments = posterior_moments(samples, effects, np.array([0.2]))
    np.testing.assert_array_equal(moments.b_cov, 0.0)
    np.testing.assert_allclose(moments.b_mean[:, 0], [-0.1, 0.0, 0.1])
    assert samples.known and samples.n_draws == 1


def test_mcmc_config_validation():
    with pytest.raises(ConfigError):
        McmcConfig(n_draws=0)
    with pytest.raises(ConfigError):
        McmcConfig(thin=0)


def test_effects_prior_requires_positive_definite_d():
    with pytest.raises(ConfigError):
        EffectsPrior(np.zeros((2, 1)), np.array([[0.0]]))


def test_sampler_is_reproducible(ar_problem):
    data, model, effects, truth, _ = ar_problem
    first = sample_posterior(data, model, effects, truth, FAST)
    second = sample_posterior(data, model, effects, truth, FAST)
    np.testing.assert_array_equal(first.draws, second.draws)
    assert first.draws.shape == (20, 6, 1)
    assert 0.0 < first.acceptance_rate <= 1.0


def test_sampler_threads_do_not_change_draws(ar_problem):
    data, model, effects, truth, _ = ar_problem
    single = sample_posterior(data, model, effects, truth, FAST)
    pooled = sample_posterior(data, model, effects, truth, McmcConfig(
        n_draws=20, burn_in=100, thin=2, seed=5, threads=3))
    np.testing.assert_allclose(pooled.draws, single.draws, rtol=1e-12)


def test_sampler_changes_with_seed(ar_problem):
    data, model, effects, truth, _ = ar_problem
    other = McmcConfig(n_draws=20, burn_in=100, thin=2, seed=6)
    assert not np.array_equal(
        sample_posterior(data, model, effects, truth, FAST).draws,
        sample_posterior(data, model, effects, truth, other).draws,
    )


def test_degenerate_effects_pin_draws_to_mean(ar_problem):
    data, model, effects, truth, _ = ar_problem
    tight = truth.with_parts([0.5], [0.3, 0.4, 1e-12])
    samples = sample_posterior(data, model, effects, tight, FAST)
    np.testing.assert_allclose(samples.draws, 0.5, atol=1e-4)


def test_without_data_the_posterior_is_the_prior():
    m = 2000
    model, effects = build_ar_noise(m)
    params = ParameterVector.from_parts(model, effects, [0.3], [0.3, 1.0, 0.04])
    data = PanelData(y=np.full((m, 5, 1), np.nan), mask=np.zeros((m, 5), dtype=bool))
    config = McmcConfig(n_draws=10, burn_in=400, thin=5, seed=1)
    last = sample_posterior(data, model, effects, params, config).draws[-1, :, 0]
    assert stats.kstest(last, stats.norm(0.3, 0.2).cdf).pvalue > 1e-3


def test_zero_acceptance_raises_sampler_error(ar_problem):
    data, model, effects, truth, _ = ar_problem
    config = McmcConfig(n_draws=5, burn_in=0, thin=1, seed=0, init_scale=1e8)
    with pytest.raises(SamplerError):
        sample_posterior(data, model, effects, truth, config)


def test_sampler_rejects_infeasible_parameters(ar_problem):
    data, model, effects, truth, _ = ar_problem
    with pytest.raises(ConfigError):
        sample_posterior(data, model, effects, truth.with_parts([0.5], [0.3, -0.4, 0.05]), FAST)


def test_joint_sampler_for_swarm():
    model, effects = build_swarm(2, 0.5, np.eye(2, 4))
    params = ParameterVector.from_dict(model, effects, {
        "alpha": 0.2, "beta": 0.5, "gamma": 0.1,
        "d_r": 0.1, "d_q": 0.5, "d_sigma": 0.2, "d_b": 0.01,
    })
    rng = np.random.default_rng(0)
    data = PanelData.from_arrays(rng.normal(size=(2, 4, 2)))
    samples = sample_posterior(data, model, effects, params, McmcConfig(n_draws=50, burn_in=200, thin=1))
    assert samples.draws.shape == (50, 2, 3)
    assert samples.acceptance.shape == (1,)
    assert 0 < samples.acceptance[0] < 1
