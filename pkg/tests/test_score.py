import numpy as np
import pytest

from messm.em import FitConfig, conditional_loglik, draw_samples, e_step, fit_em, m_step
from messm.errors import NumericalError
from messm.model import ParameterVector, build_ar_noise
from messm.posterior import EffectsPrior, McmcConfig, ThetaSamples
from messm.score import (
    InformationResult,
    _batch_se,
    fit_quasi_newton,
    loglik_ratio,
    observed_information,
    score,
    score_contributions,
)
from messm.simulate import SimConfig, simulate_panel


def _exact_loglik(problem, d1, d2):
    data, model, effects, truth, record = problem
    delta = np.array([d1, d2, truth.delta[2]])
    return conditional_loglik(data, model, effects, record.theta, delta)


def test_known_theta_score_matches_finite_differences(ar_problem):
    data, model, effects, truth, record = ar_problem
    s = score(data, model, effects, truth, ThetaSamples.from_known(record.theta))
    np.testing.assert_array_equal(s.stderr, 0.0)

    d1, d2 = truth.delta[:2]
    h = 1e-5
    numeric = [
        (_exact_loglik(ar_problem, d1 + h, d2) - _exact_loglik(ar_problem, d1 - h, d2)) / (2 * h),
        (_exact_loglik(ar_problem, d1, d2 + h) - _exact_loglik(ar_problem, d1, d2 - h)) / (2 * h),
    ]
    analytic = s.delta[:2]
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4)


def test_known_theta_score_includes_stationary_initial_state(ar_stationary_problem):
    data, model, effects, truth, record = ar_stationary_problem
    assert model.initial.mode == "stationary"
    s = score(data, model, effects, truth, ThetaSamples.from_known(record.theta))

    def exact(delta):
        return conditional_loglik(data, model, effects, record.theta, delta)

    h = 1e-5
    numeric = []
    for j in range(2):
        step = np.zeros(3)
        step[j] = h
        numeric.append((exact(truth.delta + step) - exact(truth.delta - step)) / (2 * h))
    np.testing.assert_allclose(s.delta[:2], numeric, rtol=1e-4)


def test_monte_carlo_score_has_standard_errors(ar_problem):
    data, model, effects, truth, record = ar_problem
    draws = record.theta[None] + np.random.default_rng(0).normal(scale=0.05, size=(40, 6, 1))
    samples = ThetaSamples(draws=draws, acceptance=np.ones(6), burn_in=0, thin=1, seed=0)
    s = score(data, model, effects, truth, samples)
    assert s.values.shape == (4,)
    assert np.all(s.stderr > 0)
    assert set(s.as_dict()) == {"mu", "d1", "d2", "d3"}


def test_batch_standard_error():
    assert np.all(_batch_se(np.ones((1, 3))) == 0.0)
    contrib = np.arange(40.0).reshape(40, 1)
    se = _batch_se(contrib)
    batch_means = contrib.reshape(10, 4).mean(axis=1)
    assert se[0] == pytest.approx(batch_means.std(ddof=1) / np.sqrt(10))


def test_singular_effects_covariance_raises(ar_problem):
    data, model, effects, truth, record = ar_problem
    with pytest.raises(NumericalError):
        score(data, model, effects, truth.with_parts([0.5], [0.3, 0.4, 0.0]),
              ThetaSamples.from_known(record.theta))


# ============================================================================
# SUSTITUTO DE LOG-VEROSIMILITUD
# ============================================================================

def test_loglik_ratio_is_exact_with_known_theta(ar_problem):
    data, model, effects, truth, record = ar_problem
    samples = ThetaSamples.from_known(record.theta)
    candidate = truth.with_parts([0.45], [0.35, 0.3, 0.06])

    def target(p):
        prior = EffectsPrior(effects.mean_theta(p.fixed_effects), model.effects_cov(p.delta))
        return (conditional_loglik(data, model, effects, record.theta, p.delta)
                + prior.logpdf(record.theta).sum())

    expected = target(candidate) - target(truth)
    assert loglik_ratio(data, model, effects, truth, candidate, samples) == pytest.approx(expected, rel=1e-10)
    assert loglik_ratio(data, model, effects, truth, truth, samples) == pytest.approx(0.0, abs=1e-10)


def test_loglik_ratio_of_infeasible_candidate_is_minus_infinity(ar_problem):
    data, model, effects, truth, record = ar_problem
    candidate = truth.with_parts([0.5], [0.3, 0.4, -0.05])
    assert loglik_ratio(data, model, effects, truth, candidate,
                        ThetaSamples.from_known(record.theta)) == -np.inf


# ============================================================================
# CUASI-NEWTON E INFORMACIÓN
# ============================================================================

def test_quasi_newton_agrees_with_exact_em(ar_problem):
    data, model, effects, truth, record = ar_problem
    init = truth.with_parts([0.5], [0.6, 0.2, 0.05])
    qn = fit_quasi_newton(data, model, effects, init,
                          FitConfig(max_iter=200, gtol=1e-5, known_theta=record.theta))
    em = fit_em(data, model, effects, init,
                FitConfig(max_iter=3000, tol=1e-10, known_theta=record.theta))
    assert qn.converged
    assert qn.method == "score"
    np.testing.assert_allclose(qn.params.delta, em.params.delta, rtol=1e-2)
    assert qn.trace and {"score_norm", "step", "loglik_gain"} <= set(qn.trace[0])


def test_quasi_newton_monte_carlo_run(ar_problem):
    data, model, effects, truth, _ = ar_problem
    config = FitConfig(max_iter=3, tol=1e-9, gtol=1e-9, seed=2,
                       mcmc=McmcConfig(n_draws=20, burn_in=100, thin=2))
    result = fit_quasi_newton(data, model, effects, truth.with_parts([0.4], [0.5, 0.5, 0.08]), config)
    assert result.n_iter <= 3
    assert np.all(result.params.delta > 0)


def test_observed_information_matches_numeric_hessian(ar_problem):
    data, model, effects, truth, record = ar_problem
    config = FitConfig(known_theta=record.theta, fd_step=1e-4)
    info = observed_information(data, model, effects, truth, config)
    assert info.names == ("d1", "d2")

    d1, d2 = truth.delta[:2]
    h = 1e-4
    f = lambda a, b: _exact_loglik(ar_problem, a, b)  # noqa: E731
    hessian = np.empty((2, 2))
    hessian[0, 0] = (f(d1 + h, d2) - 2 * f(d1, d2) + f(d1 - h, d2)) / h ** 2
    hessian[1, 1] = (f(d1, d2 + h) - 2 * f(d1, d2) + f(d1, d2 - h)) / h ** 2
    hessian[0, 1] = hessian[1, 0] = (
        f(d1 + h, d2 + h) - f(d1 + h, d2 - h) - f(d1 - h, d2 + h) + f(d1 - h, d2 - h)
    ) / (4 * h ** 2)
    np.testing.assert_allclose(info.matrix, -hessian, rtol=1e-2)
    if info.positive_definite:
        assert info.to_dict()["se"].keys() == {"d1", "d2"}


def test_information_without_positive_definiteness():
    result = InformationResult(names=("d1",), matrix=np.array([[-1.0]]),
                               eigenvalues=np.array([-1.0]), se=None)
    dumped = result.to_dict()
    assert dumped["se"] is None
    assert dumped["positive_definite"] is False


def test_fixed_effect_and_effects_variance_solve_moment_equations(ar_problem):
    data, model, effects, truth, record = ar_problem
    draws = record.theta[None] + np.random.default_rng(3).normal(scale=0.05, size=(50, 6, 1))
    samples = ThetaSamples(draws=draws, acceptance=np.ones(6), burn_in=0, thin=1, seed=0)
    moments = e_step(data, model, effects, truth, samples)
    new = m_step(moments, truth, model, effects)

    assert new.fixed_effects[0] == pytest.approx(draws.mean())
    centred = draws - new.fixed_effects[0]
    assert new.delta[2] == pytest.approx(np.mean(np.sum(centred ** 2, axis=1)) / 6)

    contrib = score_contributions(moments, model, effects, new).mean(axis=0)
    assert contrib[0] == pytest.approx(0.0, abs=1e-8)
    assert contrib[3] == pytest.approx(0.0, abs=1e-6)


@pytest.mark.slow
def test_em_fixed_point_with_many_draws(fixed_init):
    model, effects = build_ar_noise(30, fixed_init)
    truth = ParameterVector.from_parts(model, effects, [0.3], [0.3, 1.0, 0.1])
    data, _ = simulate_panel(SimConfig(model, effects, truth, n_times=25, seed=13))
    config = FitConfig(max_iter=100, tol=2e-3, seed=5,
                       mcmc=McmcConfig(n_draws=2000, burn_in=500, thin=2))
    fit = fit_em(data, model, effects, truth, config)

    samples = draw_samples(data, model, effects, fit.params, config, 10_000)
    moments = e_step(data, model, effects, fit.params, samples)
    again = m_step(moments, fit.params, model, effects)
    np.testing.assert_allclose(again.values, fit.params.values, rtol=0.05)
