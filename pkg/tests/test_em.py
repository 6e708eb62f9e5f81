import numpy as np
import pytest

from messm.em import (
    FitConfig,
    conditional_loglik,
    draw_samples,
    e_step,
    fit_em,
    fixed_names,
    m_step,
    q_function,
    relative_change,
    smoothed_criterion,
)
from messm.model import InitialState, ParameterVector, build_ar_noise
from messm.posterior import McmcConfig, ThetaSamples
from messm.simulate import SimConfig, StudyConfig, run_study, simulate_panel

SMALL_MCMC = McmcConfig(n_draws=20, burn_in=100, thin=2)


def _known(record):
    return ThetaSamples.from_known(record.theta)


# ============================================================================
# PASO E
# ============================================================================

def test_repeated_draws_match_a_single_draw(ar_problem):
    data, model, effects, truth, record = ar_problem
    single = e_step(data, model, effects, truth, _known(record))
    repeated = ThetaSamples(draws=np.repeat(record.theta[None], 3, axis=0), acceptance=np.ones(6),
                            burn_in=0, thin=1, seed=0)
    triple = e_step(data, model, effects, truth, repeated)
    np.testing.assert_allclose(triple.obs_moment, single.obs_moment, rtol=1e-12)
    np.testing.assert_allclose(triple.state_moment, single.state_moment, rtol=1e-12)
    np.testing.assert_allclose(triple.posterior.b_cov, 0.0, atol=1e-15)


def test_e_step_threads_give_same_moments(ar_problem):
    data, model, effects, truth, record = ar_problem
    draws = record.theta[None] + np.linspace(-0.1, 0.1, 8)[:, None, None]
    samples = ThetaSamples(draws=draws, acceptance=np.ones(6), burn_in=0, thin=1, seed=0)
    one = e_step(data, model, effects, truth, samples, threads=1)
    four = e_step(data, model, effects, truth, samples, threads=4)
    np.testing.assert_allclose(four.obs_moment, one.obs_moment, rtol=1e-12)


# ============================================================================
# PASO M
# ============================================================================

def test_m_step_maximizes_intermediate_quantity(ar_problem):
    data, model, effects, truth, _ = ar_problem
    star = truth.with_parts([0.4], [0.5, 0.5, 0.1])
    samples = draw_samples(data, model, effects, star, FitConfig(mcmc=SMALL_MCMC, seed=3), 1)
    moments = e_step(data, model, effects, star, samples)
    new = m_step(moments, star, model, effects)
    best = q_function(moments, new, star, model, effects)
    for i in range(new.values.size):
        for factor in (0.98, 1.02):
            values = np.array(new.values)
            values[i] *= factor
            assert q_function(moments, new.with_values(values), star, model, effects) <= best + 1e-9


def test_m_step_keeps_fixed_parameters(ar_problem):
    data, model, effects, truth, record = ar_problem
    star = truth.with_parts([0.4], [0.5, 0.5, 0.1])
    moments = e_step(data, model, effects, star, _known(record))
    new = m_step(moments, star, model, effects, fixed=("mu", "d2"))
    assert new.values[new.index("mu")] == 0.4
    assert new.values[new.index("d2")] == 0.5
    assert new.values[new.index("d1")] != 0.5


def test_fixed_names_with_known_theta(ar_problem):
    _, model, effects, _, record = ar_problem
    config = FitConfig(known_theta=record.theta, fixed=("d1",))
    assert fixed_names(config, model, effects) == ("d1", "d3", "mu")


# ============================================================================
# AJUSTE
# ============================================================================

def test_exact_em_is_monotone(ar_problem):
    data, model, effects, truth, record = ar_problem
    init = truth.with_parts([0.5], [1.0, 0.05, 0.05])
    config = FitConfig(max_iter=50, tol=1e-12, known_theta=record.theta)
    result = fit_em(data, model, effects, init, config)
    loglik = np.array([fila["loglik"] for fila in result.trace])
    assert np.all(np.diff(loglik) >= -1e-10)
    assert result.params.values[result.params.index("d3")] == 0.05


def test_exact_em_is_monotone_with_stationary_initial_state(ar_stationary_problem):
    data, model, effects, truth, record = ar_stationary_problem
    init = truth.with_parts([0.3], [1.0, 1.0, 0.1])
    config = FitConfig(max_iter=40, tol=1e-12, known_theta=record.theta)
    result = fit_em(data, model, effects, init, config)
    loglik = np.array([fila["loglik"] for fila in result.trace])
    assert np.all(np.diff(loglik) >= -1e-10)


def test_m_step_maximizes_q_with_stationary_initial_state(ar_stationary_problem):
    data, model, effects, truth, record = ar_stationary_problem
    star = truth.with_parts([0.3], [0.5, 2.0, 0.1])
    moments = e_step(data, model, effects, star, _known(record))
    assert moments.init_terms is not None
    new = m_step(moments, star, model, effects, fixed=("mu", "d3"))
    best = q_function(moments, new, star, model, effects)
    for name in ("d1", "d2"):
        for factor in (0.98, 1.02):
            values = np.array(new.values)
            values[new.index(name)] *= factor
            assert q_function(moments, new.with_values(values), star, model, effects) <= best + 1e-9


def test_exact_em_recovers_variances(fixed_init):
    model, effects = build_ar_noise(40, fixed_init)
    truth = ParameterVector.from_parts(model, effects, [0.5], [0.3, 0.4, 0.05])
    data, record = simulate_panel(SimConfig(model, effects, truth, n_times=50, seed=21))
    init = truth.with_parts([0.5], [1.0, 1.0, 0.05])
    config = FitConfig(max_iter=500, tol=1e-5, known_theta=record.theta)
    result = fit_em(data, model, effects, init, config)
    np.testing.assert_allclose(result.params.delta[:2], [0.3, 0.4], rtol=0.3)


def test_monte_carlo_em_runs_and_reports(ar_problem):
    data, model, effects, truth, _ = ar_problem
    config = FitConfig(max_iter=4, tol=1e-9, mcmc=SMALL_MCMC, seed=1, fixed=("d3",))
    result = fit_em(data, model, effects, truth.with_parts([0.3], [0.5, 0.5, 0.05]), config)
    assert not result.converged
    assert result.n_iter == 4
    assert len(result.trace) == 4
    assert "loglik" not in result.trace[0]
    assert set(result.trace[0]) >= {"iteration", "mu", "d1", "d2", "d3", "criterion", "acceptance"}
    assert result.params.values[result.params.index("d3")] == pytest.approx(0.05, rel=1e-12)
    dumped = result.to_dict()
    assert dumped["schema"] == 1 and dumped["method"] == "em"


def test_fit_is_reproducible(ar_problem):
    data, model, effects, truth, _ = ar_problem
    config = FitConfig(max_iter=2, mcmc=SMALL_MCMC, seed=4)
    first = fit_em(data, model, effects, truth, config)
    second = fit_em(data, model, effects, truth, config)
    np.testing.assert_array_equal(first.params.values, second.params.values)


def test_draw_samples_depend_on_iteration(ar_problem):
    data, model, effects, truth, record = ar_problem
    config = FitConfig(mcmc=SMALL_MCMC, seed=9)
    a = draw_samples(data, model, effects, truth, config, 1)
    b = draw_samples(data, model, effects, truth, config, 1)
    c = draw_samples(data, model, effects, truth, config, 2)
    np.testing.assert_array_equal(a.draws, b.draws)
    assert not np.array_equal(a.draws, c.draws)
    known = draw_samples(data, model, effects, truth, FitConfig(known_theta=record.theta), 1)
    assert known.known


# ============================================================================
# CRITERIO Y FALTANTES
# ============================================================================

def test_smoothed_criterion():
    history = [np.array([1.0]), np.array([2.0])]
    assert smoothed_criterion(history, 3) == pytest.approx(1.0)
    history = [np.array([v]) for v in (1.0, 2.0, 2.0, 2.0, 2.0)]
    assert smoothed_criterion(history, 3) == pytest.approx(0.0)
    assert relative_change(np.array([0.0]), np.array([0.0])) == 0.0


def test_unobserved_individual_adds_nothing_to_loglik(ar_problem):
    data, model, effects, truth, record = ar_problem
    mask = np.ones(data.mask.shape, dtype=bool)
    mask[2] = False
    masked = data.with_mask(mask)
    keep = [0, 1, 3, 4, 5]
    full = conditional_loglik(masked, model, effects, record.theta, truth.delta)
    sub = conditional_loglik(masked.subset(keep), model, effects.subset(keep),
                             record.theta[keep], truth.delta)
    assert full == pytest.approx(sub, rel=1e-12)


def test_missing_interval_fit_runs(ar_problem):
    data, model, effects, truth, record = ar_problem
    mask = np.ones(data.mask.shape, dtype=bool)
    mask[:, 10:15] = False
    config = FitConfig(max_iter=20, tol=1e-8, known_theta=record.theta)
    result = fit_em(data.with_mask(mask), model, effects, truth, config)
    assert np.all(result.params.delta > 0)


@pytest.mark.slow
def test_desk_study_recovers_stationary_ar_parameters():
    def factory(m):
        return build_ar_noise(m)

    truth = {"mu": 0.3, "d1": 0.3, "d2": 3.0, "d3": 0.1}
    config = StudyConfig(
        factory=factory, truth=truth, init={"mu": 0.5, "d1": 0.5, "d2": 2.0, "d3": 0.2},
        grid=((50, 30),), replications=20,
        fit=FitConfig(max_iter=100, tol=1e-2, mcmc=McmcConfig(n_draws=200, burn_in=500, thin=5)),
        seed=2026, threads=4,
    )
    fila = run_study(config).table.row(0, named=True)
    assert fila["n_failed"] == 0
    assert fila["n_ok"] >= 15
    assert abs(fila["mu_Estimate"] - 0.3) < 0.08
    assert fila["d3_Estimate"] == pytest.approx(0.1, rel=0.5)
    # con φ cerca de 0 la verosimilitud es casi plana a lo largo de d1 + d2 constante
    total = fila["d1_Estimate"] + fila["d2_Estimate"]
    assert total == pytest.approx(3.3, rel=0.15)
    assert 0 < fila["d1_Estimate"] < 1.5
