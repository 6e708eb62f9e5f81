import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from messm.errors import FilterError
from messm.kalman import BlockSystem, disturbance_smoother, kalman_filter, loglik
from tests.oracle import dense_filter, dense_loglik, dense_smoother, random_system

TOL = 1e-8


def _block(sys) -> BlockSystem:
    return BlockSystem(
        transition=sys.transition[None],
        observation=sys.observation[None],
        state_cov=sys.state_cov[None],
        obs_cov=sys.obs_cov[None],
        init_mean=sys.init_mean[None],
        init_cov=sys.init_cov[None],
    )


def _random_case(seed, n, k, T):
    rng = np.random.default_rng(seed)
    sys = random_system(rng, n, k, T)
    y = rng.normal(size=(T, k)) * 2.0
    observed = rng.uniform(size=(T, k)) > 0.25
    return sys, np.where(observed, y, np.nan), observed


# ============================================================================
# ORÁCULO DENSO
# ============================================================================

@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(1, 2), k=st.integers(1, 2), T=st.integers(1, 4))
def test_filter_matches_dense_oracle(seed, n, k, T):
    sys, y, observed = _random_case(seed, n, k, T)
    filt = kalman_filter(_block(sys), y[None], observed[None])

    assert abs(filt.loglik[0] - dense_loglik(sys, y, observed)) < TOL
    for t, (xp, Pp, xf, Pf) in enumerate(dense_filter(sys, y, observed)):
        np.testing.assert_allclose(filt.x_pred[0, t], xp, atol=TOL)
        np.testing.assert_allclose(filt.P_pred[0, t], Pp, atol=TOL)
        np.testing.assert_allclose(filt.x_filt[0, t], xf, atol=TOL)
        np.testing.assert_allclose(filt.P_filt[0, t], Pf, atol=TOL)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(1, 2), k=st.integers(1, 2), T=st.integers(1, 4))
def test_smoother_matches_dense_oracle(seed, n, k, T):
    sys, y, observed = _random_case(seed, n, k, T)
    system = _block(sys)
    sm = disturbance_smoother(system, kalman_filter(system, y[None], observed[None]))
    oracle = dense_smoother(sys, y, observed)

    np.testing.assert_allclose(sm.x0_hat[0], oracle["x0"][0], atol=TOL)
    np.testing.assert_allclose(sm.x0_var[0], oracle["x0"][1], atol=TOL)
    for t in range(T):
        np.testing.assert_allclose(sm.x_smooth[0, t], oracle["x"][t][0], atol=TOL)
        np.testing.assert_allclose(sm.P_smooth[0, t], oracle["x"][t][1], atol=TOL)
        np.testing.assert_allclose(sm.v_hat[0, t], oracle["v"][t][0], atol=TOL)
        np.testing.assert_allclose(sm.v_var[0, t], oracle["v"][t][1], atol=TOL)
        np.testing.assert_allclose(sm.w_hat[0, t], oracle["w"][t][0], atol=TOL)
        np.testing.assert_allclose(sm.w_var[0, t], oracle["w"][t][1], atol=TOL)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(1, 2), k=st.integers(1, 2), T=st.integers(1, 4))
def test_init_moment_gives_initial_state_scatter(seed, n, k, T):
    sys, y, observed = _random_case(seed, n, k, T)
    system = _block(sys)
    sm = disturbance_smoother(system, kalman_filter(system, y[None], observed[None]))
    P0 = system.init_cov[0]
    U = sm.init_moment(system.transition)[0]
    dev = sm.x0_hat[0] - system.init_mean[0]
    np.testing.assert_allclose(P0 + P0 @ U @ P0, sm.x0_var[0] + np.outer(dev, dev), atol=1e-7)


# ============================================================================
# RUTA ESCALAR Y FALTANTES
# ============================================================================

def _ar_batch(rng, B=40, T=12):
    phi = rng.uniform(-0.9, 0.9, size=B)
    system = BlockSystem(
        transition=np.broadcast_to(phi[:, None, None, None], (B, T, 1, 1)),
        observation=np.ones((B, T, 1, 1)),
        state_cov=np.full((B, 1, 1), 0.7),
        obs_cov=np.full((B, 1, 1), 0.2),
        init_mean=np.zeros((B, 1)),
        init_cov=np.full((B, 1, 1), 2.0),
    )
    y = rng.normal(size=(B, T, 1))
    return system, y


def test_scalar_fast_path_matches_full_filter(rng):
    system, y = _ar_batch(rng)
    mask = rng.uniform(size=y.shape[:2]) > 0.3
    y = np.where(mask[..., None], y, np.nan)
    fast = loglik(system, y, mask)
    full = kalman_filter(system, y, mask).loglik
    np.testing.assert_allclose(fast, full, rtol=1e-12, atol=1e-12)


def _member(system, i) -> BlockSystem:
    return BlockSystem(
        transition=system.transition[i:i + 1],
        observation=system.observation[i:i + 1],
        state_cov=system.state_cov[i:i + 1],
        obs_cov=system.obs_cov[i:i + 1],
        init_mean=system.init_mean[i:i + 1],
        init_cov=system.init_cov[i:i + 1],
    )


def test_scalar_batch_loglik_with_default_mask_matches_members(rng):
    system, y = _ar_batch(rng, B=6, T=10)
    batch = loglik(system, y)
    assert batch.shape == (6,)
    one_by_one = [loglik(_member(system, i), y[i])[0] for i in range(6)]
    np.testing.assert_allclose(batch, one_by_one, rtol=1e-12)
    full_mask = np.ones(y.shape, dtype=bool)
    np.testing.assert_allclose(loglik(system, y, full_mask), batch, rtol=1e-12)


def test_cell_mask_equals_component_mask(rng):
    system, y = _ar_batch(rng, B=5, T=9)
    mask = rng.uniform(size=(5, 9)) > 0.3
    y = np.where(mask[..., None], y, np.nan)
    by_cell = kalman_filter(system, y, mask)
    by_component = kalman_filter(system, y, mask[..., None])
    np.testing.assert_array_equal(by_cell.loglik, by_component.loglik)
    np.testing.assert_array_equal(loglik(system, y, mask), loglik(system, y, mask[..., None]))


def test_missing_time_is_pure_prediction(rng):
    system, y = _ar_batch(rng, B=3, T=6)
    mask = np.ones((3, 6), dtype=bool)
    mask[:, 2] = False
    filt = kalman_filter(system, y, mask)
    np.testing.assert_array_equal(filt.x_filt[:, 2], filt.x_pred[:, 2])
    np.testing.assert_array_equal(filt.P_filt[:, 2], filt.P_pred[:, 2])
    assert np.all(filt.loglik_terms[:, 2] == 0.0)
    assert np.all(filt.K[:, 2] == 0.0)

    sm = disturbance_smoother(system, filt)
    assert np.all(sm.e[:, 2] == 0.0)
    assert np.all(sm.D[:, 2] == 0.0)


def test_all_missing_gives_zero_loglik(rng):
    system, y = _ar_batch(rng, B=2, T=5)
    mask = np.zeros((2, 5), dtype=bool)
    np.testing.assert_array_equal(loglik(system, np.full_like(y, np.nan), mask), 0.0)


def test_missing_member_does_not_change_others(rng):
    system, y = _ar_batch(rng, B=4, T=8)
    mask = np.ones((4, 8), dtype=bool)
    base = kalman_filter(system, y, mask)
    mask[1] = False
    masked = kalman_filter(system, y, mask)
    keep = [0, 2, 3]
    np.testing.assert_allclose(masked.x_filt[keep], base.x_filt[keep], rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(masked.loglik[keep], base.loglik[keep], rtol=1e-12, atol=1e-14)
    assert masked.loglik[1] == 0.0


def test_singular_innovation_raises_filter_error():
    system = BlockSystem.single(
        transition=[[0.5]], observation=[[1.0]], state_cov=[[0.0]], obs_cov=[[0.0]],
        init_mean=[0.0], init_cov=[[0.0]], n_times=3,
    )
    with pytest.raises(FilterError) as info:
        kalman_filter(system, np.zeros((1, 3, 1)))
    assert info.value.t == 1


def test_ill_conditioned_multivariate_innovation_raises():
    system = BlockSystem.single(
        transition=np.eye(2), observation=[[1.0, 0.0], [1.0, 1e-9]], state_cov=np.zeros((2, 2)),
        obs_cov=np.zeros((2, 2)), init_mean=np.zeros(2), init_cov=np.eye(2), n_times=2,
    )
    with pytest.raises(FilterError):
        kalman_filter(system, np.zeros((1, 2, 2)))


def test_shape_mismatch_is_rejected(rng):
    system, y = _ar_batch(rng, B=2, T=5)
    with pytest.raises(ValueError):
        kalman_filter(system, y[:, :4])


# ============================================================================
# IDENTIDADES DEL SUAVIZADOR
# ============================================================================

def test_smoother_identities_hold_in_simulation():
    """E[e eᵀ] = D_t y E[r rᵀ] = N_t bajo los parámetros verdaderos"""
    rng = np.random.default_rng(3)
    B, T = 10_000, 6
    phi, q, h, p0 = 0.6, 0.8, 0.3, 1.5
    system = BlockSystem(
        transition=np.full((B, T, 1, 1), phi),
        observation=np.ones((B, T, 1, 1)),
        state_cov=np.full((B, 1, 1), q),
        obs_cov=np.full((B, 1, 1), h),
        init_mean=np.zeros((B, 1)),
        init_cov=np.full((B, 1, 1), p0),
    )
    x = rng.normal(scale=np.sqrt(p0), size=B)
    y = np.empty((B, T, 1))
    for t in range(T):
        x = phi * x + rng.normal(scale=np.sqrt(q), size=B)
        y[:, t, 0] = x + rng.normal(scale=np.sqrt(h), size=B)

    sm = disturbance_smoother(system, kalman_filter(system, y))
    e2 = sm.e[..., 0] ** 2
    r2 = sm.r[:, :T, 0] ** 2
    for values, expected in ((e2, sm.D[0, :, 0, 0]), (r2, sm.N[0, :T, 0, 0])):
        se = values.std(axis=0, ddof=1) / np.sqrt(B)
        assert np.all(np.abs(values.mean(axis=0) - expected) < 4 * se)
