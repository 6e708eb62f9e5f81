"""
MKF-KS - Filtro de Kalman de mezcla con suavizado por núcleo

Cada partícula lleva un θ y el filtro de Kalman exacto condicionado a ese θ.
Por paso t:
    1. m_j = a θ_j + (1 − a) θ̄,  a = sqrt(1 − h²)
    2. índices auxiliares k_j ~ w_j · f(y_t | predicción bajo m_j)
    3. θ_j' ~ N(m_{k_j}, h² V)
    4. Kalman del ancestro bajo θ_j'; peso f(y_t | θ_j') / f(y_t | m_{k_j})
    5. normalización; θ̄ y V se recalculan para el paso siguiente

En t sin observaciones la primera etapa se reduce a w_{t-1}, el Kalman solo
predice y los pesos quedan uniformes tras el remuestreo.

Autor: Sistema
Fecha: 2026-10-17
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, Optional, Tuple

import numpy as np
import polars as pl
from scipy.linalg import block_diag
from scipy.special import logsumexp

from messm import kalman
from messm.errors import ConfigError, ParticleDegeneracyError
from messm.model import (
    EffectsDesign,
    ModelSpec,
    PanelData,
    ParameterVector,
    assemble_block_system,
    individual_systems,
)

logger = logging.getLogger(__name__)

V_FLOOR = 1e-12
Z_95 = 1.959963984540054

TRAJECTORY_COLUMNS = [
    "individual", "t", "component", "y", "filtered_mean", "filtered_sd",
    "pred_mean", "pred_sd", "lower", "upper", "observed",
]


# ============================================================================
# CONFIGURACIÓN Y TIPOS
# ============================================================================

@dataclass(frozen=True)
class ParticleConfig:
    """
    Attributes:
        n_particles: M
        h: parámetro de suavizado del núcleo (0 < h < 1)
        seed: semilla base
        threads: hilos para repartir individuos
    """

    n_particles: int = 2000
    h: float = 0.1
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.n_particles < 2:
            raise ConfigError(f"Se requieren al menos 2 partículas (recibido {self.n_particles})")
        if not 0 < self.h < 1:
            raise ConfigError(f"h debe estar en (0, 1) (recibido {self.h})")


@dataclass(frozen=True, eq=False)
class ParticleSet:
    """
    Partículas en el tiempo t

    Attributes:
        theta: (M, d)
        weights: (M,) normalizados
        x_filt, P_filt: x_{t|t}, P_{t|t} por partícula
        x_pred, P_pred: x_{t+1|t}, P_{t+1|t} bajo el θ de la partícula
        theta_bar, V: media y covarianza ponderadas de θ
        h: suavizado del núcleo
        t: tiempo (0 = antes de la primera observación)
        stream: claves de semilla; el paso t usa default_rng([*stream, t])
        ess: tamaño muestral efectivo 1 / Σ w²
    """

    theta: np.ndarray
    weights: np.ndarray
    x_filt: np.ndarray
    P_filt: np.ndarray
    x_pred: np.ndarray
    P_pred: np.ndarray
    theta_bar: np.ndarray
    V: np.ndarray
    h: float
    t: int
    stream: Tuple[int, ...]
    ess: float

    @property
    def shrink(self) -> float:
        """a = sqrt(1 − h²)"""
        return float(np.sqrt(1.0 - self.h ** 2))

    @property
    def n_particles(self) -> int:
        return self.theta.shape[0]

    def kernel_locations(self) -> np.ndarray:
        """m_j = a θ_j + (1 − a) θ̄"""
        a = self.shrink
        return a * self.theta + (1.0 - a) * self.theta_bar


@dataclass(frozen=True, eq=False)
class StateEstimate:
    """Momentos de mezcla del estado y media ponderada de θ"""

    filt_mean: np.ndarray
    filt_cov: np.ndarray
    pred_mean: np.ndarray
    pred_cov: np.ndarray
    theta_mean: np.ndarray


@dataclass(frozen=True, eq=False)
class FilterReport:
    """Trayectoria por (individuo, t, componente) y reporte de errores cuadráticos"""

    trajectory: pl.DataFrame
    mse: Dict[str, object]
    theta_hat: np.ndarray


# ============================================================================
# CONSTRUCTORES DE SISTEMAS POR PARTÍCULA
# ============================================================================

def _block_diag_batch(blocks: np.ndarray) -> np.ndarray:
    """(M, m, a, b) → (M, m·a, m·b)"""
    M, m, a, b = blocks.shape
    out = np.zeros((M, m * a, m * b))
    for i in range(m):
        out[:, i * a:(i + 1) * a, i * b:(i + 1) * b] = blocks[:, i]
    return out


class IndividualBuilder:
    """Matrices de un individuo para un batch de θ (caso independiente)"""

    def __init__(self, model: ModelSpec, effects: EffectsDesign, params: ParameterVector, individual: int):
        self.model = model
        self.delta = params.delta
        self.dim_theta = model.r
        self.n_state = model.p
        self.n_obs = model.q
        self.state_cov = model.state_noise_cov(self.delta)
        self.obs_cov = model.obs_noise_cov(self.delta)
        self.prior_mean = effects.mean_theta(params.fixed_effects)[individual]
        self.prior_cov = model.effects_cov(self.delta)

    def transition(self, theta: np.ndarray, t: int) -> np.ndarray:
        return self.model.transition(theta, t)

    def observation(self, theta: np.ndarray, t: int) -> np.ndarray:
        return self.model.observation(theta, t)

    def initial(self, theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return self.model.initial_state(theta, self.delta)


class JointBuilder:
    """Matrices del panel apilado para un batch de θ (m·r por partícula)"""

    def __init__(self, model: ModelSpec, effects: EffectsDesign, params: ParameterVector):
        self.model = model
        self.effects = effects
        self.delta = params.delta
        self.m = effects.m
        self.dim_theta = self.m * model.r
        self.n_state = self.m * model.p
        self.n_obs = self.m * model.q
        probe = assemble_block_system(model, effects, np.zeros(self.dim_theta), self.delta, 1)
        self.state_cov = probe.state_cov[0]
        self.obs_cov = probe.obs_cov[0]
        self.prior_mean = effects.mean_theta(params.fixed_effects).reshape(-1)
        self.prior_cov = block_diag(*[model.effects_cov(self.delta)] * self.m)

    def _split(self, theta: np.ndarray) -> np.ndarray:
        return np.asarray(theta, dtype=float).reshape(theta.shape[0], self.m, self.model.r)

    def transition(self, theta: np.ndarray, t: int) -> np.ndarray:
        parts = self._split(theta)
        if self.model.block_transition_fn is not None:
            return np.stack([self.model.block_transition_fn(th, t) for th in parts])
        return _block_diag_batch(self.model.transition(parts, t))

    def observation(self, theta: np.ndarray, t: int) -> np.ndarray:
        return _block_diag_batch(self.model.observation(self._split(theta), t))

    def initial(self, theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        parts = self._split(theta)
        M = parts.shape[0]
        a0, P0 = self.model.initial_state(parts.reshape(M * self.m, -1), self.delta)
        P0 = P0.reshape(M, self.m, self.model.p, self.model.p)
        return a0.reshape(M, self.n_state), _block_diag_batch(P0)


def make_builder(model: ModelSpec, effects: EffectsDesign, params: ParameterVector,
                 individual: Optional[int] = None):
    """Constructor por individuo si el modelo se factoriza, conjunto si no"""
    if model.independent:
        return IndividualBuilder(model, effects, params, 0 if individual is None else individual)
    return JointBuilder(model, effects, params)


# ============================================================================
# OPERACIONES
# ============================================================================

def _weighted_moments(theta: np.ndarray, weights: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Media y covarianza ponderadas (sin corrección de Bessel) con piso 1e-12·I"""
    mean = weights @ theta
    dev = theta - mean
    V = (dev * weights[:, None]).T @ dev
    V = 0.5 * (V + V.T) + V_FLOOR * np.eye(theta.shape[1])
    return mean, V


def _kernel_draw(rng: np.random.Generator, locations: np.ndarray, h: float, V: np.ndarray) -> np.ndarray:
    chol = np.linalg.cholesky(V)
    eps = rng.standard_normal(locations.shape)
    return locations + h * eps @ chol.T


def _predict(builder, theta: np.ndarray, x: np.ndarray, P: np.ndarray, t: int) -> Tuple[np.ndarray, np.ndarray]:
    return kalman.predict(x, P, builder.transition(theta, t), builder.state_cov)


def _finish(particles: ParticleSet, theta: np.ndarray, weights: np.ndarray, x_f: np.ndarray,
            P_f: np.ndarray, builder, t: int) -> ParticleSet:
    x_next, P_next = _predict(builder, theta, x_f, P_f, t + 1)
    bar, V = _weighted_moments(theta, weights)
    ess = float(1.0 / np.sum(weights ** 2))
    logger.debug(f"MKF-KS t={t}: ESS={ess:.1f} de {theta.shape[0]}")
    return replace(
        particles, theta=theta, weights=weights, x_filt=x_f, P_filt=P_f,
        x_pred=x_next, P_pred=P_next, theta_bar=bar, V=V, t=t, ess=ess,
    )


def init_particles(
    model: ModelSpec,
    effects: EffectsDesign,
    params: ParameterVector,
    n_particles: int,
    h: float,
    seed: int,
    individual: Optional[int] = None,
) -> ParticleSet:
    """
    Partículas iniciales θ_j ~ N(Ψa, D) con pesos uniformes

    El filtro de cada partícula parte de (a_0, P_0) y guarda la predicción
    para t = 1.

    Args:
        individual: índice del individuo (modelos que se factorizan);
            None para el panel conjunto
    """
    config = ParticleConfig(n_particles=n_particles, h=h, seed=seed)
    builder = make_builder(model, effects, params, individual)
    stream = (int(seed),) if individual is None else (int(seed), int(individual))
    rng = np.random.default_rng([*stream, 0])

    cov = builder.prior_cov
    evals, evecs = np.linalg.eigh(0.5 * (cov + cov.T))
    root = evecs * np.sqrt(np.clip(evals, 0.0, None))
    theta = builder.prior_mean + rng.standard_normal((config.n_particles, builder.dim_theta)) @ root.T
    weights = np.full(config.n_particles, 1.0 / config.n_particles)
    x0, P0 = builder.initial(theta)

    empty = ParticleSet(
        theta=theta, weights=weights, x_filt=x0, P_filt=P0, x_pred=x0, P_pred=P0,
        theta_bar=builder.prior_mean, V=cov, h=config.h, t=0, stream=stream, ess=float(config.n_particles),
    )
    return _finish(empty, theta, weights, x0, P0, builder, 0)


def step(particles: ParticleSet, y_t: np.ndarray, rows_t: np.ndarray, builder) -> ParticleSet:
    """
    Un paso del filtro de mezcla con núcleo

    Args:
        particles: estado en t − 1
        y_t: (k,) observación (valores en filas no observadas se ignoran)
        rows_t: (k,) filas observadas
        builder: constructor de matrices del sistema

    Returns:
        ParticleSet en t

    Raises:
        ParticleDegeneracyError: todos los pesos de primera etapa nulos
    """
    t = particles.t + 1
    rng = np.random.default_rng([*particles.stream, t])
    M = particles.n_particles
    locations = particles.kernel_locations()
    rows = np.nonzero(np.asarray(rows_t, dtype=bool))[0]
    R = builder.obs_cov[np.ix_(rows, rows)]
    y_obs = np.broadcast_to(np.asarray(y_t, dtype=float)[rows], (M, rows.size))

    if rows.size == 0:
        ancestors = rng.choice(M, size=M, p=particles.weights)
        theta = _kernel_draw(rng, locations[ancestors], particles.h, particles.V)
        x_f, P_f = _predict(builder, theta, particles.x_filt[ancestors], particles.P_filt[ancestors], t)
        weights = np.full(M, 1.0 / M)
        return _finish(particles, theta, weights, x_f, P_f, builder, t)

    # primera etapa: predictiva bajo la ubicación encogida de cada partícula
    x_m, P_m = _predict(builder, locations, particles.x_filt, particles.P_filt, t)
    Z_m = builder.observation(locations, t)[:, rows]
    first = kalman.update(x_m, P_m, y_obs, Z_m, R, t).loglik
    log_z = np.log(particles.weights) + first
    finite = np.isfinite(log_z)
    if not finite.any():
        raise ParticleDegeneracyError(t, float(np.max(np.where(np.isnan(log_z), -np.inf, log_z))))
    log_z = np.where(finite, log_z, -np.inf)
    probs = np.exp(log_z - logsumexp(log_z))
    ancestors = rng.choice(M, size=M, p=probs / probs.sum())

    theta = _kernel_draw(rng, locations[ancestors], particles.h, particles.V)
    x_p, P_p = _predict(builder, theta, particles.x_filt[ancestors], particles.P_filt[ancestors], t)
    Z = builder.observation(theta, t)[:, rows]
    upd = kalman.update(x_p, P_p, y_obs, Z, R, t)

    log_w = upd.loglik - first[ancestors]
    finite = np.isfinite(log_w)
    if not finite.any():
        raise ParticleDegeneracyError(t, float(np.max(np.where(np.isnan(log_w), -np.inf, log_w))), "segunda")
    log_w = np.where(finite, log_w, -np.inf)
    weights = np.exp(log_w - logsumexp(log_w))
    return _finish(particles, theta, weights, upd.x, upd.P, builder, t)


def _mixture(means: np.ndarray, covs: np.ndarray, weights: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Ley de varianza total: Σ w P + Σ w (x − x̄)(x − x̄)ᵀ"""
    mean = weights @ means
    dev = means - mean
    cov = np.einsum("j,jab->ab", weights, covs) + (dev * weights[:, None]).T @ dev
    return mean, 0.5 * (cov + cov.T)


def state_estimate(particles: ParticleSet) -> StateEstimate:
    """Media y varianza de mezcla de x_{t|t} y x_{t+1|t}; media ponderada de θ"""
    w = particles.weights
    filt_mean, filt_cov = _mixture(particles.x_filt, particles.P_filt, w)
    pred_mean, pred_cov = _mixture(particles.x_pred, particles.P_pred, w)
    return StateEstimate(filt_mean, filt_cov, pred_mean, pred_cov, w @ particles.theta)


# ============================================================================
# FILTRO COMPLETO
# ============================================================================

def _signal_moments(particles: ParticleSet, builder, t: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Momentos de mezcla en el espacio de observación

    Returns:
        (media filtrada de Z x, sd filtrada, media predictiva de y_{t+1}, sd predictiva con R)
    """
    w = particles.weights
    Z_now = builder.observation(particles.theta, max(t, 1))
    s_mean, s_cov = _mixture(
        np.einsum("jkn,jn->jk", Z_now, particles.x_filt), Z_now @ particles.P_filt @ np.swapaxes(Z_now, -1, -2), w
    )
    Z_next = builder.observation(particles.theta, t + 1)
    p_mean, p_cov = _mixture(
        np.einsum("jkn,jn->jk", Z_next, particles.x_pred),
        Z_next @ particles.P_pred @ np.swapaxes(Z_next, -1, -2) + builder.obs_cov, w,
    )
    return s_mean, np.sqrt(np.clip(np.diag(s_cov), 0, None)), p_mean, np.sqrt(np.clip(np.diag(p_cov), 0, None))


def _run_one(y: np.ndarray, rows: np.ndarray, builder, particles: ParticleSet) -> Dict[str, np.ndarray]:
    """Pasa el filtro sobre y (T, k); devuelve arreglos (T, k) y θ̂ final"""
    T, k = y.shape
    out = {key: np.zeros((T, k)) for key in ("filtered_mean", "filtered_sd", "pred_mean", "pred_sd")}
    theta_path = np.zeros((T, builder.dim_theta))
    _, _, pred_mean, pred_sd = _signal_moments(particles, builder, 0)
    for t in range(1, T + 1):
        out["pred_mean"][t - 1], out["pred_sd"][t - 1] = pred_mean, pred_sd
        particles = step(particles, y[t - 1], rows[t - 1], builder)
        s_mean, s_sd, pred_mean, pred_sd = _signal_moments(particles, builder, t)
        out["filtered_mean"][t - 1], out["filtered_sd"][t - 1] = s_mean, s_sd
        theta_path[t - 1] = particles.weights @ particles.theta
    out["theta_path"] = theta_path
    return out


def kalman_predictions(data: PanelData, model: ModelSpec, effects: EffectsDesign,
                       params: ParameterVector, theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Predicciones a un paso de y con θ fijo (Kalman exacto)

    Returns:
        (media (m, T, q), sd (m, T, q))
    """
    theta = np.asarray(theta, dtype=float).reshape(data.m, model.r)
    if model.independent:
        system = individual_systems(model, theta, params.delta, data.n_times)
        filt = kalman.kalman_filter(system, data.y, data.observed_rows())
        Z = system.observation
        mean = np.einsum("btkn,btn->btk", Z, filt.x_pred)
        var = Z @ filt.P_pred @ np.swapaxes(Z, -1, -2) + system.obs_cov[:, None]
        sd = np.sqrt(np.diagonal(var, axis1=-2, axis2=-1))
        return mean, sd
    y, rows = data.stacked()
    system = assemble_block_system(model, effects, theta, params.delta, data.n_times)
    filt = kalman.kalman_filter(system, y, rows)
    Z = system.observation[0]
    mean = np.einsum("tkn,tn->tk", Z, filt.x_pred[0])
    var = Z @ filt.P_pred[0] @ np.swapaxes(Z, -1, -2) + system.obs_cov[0]
    sd = np.sqrt(np.diagonal(var, axis1=-2, axis2=-1))
    m, T, q = data.y.shape
    return mean.reshape(T, m, q).transpose(1, 0, 2), sd.reshape(T, m, q).transpose(1, 0, 2)


def _mse_per_individual(data: PanelData, pred_mean: np.ndarray) -> np.ndarray:
    err = np.where(data.observed_rows(), data.y - pred_mean, np.nan) ** 2
    return np.nanmean(err.reshape(data.m, -1), axis=1)


def _summary(values: np.ndarray) -> Dict[str, object]:
    return {
        "per_individual": [float(v) for v in values],
        "median": float(np.nanmedian(values)),
        "mean": float(np.nanmean(values)),
    }


def run_filter(
    data: PanelData,
    model: ModelSpec,
    effects: EffectsDesign,
    params: ParameterVector,
    config: ParticleConfig,
    oracle_theta: Optional[np.ndarray] = None,
    plugin_theta: Optional[np.ndarray] = None,
) -> FilterReport:
    """
    Corre MKF-KS sobre todo el panel

    Emite estimaciones filtradas y predicciones a un paso por (i, t,
    componente), intervalos 95 % (media ± 1.96·sd) y el MSE de predicción por
    individuo. Con θ oráculo (o θ plug-in) agrega el MSE de un Kalman exacto.

    Args:
        params: Δ̂ (verdadero o estimado)
        config: M, h, semilla, hilos
        oracle_theta: (m, r) θ verdadero
        plugin_theta: (m, r) θ estimado (p.ej. media posterior)

    Returns:
        FilterReport
    """
    params.check_feasible()
    m, T, q = data.y.shape
    rows_all = data.observed_rows()

    if model.independent:
        def run(i: int) -> Dict[str, np.ndarray]:
            builder = IndividualBuilder(model, effects, params, i)
            particles = init_particles(model, effects, params, config.n_particles, config.h, config.seed, i)
            return _run_one(np.nan_to_num(data.y[i]), rows_all[i], builder, particles)

        if config.threads > 1 and m > 1:
            with ThreadPoolExecutor(max_workers=config.threads) as pool:
                results = list(pool.map(run, range(m)))
        else:
            results = [run(i) for i in range(m)]
        arrays = {key: np.stack([r[key] for r in results]) for key in results[0] if key != "theta_path"}
        theta_hat = np.stack([r["theta_path"][-1] if T else np.zeros(model.r) for r in results])
    else:
        y, rows = data.stacked()
        builder = JointBuilder(model, effects, params)
        particles = init_particles(model, effects, params, config.n_particles, config.h, config.seed)
        res = _run_one(np.nan_to_num(y[0]), rows[0], builder, particles)
        arrays = {key: res[key].reshape(T, m, q).transpose(1, 0, 2)
                  for key in ("filtered_mean", "filtered_sd", "pred_mean", "pred_sd")}
        theta_hat = res["theta_path"][-1].reshape(m, model.r) if T else np.zeros((m, model.r))

    lower = arrays["pred_mean"] - Z_95 * arrays["pred_sd"]
    upper = arrays["pred_mean"] + Z_95 * arrays["pred_sd"]
    ii, tt, cc = np.meshgrid(np.arange(m), np.arange(1, T + 1), np.arange(q), indexing="ij")
    trajectory = pl.DataFrame({
        "individual": ii.ravel(),
        "t": tt.ravel(),
        "component": cc.ravel(),
        "y": data.y.ravel(),
        "filtered_mean": arrays["filtered_mean"].ravel(),
        "filtered_sd": arrays["filtered_sd"].ravel(),
        "pred_mean": arrays["pred_mean"].ravel(),
        "pred_sd": arrays["pred_sd"].ravel(),
        "lower": lower.ravel(),
        "upper": upper.ravel(),
        "observed": rows_all.ravel(),
    }).select(TRAJECTORY_COLUMNS)

    observed = rows_all
    inside = (data.y >= lower) & (data.y <= upper)
    mse = {
        "schema": 1,
        "n_particles": config.n_particles,
        "h": config.h,
        "seed": config.seed,
        "mkfks": _summary(_mse_per_individual(data, arrays["pred_mean"])),
        "coverage": float(inside[observed].mean()) if observed.any() else float("nan"),
    }
    for key, theta in (("oracle_kf", oracle_theta), ("plugin_kf", plugin_theta)):
        if theta is None:
            continue
        mean, _ = kalman_predictions(data, model, effects, params, theta)
        mse[key] = _summary(_mse_per_individual(data, mean))
        mse[f"ratio_median_{key}"] = mse["mkfks"]["median"] / mse[key]["median"]

    logger.info(f"MKF-KS: MSE mediano={mse['mkfks']['median']:.4g}, cobertura 95%={mse['coverage']:.3f}")
    return FilterReport(trajectory=trajectory, mse=mse, theta_hat=theta_hat)
