"""
ESTIMATE EM - EM Monte Carlo con suavizado de perturbaciones

Paso E:
    Para cada draw θ⁽ʲ⁾ se corre filtro + suavizador y se acumulan
        Σ_t (e_t e_tᵀ − D_t)           (lado observación, por individuo)
        Σ_t (r_{t-1} r_{t-1}ᵀ − N_{t-1})  (lado estado)
    junto con los momentos de θ_i.

Paso M:
    Efectos fijos por mínimos cuadrados generalizados sobre Ẽθ_i.
    Varianzas con forma cerrada cuando cada covarianza es Σ δ_j G_j con
    soportes disjuntos:
        δ̂_j = Σ tr(G_j⁻¹ S) / Σ n·dim(G_j)
    con S_R = n R* + R* Ẽ(ee'−D) R*, S_Q = n Q* + Q* Ẽ(rr'−N) Q*,
    S_D = Σ_i (θ̄_i − Ψ_i â)(θ̄_i − Ψ_i â)ᵀ + Var(θ_i|y).
    Con P_0 estacionaria (lineal en δ) x_0 aporta tr(∂P_0⁻¹ S_0) y p por individuo.
    En otro caso se maximiza la cantidad intermedia numéricamente.

Autor: Sistema
Fecha: 2026-10-17
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from messm import kalman
from messm.errors import FilterError
from messm.model import (
    CovTerms,
    EffectsDesign,
    ModelSpec,
    PanelData,
    ParameterVector,
    assemble_block_system,
    individual_systems,
)
from messm.posterior import (
    McmcConfig,
    PosteriorMoments,
    ThetaSamples,
    posterior_moments,
    sample_posterior,
)
from messm.seeds import derive_seed

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-10
MAX_BATCH = 20000


# ============================================================================
# TIPOS
# ============================================================================

@dataclass(frozen=True, eq=False)
class FitConfig:
    """
    Configuración de los ajustes (EM y cuasi-Newton comparten esquema)

    Attributes:
        max_iter: iteraciones máximas
        tol: tolerancia de cambio relativo (traza suavizada)
        window: ancho de la media móvil de la traza
        mcmc: configuración del muestreador (la semilla se deriva por iteración)
        seed: semilla base
        fixed: nombres de parámetros que no se estiman
        known_theta: (m, r) θ conocido; sin MCMC, efectos fijos y D fijos
        threads: hilos para paso E e información observada
        warm_start: cada cadena parte del último draw de la iteración anterior
        gtol: norma del score (espacio reparametrizado) para cuasi-Newton
        max_backtracks: retrocesos máximos de la búsqueda lineal
        armijo: constante de suficiente aumento
        initial_step: norma del primer paso en el espacio reparametrizado
        fd_step: paso relativo de diferencias finitas (información observada)
    """

    max_iter: int = 100
    tol: float = 1e-2
    window: int = 3
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    seed: int = 0
    fixed: Tuple[str, ...] = ()
    known_theta: Optional[np.ndarray] = None
    threads: int = 1
    warm_start: bool = True
    gtol: float = 1.0
    max_backtracks: int = 20
    armijo: float = 1e-4
    initial_step: float = 0.1
    fd_step: float = 1e-3

    def to_dict(self) -> Dict[str, object]:
        return {
            "max_iter": self.max_iter, "tol": self.tol, "window": self.window,
            "seed": self.seed, "fixed": list(self.fixed),
            "known_theta": self.known_theta is not None, "threads": self.threads,
            "gtol": self.gtol, "max_backtracks": self.max_backtracks,
            "mcmc": {"n_draws": self.mcmc.n_draws, "burn_in": self.mcmc.burn_in,
                     "thin": self.mcmc.thin},
        }


@dataclass(frozen=True, eq=False)
class SmoothedMoments:
    """
    Estadísticos suficientes del paso E

    Attributes:
        obs_terms: (M, m, q, q) Σ_t (e e' − D) por draw e individuo
        state_terms: (M, m, p, p) por individuo, o (M, 1, mp, mp) en modo conjunto
        posterior: momentos de θ
        theta_draws: (M, m, r)
        n_obs: (m,) tiempos observados por individuo
        n_times: T
        missing: (m, T) True donde no hay observación
        joint: True si el lado estado es conjunto
        init_terms: (M, m, p, p) T_1ᵀ(r_0 r_0ᵀ − N_0)T_1, solo si P_0 depende de δ
        init_cov: (M, m, p, p) P_0 en Δ*
        init_dcov: (n_delta, M, m, p, p) ∂P_0/∂δ_j
    """

    obs_terms: np.ndarray
    state_terms: np.ndarray
    posterior: PosteriorMoments
    theta_draws: np.ndarray
    n_obs: np.ndarray
    n_times: int
    missing: np.ndarray
    joint: bool
    init_terms: Optional[np.ndarray] = None
    init_cov: Optional[np.ndarray] = None
    init_dcov: Optional[np.ndarray] = None

    @property
    def init_scatter(self) -> Optional[np.ndarray]:
        """E[(x_0 − a_0)(x_0 − a_0)ᵀ | y, θ] por draw e individuo"""
        if self.init_terms is None:
            return None
        P0 = self.init_cov
        return P0 + P0 @ self.init_terms @ P0

    @property
    def obs_moment(self) -> np.ndarray:
        """Ẽ[Σ_t (e e' − D)] por individuo: (m, q, q)"""
        return self.obs_terms.mean(axis=0)

    @property
    def state_moment(self) -> np.ndarray:
        """Ẽ[Σ_t (r r' − N)]: (m, p, p) o (1, mp, mp)"""
        return self.state_terms.mean(axis=0)


@dataclass(frozen=True, eq=False)
class FitResult:
    """Resultado de un ajuste"""

    params: ParameterVector
    trace: List[Dict[str, float]]
    converged: bool
    n_iter: int
    seed: int
    wall_clock: float
    method: str
    config: Dict[str, object]
    message: str = ""

    def to_dict(self) -> Dict[str, object]:
        return {
            "schema": 1,
            "method": self.method,
            "params": self.params.as_dict(),
            "n_fixed": self.params.n_fixed,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "seed": self.seed,
            "wall_clock": self.wall_clock,
            "message": self.message,
            "config": self.config,
        }


# ============================================================================
# PASO E
# ============================================================================

InitParts = Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]]


def _chunks(n_draws: int, m: int, threads: int) -> List[np.ndarray]:
    per = max(1, MAX_BATCH // max(m, 1))
    n_chunks = max(threads, int(np.ceil(n_draws / per)))
    return [c for c in np.array_split(np.arange(n_draws), min(n_chunks, n_draws)) if c.size]


def _diag_blocks(big: np.ndarray, m: int, p: int) -> np.ndarray:
    return np.stack([big[i * p:(i + 1) * p, i * p:(i + 1) * p] for i in range(m)])


def _independent_terms(data: PanelData, model: ModelSpec, delta: np.ndarray,
                       draws: np.ndarray, chunk: np.ndarray) -> Tuple[np.ndarray, np.ndarray, InitParts]:
    m, T = data.m, data.n_times
    Mc = chunk.size
    p = model.p
    theta = draws[chunk].reshape(Mc * m, model.r)
    y = np.tile(data.y, (Mc, 1, 1))
    rows = np.tile(data.observed_rows(), (Mc, 1, 1))
    system = individual_systems(model, theta, delta, T)
    try:
        filt = kalman.kalman_filter(system, y, rows)
    except FilterError as err:
        member = err.member if err.member is not None else 0
        raise err.with_draw(int(chunk[member // m]), member % m) from err
    smooth = kalman.disturbance_smoother(system, filt)
    obs = smooth.obs_moment().reshape(Mc, m, model.q, model.q)
    state = smooth.state_moment().reshape(Mc, m, p, p)

    init = None
    dP = model.initial_cov_derivative(theta, delta)
    if dP is not None:
        init = (
            smooth.init_moment(system.transition).reshape(Mc, m, p, p),
            np.asarray(system.init_cov).reshape(Mc, m, p, p),
            dP.reshape(model.n_delta, Mc, m, p, p),
        )
    return obs, state, init


def _joint_terms(data: PanelData, model: ModelSpec, effects: EffectsDesign, delta: np.ndarray,
                 draws: np.ndarray, chunk: np.ndarray) -> Tuple[np.ndarray, np.ndarray, InitParts]:
    m, q, p = data.m, model.q, model.p
    y, rows = data.stacked()
    obs_out, state_out, U_out, P0_out, dP_out = [], [], [], [], []
    for j in chunk:
        system = assemble_block_system(model, effects, draws[j], delta, data.n_times)
        try:
            filt = kalman.kalman_filter(system, y, rows)
        except FilterError as err:
            raise err.with_draw(int(j)) from err
        smooth = kalman.disturbance_smoother(system, filt)
        obs_out.append(_diag_blocks(smooth.obs_moment()[0], m, q))
        state_out.append(smooth.state_moment())
        dP = model.initial_cov_derivative(draws[j], delta)
        if dP is not None:
            U_out.append(_diag_blocks(smooth.init_moment(system.transition)[0], m, p))
            P0_out.append(model.initial_state(draws[j], delta)[1])
            dP_out.append(dP)
    init = None
    if dP_out:
        init = (np.stack(U_out), np.stack(P0_out), np.stack(dP_out, axis=1))
    return np.stack(obs_out), np.stack(state_out), init


def e_step(
    data: PanelData,
    model: ModelSpec,
    effects: EffectsDesign,
    params: ParameterVector,
    samples: ThetaSamples,
    threads: int = 1,
) -> SmoothedMoments:
    """
    Paso E: promedia sobre los draws las salidas del suavizador

    Args:
        data, model, effects: panel y modelo
        params: Δ* en que se muestrearon los draws
        samples: draws de θ
        threads: hilos para repartir bloques de draws

    Returns:
        SmoothedMoments

    Raises:
        FilterError: identifica el índice del draw que falló
    """
    delta = params.delta
    draws = samples.draws
    chunks = _chunks(draws.shape[0], data.m, threads)

    if model.independent:
        def work(chunk):
            return _independent_terms(data, model, delta, draws, chunk)
    else:
        def work(chunk):
            return _joint_terms(data, model, effects, delta, draws, chunk)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]

    init_terms = init_cov = init_dcov = None
    if parts[0][2] is not None:
        init_terms = np.concatenate([i[0] for _, _, i in parts])
        init_cov = np.concatenate([i[1] for _, _, i in parts])
        init_dcov = np.concatenate([i[2] for _, _, i in parts], axis=1)

    return SmoothedMoments(
        obs_terms=np.concatenate([o for o, _, _ in parts]),
        state_terms=np.concatenate([s for _, s, _ in parts]),
        posterior=posterior_moments(samples, effects, params.fixed_effects),
        theta_draws=draws,
        n_obs=data.n_observed,
        n_times=data.n_times,
        missing=~data.mask,
        joint=not model.independent,
        init_terms=init_terms,
        init_cov=init_cov,
        init_dcov=init_dcov,
    )


# ============================================================================
# CANTIDAD INTERMEDIA
# ============================================================================

@dataclass(frozen=True, eq=False)
class _Side:
    """Un bloque −½[n log|Σ(δ)| + tr(Σ(δ)⁻¹ S)] de la cantidad intermedia"""

    terms: CovTerms
    S: np.ndarray
    n: float
    dim: int
    joint_state: bool = False


def _effects_scatter(moments: SmoothedMoments, effects: EffectsDesign, a: np.ndarray) -> np.ndarray:
    """S_D(a) = Σ_i (θ̄_i − Ψ_i a)(θ̄_i − Ψ_i a)ᵀ + Var(θ_i|y)"""
    dev = moments.posterior.theta_mean - effects.mean_theta(a)
    return np.einsum("ia,ib->ab", dev, dev) + moments.posterior.theta_cov.sum(axis=0)


def _joint_state_terms(model: ModelSpec, m: int) -> CovTerms:
    """Términos de Q̃ = 𝟙𝟙ᵀ⊗Σ + I⊗(Q − Σ) en la dimensión apilada"""
    ones, eye = np.ones((m, m)), np.eye(m)
    terms = [(j, np.kron(eye, G)) for j, G in model.state_terms]
    for j, G in model.cross_terms:
        terms.append((j, np.kron(ones, G) - np.kron(eye, G)))
    return tuple(terms)


def _sides(moments: SmoothedMoments, model: ModelSpec, effects: EffectsDesign,
           star: ParameterVector, a: np.ndarray) -> List[_Side]:
    d_star = star.delta
    m, T = effects.m, moments.n_times
    R_star = model.obs_noise_cov(d_star)
    E_sum = moments.obs_moment.sum(axis=0)
    n_R = float(moments.n_obs.sum())
    sides = [
        _Side(model.obs_terms, n_R * R_star + R_star @ E_sum @ R_star, n_R, model.q),
        _Side(model.effects_terms, _effects_scatter(moments, effects, a), float(m), model.r),
    ]
    if moments.joint and model.cross_terms:
        terms = _joint_state_terms(model, m)
        Q_big = sum((star.delta[j] * G for j, G in terms), np.zeros((m * model.p, m * model.p)))
        F = moments.state_moment[0]
        sides.append(_Side(terms, T * Q_big + Q_big @ F @ Q_big, float(T), m * model.p, True))
    else:
        F = moments.state_moment
        if moments.joint:
            p = model.p
            F = np.stack([F[0][i * p:(i + 1) * p, i * p:(i + 1) * p] for i in range(m)])
        Q_star = model.state_noise_cov(d_star)
        S_Q = m * T * Q_star + Q_star @ F.sum(axis=0) @ Q_star
        sides.append(_Side(model.state_terms, S_Q, float(m * T), model.p))
    return sides


def _side_value(side: _Side, delta: np.ndarray) -> float:
    if side.n == 0:
        return 0.0
    cov = sum((delta[j] * G for j, G in side.terms), np.zeros((side.dim, side.dim)))
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        return -np.inf
    return -0.5 * (side.n * logdet + np.trace(np.linalg.solve(cov, side.S)))


def _side_gradient(side: _Side, delta: np.ndarray) -> np.ndarray:
    grad = np.zeros(delta.size)
    if side.n == 0:
        return grad
    cov = sum((delta[j] * G for j, G in side.terms), np.zeros((side.dim, side.dim)))
    inv = np.linalg.inv(cov)
    middle = inv @ side.S @ inv
    for j, G in side.terms:
        grad[j] += -0.5 * side.n * np.sum(inv * G) + 0.5 * np.sum(middle * G)
    return grad


class _InitSide:
    """
    Término de x_0 cuando P_0 = Σ_j δ_j ∂P_0/∂δ_j (covarianza estacionaria)

    −½ (1/M) Σ_{draws, i} [log|P_0(δ)| + tr(P_0(δ)⁻¹ S_0)], con S_0 la
    dispersión suavizada de x_0 en Δ*. Los miembros con P_0 fijo no aportan.
    """

    def __init__(self, moments: SmoothedMoments):
        n_delta = moments.init_dcov.shape[0]
        p = moments.init_cov.shape[-1]
        dP = moments.init_dcov.reshape(n_delta, -1, p, p)
        S = moments.init_scatter.reshape(-1, p, p)
        used = np.any(dP != 0, axis=(0, 2, 3))
        self.dP = dP[:, used]
        self.S = S[used]
        self.p = p
        self.weight = 1.0 / moments.init_cov.shape[0]

    @property
    def empty(self) -> bool:
        return self.S.shape[0] == 0

    def _cov(self, delta: np.ndarray) -> np.ndarray:
        return np.einsum("j,jkab->kab", delta, self.dP)

    def value(self, delta: np.ndarray) -> float:
        if self.empty:
            return 0.0
        P = self._cov(delta)
        sign, logdet = np.linalg.slogdet(P)
        if np.any(sign <= 0):
            return -np.inf
        quad = np.trace(np.linalg.solve(P, self.S), axis1=-2, axis2=-1)
        return float(-0.5 * self.weight * np.sum(logdet + quad))

    def gradient(self, delta: np.ndarray) -> np.ndarray:
        if self.empty:
            return np.zeros(delta.size)
        inv = np.linalg.inv(self._cov(delta))
        middle = inv @ self.S @ inv
        return -0.5 * self.weight * np.einsum("kab,jkba->j", inv - middle, self.dP)

    def _owner(self) -> Optional[np.ndarray]:
        nonzero = np.any(self.dP != 0, axis=(2, 3))
        if np.any(nonzero.sum(axis=0) != 1):
            return None
        return np.argmax(nonzero, axis=0)

    def closed_form_ok(self) -> bool:
        if self.empty:
            return True
        owner = self._owner()
        if owner is None:
            return False
        blocks = self.dP[owner, np.arange(owner.size)]
        return bool(np.all(np.linalg.eigvalsh(blocks)[:, 0] > 0))

    def accumulate(self, num: np.ndarray, den: np.ndarray) -> None:
        """Suma a las formas cerradas δ̂_j = num_j / den_j"""
        if self.empty:
            return
        owner = self._owner()
        blocks = self.dP[owner, np.arange(owner.size)]
        contrib = np.trace(np.linalg.solve(blocks, self.S), axis1=-2, axis2=-1)
        np.add.at(num, owner, self.weight * contrib)
        np.add.at(den, owner, self.weight * self.p)


def _init_side(moments: SmoothedMoments) -> Optional[_InitSide]:
    if moments.init_terms is None:
        return None
    side = _InitSide(moments)
    return None if side.empty else side


def q_function(
    moments: SmoothedMoments,
    params: ParameterVector,
    star: ParameterVector,
    model: ModelSpec,
    effects: EffectsDesign,
) -> float:
    """
    Cantidad intermedia Q(Δ, Δ*) salvo constantes

    Args:
        moments: paso E en Δ*
        params: Δ donde se evalúa
        star: Δ*
    """
    delta = params.delta
    value = sum(_side_value(s, delta) for s in _sides(moments, model, effects, star, params.fixed_effects))
    init = _init_side(moments)
    if init is not None:
        value += init.value(delta)
    return float(value)


# ============================================================================
# PASO M
# ============================================================================

def _support(G: np.ndarray) -> np.ndarray:
    return np.nonzero(np.any(G != 0, axis=1))[0]


def _closed_form_ok(side: _Side) -> bool:
    if side.joint_state:
        return False
    used = np.zeros(side.dim, dtype=bool)
    for _, G in side.terms:
        sup = _support(G)
        if used[sup].any():
            return False
        if np.linalg.eigvalsh(G[np.ix_(sup, sup)])[0] <= 0:
            return False
        used[sup] = True
    return True


def _gls_fixed_effects(moments: SmoothedMoments, effects: EffectsDesign, D: np.ndarray,
                       a_star: np.ndarray, free: np.ndarray) -> np.ndarray:
    """â de las ecuaciones normales Σ Ψ_iᵀ D⁻¹ (θ̄_i − Ψ_i a) = 0 en los componentes libres"""
    a = np.array(a_star, dtype=float)
    if not free.any():
        return a
    D_inv = np.linalg.inv(D)
    psi = effects.psi
    fixed_part = np.einsum("irk,k->ir", psi[:, :, ~free], a[~free])
    target = moments.posterior.theta_mean - fixed_part
    psi_f = psi[:, :, free]
    lhs = np.einsum("irk,rs,isl->kl", psi_f, D_inv, psi_f)
    rhs = np.einsum("irk,rs,is->k", psi_f, D_inv, target)
    a[free] = np.linalg.solve(lhs, rhs)
    return a


def _closed_form_delta(sides: List[_Side], n_delta: int, d_star: np.ndarray,
                       init: Optional[_InitSide] = None) -> np.ndarray:
    num = np.zeros(n_delta)
    den = np.zeros(n_delta)
    for side in sides:
        for j, G in side.terms:
            sup = _support(G)
            block = G[np.ix_(sup, sup)]
            num[j] += np.trace(np.linalg.solve(block, side.S[np.ix_(sup, sup)]))
            den[j] += side.n * sup.size
    if init is not None:
        init.accumulate(num, den)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), d_star)


def _numeric_delta(sides: List[_Side], d_star: np.ndarray, free: np.ndarray,
                   init: Optional[_InitSide] = None) -> np.ndarray:
    """Maximiza Σ lados sobre log δ libres (L-BFGS-B)"""
    idx = np.nonzero(free)[0]

    def full(z):
        delta = np.array(d_star, dtype=float)
        delta[idx] = np.exp(z)
        return delta

    def objective(z):
        delta = full(z)
        value = sum(_side_value(s, delta) for s in sides)
        grad = sum(_side_gradient(s, delta) for s in sides)
        if init is not None:
            value += init.value(delta)
            grad = grad + init.gradient(delta)
        if not np.isfinite(value):
            return 1e300, np.zeros_like(z)
        return -value, -grad[idx] * delta[idx]

    res = minimize(objective, np.log(d_star[idx]), jac=True, method="L-BFGS-B")
    if not res.success:
        logger.warning(f"Paso M numérico sin convergencia: {res.message}")
    return full(res.x)


def m_step(
    moments: SmoothedMoments,
    star: ParameterVector,
    model: ModelSpec,
    effects: EffectsDesign,
    fixed: Sequence[str] = (),
) -> ParameterVector:
    """
    Paso M

    Args:
        moments: paso E en Δ*
        star: Δ*
        fixed: nombres de parámetros que se mantienen en Δ*

    Returns:
        Nuevo Δ con varianzas ≥ 1e-10
    """
    n_a = star.n_fixed
    keep = np.array([n in fixed for n in star.names])
    free_a = ~keep[:n_a]
    free_d = ~keep[n_a:]
    d_star = star.delta

    a = _gls_fixed_effects(moments, effects, model.effects_cov(d_star), star.fixed_effects, free_a)
    sides = _sides(moments, model, effects, star, a)
    init = _init_side(moments)
    closed = all(_closed_form_ok(s) for s in sides) and (init is None or init.closed_form_ok())
    for _ in range(2):
        if closed:
            delta = _closed_form_delta(sides, model.n_delta, d_star, init)
        else:
            delta = _numeric_delta(sides, d_star, free_d, init)
        delta = np.where(free_d, delta, d_star)
        a = _gls_fixed_effects(moments, effects, model.effects_cov(delta), star.fixed_effects, free_a)
        sides = _sides(moments, model, effects, star, a)

    bad = delta <= VARIANCE_FLOOR
    if bad.any():
        nombres = [n for n, b in zip(star.delta_names, bad) if b]
        logger.warning(f"⚠️  Varianzas no positivas en el paso M ({nombres}); se aplica piso {VARIANCE_FLOOR}")
        delta = np.where(bad, VARIANCE_FLOOR, delta)
    return star.with_parts(a, delta)


# ============================================================================
# AJUSTE
# ============================================================================

def fixed_names(config: FitConfig, model: ModelSpec, effects: EffectsDesign) -> Tuple[str, ...]:
    """Parámetros fijos: los de la configuración y, con θ conocido, a y los de D"""
    names = set(config.fixed)
    if config.known_theta is not None:
        names.update(effects.fixed_names)
        other = {j for j, _ in model.state_terms + model.obs_terms + model.cross_terms}
        names.update(model.delta_names[j] for j, _ in model.effects_terms if j not in other)
    return tuple(sorted(names))


def draw_samples(data: PanelData, model: ModelSpec, effects: EffectsDesign, params: ParameterVector,
                 config: FitConfig, iteration: int, init_theta: Optional[np.ndarray] = None) -> ThetaSamples:
    """Draws de la iteración con semilla determinista (seed, iteración)"""
    if config.known_theta is not None:
        return ThetaSamples.from_known(config.known_theta)
    mcmc = replace(config.mcmc, seed=derive_seed(config.seed, iteration), threads=config.threads)
    return sample_posterior(data, model, effects, params, mcmc, init_theta)


def conditional_loglik(data: PanelData, model: ModelSpec, effects: EffectsDesign,
                       theta: np.ndarray, delta: np.ndarray) -> float:
    """log f(y | θ, δ) exacto para θ dado (m, r)"""
    theta = np.asarray(theta, dtype=float).reshape(data.m, model.r)
    if model.independent:
        system = individual_systems(model, theta, delta, data.n_times)
        return float(kalman.loglik(system, data.y, data.observed_rows()).sum())
    y, rows = data.stacked()
    system = assemble_block_system(model, effects, theta, delta, data.n_times)
    return float(kalman.loglik(system, y, rows)[0])


def relative_change(new: np.ndarray, old: np.ndarray) -> float:
    return float(np.max(np.abs(new - old) / np.maximum(np.abs(old), 1e-3)))


def smoothed_criterion(history: List[np.ndarray], window: int) -> float:
    """Cambio relativo de la media móvil de `window` iteraciones"""
    if len(history) < window + 1:
        return relative_change(history[-1], history[-2])
    now = np.mean(history[-window:], axis=0)
    prev = np.mean(history[-window - 1:-1], axis=0)
    return relative_change(now, prev)


def fit_em(
    data: PanelData,
    model: ModelSpec,
    effects: EffectsDesign,
    params0: ParameterVector,
    config: FitConfig,
) -> FitResult:
    """
    EM Monte Carlo: {muestrear → paso E → paso M} hasta convergencia

    Convergencia: cambio relativo máximo de la traza suavizada < tol. Con θ
    conocido el paso E es exacto y se usa la traza sin suavizar.

    Returns:
        FitResult (converged = False si se agota max_iter)
    """
    inicio = time.perf_counter()
    params0.check_feasible()
    fixed = fixed_names(config, model, effects)
    exact = config.known_theta is not None
    window = 1 if exact else config.window

    params = params0
    history = [params.values]
    trace: List[Dict[str, float]] = []
    init_theta = None
    converged = False
    k = 0

    logger.info(f"EM: m={data.m}, T={data.n_times}, parámetros libres="
                f"{[n for n in params.names if n not in fixed]}")

    for k in range(1, config.max_iter + 1):
        samples = draw_samples(data, model, effects, params, config, k, init_theta)
        moments = e_step(data, model, effects, params, samples, config.threads)
        new = m_step(moments, params, model, effects, fixed)
        history.append(new.values)
        criterion = smoothed_criterion(history, window)

        fila = {"iteration": k, **new.as_dict(), "criterion": criterion,
                "acceptance": samples.acceptance_rate}
        if exact:
            fila["loglik"] = conditional_loglik(data, model, effects, config.known_theta, new.delta)
        trace.append(fila)
        logger.debug(f"EM iter {k}: criterio={criterion:.3g} {new.as_dict()}")

        params = new
        if config.warm_start and not samples.known:
            init_theta = samples.draws[-1]
        if criterion < config.tol and k >= window:
            converged = True
            break

    if not exact and len(history) > window:
        params = params.with_values(np.mean(history[-window:], axis=0))

    duracion = time.perf_counter() - inicio
    if converged:
        logger.info(f"EM convergió en {k} iteraciones ({duracion:.1f}s)")
    else:
        logger.warning(f"⚠️  EM sin convergencia tras {k} iteraciones")
    return FitResult(
        params=params, trace=trace, converged=converged, n_iter=k, seed=config.seed,
        wall_clock=duracion, method="em", config=config.to_dict(),
    )
