"""
ESTIMATE SCORE - Score analítico, cuasi-Newton e información observada

Score por identidad de Fisher (gradiente de la cantidad intermedia en Δ = Δ*):
    ∂/∂a   = Σ_i Ψ_iᵀ D⁻¹ Ẽ(θ_i − Ψ_i a*)
    ∂/∂δ_j = −½ Σ_i tr[D⁻¹ ∂D − D⁻¹ Ẽ{(θ_i − Ψ_i a*)(·)ᵀ} D⁻¹ ∂D]
             + ½ Σ_t tr[Ẽ(e_t e_tᵀ − D_t) ∂R]
             + ½ Σ_t tr[Ẽ(r_{t-1} r_{t-1}ᵀ − N_{t-1}) ∂Q]
             + ½ tr[Ẽ{T_1ᵀ(r_0 r_0ᵀ − N_0)T_1} ∂P_0]   (P_0 estacionaria)

Cada draw aporta un score completo; el promedio es la estimación y el error
estándar Monte Carlo sale de medias por lotes.

Autor: Sistema
Fecha: 2026-10-17
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from messm import kalman
from messm.em import (
    FitConfig,
    FitResult,
    SmoothedMoments,
    draw_samples,
    e_step,
    fixed_names,
    smoothed_criterion,
)
from messm.errors import ConfigError, NumericalError
from messm.model import (
    EffectsDesign,
    ModelSpec,
    PanelData,
    ParameterVector,
    assemble_block_system,
    individual_systems,
)
from messm.posterior import EffectsPrior, ThetaSamples
from messm.seeds import derive_seed

logger = logging.getLogger(__name__)

N_BATCHES = 10
INFORMATION_STREAM = 2


# ============================================================================
# TIPOS
# ============================================================================

@dataclass(frozen=True, eq=False)
class ScoreVector:
    """
    Score de la log-verosimilitud observada

    Attributes:
        names: nombres de Δ
        values: ∂logL/∂Δ
        stderr: error estándar Monte Carlo por componente (0 con θ conocido)
        n_fixed: dim(a)
    """

    names: Tuple[str, ...]
    values: np.ndarray
    stderr: np.ndarray
    n_fixed: int

    @property
    def fixed_effects(self) -> np.ndarray:
        return self.values[: self.n_fixed]

    @property
    def delta(self) -> np.ndarray:
        return self.values[self.n_fixed:]

    def as_dict(self) -> Dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.values)}


@dataclass(frozen=True, eq=False)
class InformationResult:
    """Información observada sobre los parámetros libres"""

    names: Tuple[str, ...]
    matrix: np.ndarray
    eigenvalues: np.ndarray
    se: Optional[np.ndarray]

    @property
    def positive_definite(self) -> bool:
        return bool(self.eigenvalues.size and self.eigenvalues[0] > 0)

    def to_dict(self) -> Dict[str, object]:
        return {
            "schema": 1,
            "names": list(self.names),
            "matrix": self.matrix.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "positive_definite": self.positive_definite,
            "se": None if self.se is None else dict(zip(self.names, self.se.tolist())),
        }


# ============================================================================
# SCORE
# ============================================================================

def _batch_se(contrib: np.ndarray) -> np.ndarray:
    """Error estándar de la media por medias por lotes (M, d) → (d,)"""
    M = contrib.shape[0]
    if M < 2:
        return np.zeros(contrib.shape[1])
    if M < 2 * N_BATCHES:
        return contrib.std(axis=0, ddof=1) / np.sqrt(M)
    batches = np.array([b.mean(axis=0) for b in np.array_split(contrib, N_BATCHES)])
    return batches.std(axis=0, ddof=1) / np.sqrt(N_BATCHES)


def _joint_dQ(dQ: np.ndarray, dSigma: Optional[np.ndarray], m: int) -> np.ndarray:
    """∂Q̃/∂δ_j para Q̃ = 𝟙𝟙ᵀ⊗Σ + I⊗(Q − Σ)"""
    out = np.kron(np.eye(m), dQ)
    if dSigma is not None:
        out = out + np.kron(np.ones((m, m)) - np.eye(m), dSigma)
    return out


def score_contributions(
    moments: SmoothedMoments,
    model: ModelSpec,
    effects: EffectsDesign,
    params: ParameterVector,
) -> np.ndarray:
    """
    Score de cada draw: (M, dim Δ)

    Raises:
        NumericalError: D(δ*) singular
    """
    delta = params.delta
    D = model.effects_cov(delta)
    try:
        D_inv = np.linalg.inv(D)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("D(δ*) es singular; el score no está definido") from exc
    if not np.all(np.isfinite(D_inv)) or np.linalg.cond(D) > kalman.MAX_CONDITION:
        raise NumericalError("D(δ*) es singular; el score no está definido")

    m = effects.m
    dev = moments.theta_draws - effects.mean_theta(params.fixed_effects)
    n_draws = dev.shape[0]
    out = np.zeros((n_draws, params.values.size))
    out[:, : params.n_fixed] = np.einsum("irk,rs,jis->jk", effects.psi, D_inv, dev)

    for j in range(model.n_delta):
        dc = model.d_cov(delta, j)
        A = D_inv @ dc.dD @ D_inv
        d_side = -0.5 * (m * np.sum(D_inv * dc.dD) - np.einsum("jia,ab,jib->j", dev, A, dev))
        r_side = 0.5 * np.einsum("jiab,ba->j", moments.obs_terms, dc.dR)
        if moments.joint and model.cross_terms:
            dQ = _joint_dQ(dc.dQ, dc.dSigma, m)
            q_side = 0.5 * np.einsum("jiab,ba->j", moments.state_terms, dQ)
        elif moments.joint:
            q_side = 0.5 * np.einsum("jiab,ba->j", moments.state_terms, np.kron(np.eye(m), dc.dQ))
        else:
            q_side = 0.5 * np.einsum("jiab,ba->j", moments.state_terms, dc.dQ)
        out[:, params.n_fixed + j] = d_side + r_side + q_side
        if moments.init_terms is not None:
            out[:, params.n_fixed + j] += 0.5 * np.einsum("jiab,jiba->j", moments.init_terms, moments.init_dcov[j])
    return out


def score(
    data: PanelData,
    model: ModelSpec,
    effects: EffectsDesign,
    params: ParameterVector,
    samples: ThetaSamples,
    moments: Optional[SmoothedMoments] = None,
    threads: int = 1,
) -> ScoreVector:
    """
    Score analítico en Δ*

    Args:
        data, model, effects: panel y modelo
        params: Δ*
        samples: draws de θ | y, Δ*
        moments: paso E ya calculado en Δ* (se recalcula si falta)

    Returns:
        ScoreVector con error estándar Monte Carlo
    """
    if moments is None:
        moments = e_step(data, model, effects, params, samples, threads)
    contrib = score_contributions(moments, model, effects, params)
    return ScoreVector(
        names=params.names,
        values=contrib.mean(axis=0),
        stderr=_batch_se(contrib),
        n_fixed=params.n_fixed,
    )


# ============================================================================
# SUSTITUTO DE DIFERENCIA DE LOG-VEROSIMILITUD
# ============================================================================

def _log_target(data: PanelData, model: ModelSpec, effects: EffectsDesign,
                params: ParameterVector, draws: np.ndarray) -> np.ndarray:
    """log f(y|θ_j, δ) + log π(θ_j | a, D): (M, m) si independiente, (M,) si no"""
    prior = EffectsPrior(effects.mean_theta(params.fixed_effects), model.effects_cov(params.delta))
    n_draws, m, r = draws.shape
    if model.independent:
        system = individual_systems(model, draws.reshape(n_draws * m, r), params.delta, data.n_times)
        y = np.tile(data.y, (n_draws, 1, 1))
        rows = np.tile(data.observed_rows(), (n_draws, 1, 1))
        ll = kalman.loglik(system, y, rows).reshape(n_draws, m)
        return ll + prior.logpdf(draws)
    y, rows = data.stacked()
    out = np.empty(n_draws)
    for j in range(n_draws):
        system = assemble_block_system(model, effects, draws[j], params.delta, data.n_times)
        out[j] = kalman.loglik(system, y, rows)[0] + prior.logpdf(draws[j]).sum()
    return out


def loglik_ratio(
    data: PanelData,
    model: ModelSpec,
    effects: EffectsDesign,
    base: ParameterVector,
    candidate: ParameterVector,
    samples: ThetaSamples,
    base_target: Optional[np.ndarray] = None,
) -> float:
    """
    Estimación por muestreo de importancia de logL(candidate) − logL(base)

    Usa los draws de θ | y, base; por individuo cuando la verosimilitud se
    factoriza. Con θ conocido es la diferencia exacta condicional.
    """
    if base_target is None:
        base_target = _log_target(data, model, effects, base, samples.draws)
    try:
        cand_target = _log_target(data, model, effects, candidate, samples.draws)
    except (ConfigError, NumericalError):
        return -np.inf
    w = cand_target - base_target
    w = np.where(np.isfinite(w), w, -np.inf)
    n_draws = samples.n_draws
    return float(np.sum(logsumexp(w, axis=0) - np.log(n_draws)))


# ============================================================================
# CUASI-NEWTON
# ============================================================================

class _Reparam:
    """φ = (a, log δ) restringido a los parámetros libres"""

    def __init__(self, params: ParameterVector, fixed: Tuple[str, ...]):
        self.template = params
        self.free = np.array([n not in fixed for n in params.names])
        self.is_var = np.arange(params.values.size) >= params.n_fixed

    def to_phi(self, params: ParameterVector) -> np.ndarray:
        v = np.array(params.values, dtype=float)
        v[self.is_var] = np.log(v[self.is_var])
        return v[self.free]

    def to_params(self, phi: np.ndarray) -> ParameterVector:
        v = np.array(self.template.values, dtype=float)
        v[self.is_var] = np.log(v[self.is_var])
        v[self.free] = phi
        v[self.is_var] = np.exp(v[self.is_var])
        return self.template.with_values(v)

    def gradient(self, s: ScoreVector, params: ParameterVector) -> np.ndarray:
        g = np.array(s.values, dtype=float)
        g[self.is_var] *= params.values[self.is_var]
        return g[self.free]


def fit_quasi_newton(
    data: PanelData,
    model: ModelSpec,
    effects: EffectsDesign,
    params0: ParameterVector,
    config: FitConfig,
) -> FitResult:
    """
    Ascenso BFGS sobre φ = (a, log δ)

    En cada iterado se generan draws con semilla (seed, iteración) y se
    calcula el score. La búsqueda lineal (Armijo con retroceso) evalúa el
    sustituto de diferencia de log-verosimilitud con esos mismos draws.
    Converge cuando ‖score_φ‖ < gtol o cuando la traza suavizada cambia
    menos que tol.

    Returns:
        FitResult; converged = False si la búsqueda lineal falla o se agota max_iter
    """
    inicio = time.perf_counter()
    params0.check_feasible()
    fixed = fixed_names(config, model, effects)
    rep = _Reparam(params0, fixed)
    exact = config.known_theta is not None
    window = 1 if exact else config.window

    params = params0
    samples = draw_samples(data, model, effects, params, config, 0)
    g = rep.gradient(score(data, model, effects, params, samples, threads=config.threads), params)
    H: Optional[np.ndarray] = None
    history = [params.values]
    trace: List[Dict[str, float]] = []
    converged = False
    message = ""
    k = 0

    logger.info(f"Cuasi-Newton: m={data.m}, T={data.n_times}, ‖g‖={np.linalg.norm(g):.3g}")

    for k in range(1, config.max_iter + 1):
        norm = float(np.linalg.norm(g))
        if norm < config.gtol:
            converged = True
            k -= 1
            message = "norma del score bajo gtol"
            break

        direction = H @ g if H is not None else config.initial_step * g / norm
        slope = float(g @ direction)
        if slope <= 0:
            H = None
            direction = config.initial_step * g / norm
            slope = float(g @ direction)

        phi = rep.to_phi(params)
        base_target = _log_target(data, model, effects, params, samples.draws)
        alpha = 1.0
        for _ in range(config.max_backtracks):
            candidate = rep.to_params(phi + alpha * direction)
            gain = loglik_ratio(data, model, effects, params, candidate, samples, base_target)
            if gain >= config.armijo * alpha * slope:
                break
            alpha *= 0.5
        else:
            message = f"búsqueda lineal sin éxito tras {config.max_backtracks} retrocesos"
            logger.warning(f"⚠️  {message} (iteración {k})")
            break

        step = alpha * direction
        new_params = candidate
        samples = draw_samples(data, model, effects, new_params, config, k)
        g_new = rep.gradient(score(data, model, effects, new_params, samples, threads=config.threads),
                             new_params)

        # BFGS sobre f = −logL: y = ∇f_new − ∇f_old
        y_vec = -(g_new - g)
        sy = float(step @ y_vec)
        if sy > 1e-12:
            if H is None:
                H = (sy / float(y_vec @ y_vec)) * np.eye(step.size)
            rho = 1.0 / sy
            I = np.eye(step.size)
            H = (I - rho * np.outer(step, y_vec)) @ H @ (I - rho * np.outer(y_vec, step)) \
                + rho * np.outer(step, step)

        params, g = new_params, g_new
        history.append(params.values)
        criterion = smoothed_criterion(history, window)
        trace.append({"iteration": k, **params.as_dict(), "criterion": criterion,
                      "score_norm": float(np.linalg.norm(g)), "step": alpha,
                      "loglik_gain": gain})
        logger.debug(f"QN iter {k}: α={alpha:.3g} ganancia={gain:.4g} ‖g‖={np.linalg.norm(g):.3g}")

        if not exact and k >= window and criterion < config.tol:
            converged = True
            message = "traza suavizada estable"
            break
    else:
        message = f"sin convergencia tras {config.max_iter} iteraciones"

    duracion = time.perf_counter() - inicio
    if converged:
        logger.info(f"Cuasi-Newton convergió en {k} iteraciones ({message}, {duracion:.1f}s)")
    else:
        logger.warning(f"⚠️  Cuasi-Newton sin convergencia: {message}")
    return FitResult(
        params=params, trace=trace, converged=converged, n_iter=k, seed=config.seed,
        wall_clock=duracion, method="score", config=config.to_dict(), message=message,
    )


# ============================================================================
# INFORMACIÓN OBSERVADA
# ============================================================================

def observed_information(
    data: PanelData,
    model: ModelSpec,
    effects: EffectsDesign,
    params: ParameterVector,
    config: FitConfig,
) -> InformationResult:
    """
    Información observada por diferencias centrales del score

    Para cada parámetro libre k se evalúa el score en Δ ± h_k e_k con la misma
    semilla (números aleatorios comunes), h_k = fd_step · max(|Δ_k|, 0.1).
    Información = −(J + Jᵀ)/2.

    Returns:
        InformationResult; se = None si la matriz no es definida positiva
    """
    fixed = fixed_names(config, model, effects)
    free = np.array([n not in fixed for n in params.names])
    idx = np.nonzero(free)[0]
    names = tuple(params.names[i] for i in idx)
    base = np.array(params.values, dtype=float)
    steps = config.fd_step * np.maximum(np.abs(base[idx]), 0.1)

    def evaluate(task: Tuple[int, int]) -> np.ndarray:
        pos, sign = task
        values = base.copy()
        values[idx[pos]] += sign * steps[pos]
        p = params.with_values(values)
        local = FitConfig(
            mcmc=config.mcmc, seed=derive_seed(config.seed, INFORMATION_STREAM, pos),
            known_theta=config.known_theta, threads=1,
        )
        samples = draw_samples(data, model, effects, p, local, 0)
        return score(data, model, effects, p, samples).values[idx]

    tasks = [(pos, sign) for pos in range(idx.size) for sign in (1, -1)]
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(evaluate, tasks))
    else:
        results = [evaluate(t) for t in tasks]

    J = np.empty((idx.size, idx.size))
    for pos in range(idx.size):
        J[:, pos] = (results[2 * pos] - results[2 * pos + 1]) / (2.0 * steps[pos])
    info = -0.5 * (J + J.T)
    eig = np.linalg.eigvalsh(info)

    se = None
    if eig[0] > 0:
        se = np.sqrt(np.diag(np.linalg.inv(info)))
        logger.info(f"Errores estándar: {dict(zip(names, np.round(se, 5)))}")
    else:
        logger.warning(f"⚠️  Información observada no definida positiva; autovalores: {eig}")
    return InformationResult(names=names, matrix=info, eigenvalues=eig, se=se)
