"""
POSTERIOR MCMC - Muestras de f(θ | y, Δ*) por Metropolis de paseo aleatorio

Los estados se marginalizan exactamente con la log-verosimilitud de Kalman.
Cuando los individuos son independientes cada individuo tiene su propia
cadena y su propio generador (semilla derivada de (seed, i)); las cadenas
avanzan en bloque sobre el eje batch del filtro.

Propuesta:
    θ' = θ + s ⊙ ε,   ε ~ N(0, I),   s₀ = 0.1·sqrt(diag D(δ*))
    log s se adapta durante el burn-in (Robbins-Monro) hacia la tasa objetivo.

Autor: Sistema
Fecha: 2026-10-17
"""

import copy
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from messm import kalman
from messm.errors import ConfigError, FilterError, SamplerError
from messm.model import (
    EffectsDesign,
    ModelSpec,
    PanelData,
    ParameterVector,
    assemble_block_system,
    individual_systems,
)

logger = logging.getLogger(__name__)

LOG_2PI = kalman.LOG_2PI


# ============================================================================
# CONFIGURACIÓN Y TIPOS
# ============================================================================

@dataclass(frozen=True)
class McmcConfig:
    """
    Configuración del muestreador

    Attributes:
        n_draws: M, número de draws guardados
        burn_in: iteraciones descartadas (con adaptación)
        thin: se guarda una de cada `thin` iteraciones
        seed: semilla base
        target_accept: tasa de aceptación objetivo de la adaptación
        init_scale: escala inicial relativa a sqrt(diag D)
        threads: hilos para repartir individuos
    """

    n_draws: int = 200
    burn_in: int = 500
    thin: int = 5
    seed: int = 0
    target_accept: float = 0.33
    init_scale: float = 0.1
    threads: int = 1

    def __post_init__(self):
        if self.n_draws < 1 or self.burn_in < 0 or self.thin < 1:
            raise ConfigError(
                f"Configuración MCMC inválida: M={self.n_draws}, burn_in={self.burn_in}, thin={self.thin}"
            )


@dataclass(frozen=True, eq=False)
class ThetaSamples:
    """
    Draws de θ apilado

    Attributes:
        draws: (M, m, r)
        acceptance: tasa de aceptación por cadena
        burn_in, thin, seed: configuración usada
        known: True si θ es conocido (un único draw exacto)
    """

    draws: np.ndarray
    acceptance: np.ndarray
    burn_in: int
    thin: int
    seed: int
    known: bool = False

    @classmethod
    def from_known(cls, theta: np.ndarray) -> "ThetaSamples":
        theta = np.asarray(theta, dtype=float)
        if theta.ndim == 1:
            theta = theta[:, None]
        return cls(draws=theta[None], acceptance=np.ones(theta.shape[0]), burn_in=0,
                   thin=1, seed=0, known=True)

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.acceptance))

    @property
    def stacked(self) -> np.ndarray:
        """(M, m·r)"""
        M = self.draws.shape[0]
        return self.draws.reshape(M, -1)


@dataclass(frozen=True, eq=False)
class PosteriorMoments:
    """E[θ_i], Var(θ_i), b_{i|T} y Var(b_i|y) (covarianza 1/M)"""

    theta_mean: np.ndarray   # (m, r)
    theta_cov: np.ndarray    # (m, r, r)
    b_mean: np.ndarray       # (m, r)
    b_cov: np.ndarray        # (m, r, r)


# ============================================================================
# DENSIDAD A PRIORI
# ============================================================================

class EffectsPrior:
    """Log-densidad de N(Ψ_i a, D) evaluada fila por fila"""

    def __init__(self, mean: np.ndarray, D: np.ndarray):
        D = np.asarray(D, dtype=float)
        try:
            chol = np.linalg.cholesky(D)
        except np.linalg.LinAlgError as exc:
            raise ConfigError("D(δ) no es definida positiva") from exc
        self.mean = np.asarray(mean, dtype=float)
        self.chol_inv = np.linalg.inv(chol)
        self.logdet = 2.0 * np.log(np.diag(chol)).sum()
        self.r = D.shape[0]

    def subset(self, members: np.ndarray) -> "EffectsPrior":
        """Misma D, medias solo de los individuos indicados"""
        out = copy.copy(self)
        out.mean = self.mean[members]
        return out

    def logpdf(self, theta: np.ndarray) -> np.ndarray:
        """θ (..., m, r) → (..., m)"""
        z = (theta - self.mean) @ self.chol_inv.T
        return -0.5 * (self.r * LOG_2PI + self.logdet + np.sum(z * z, axis=-1))


def _individual_target(data: PanelData, model: ModelSpec, delta: np.ndarray,
                       prior: EffectsPrior, members: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    y = data.y[members]
    rows = data.observed_rows()[members]
    T = data.n_times
    sub_prior = prior.subset(members)

    def loglik(theta: np.ndarray, sel: np.ndarray) -> np.ndarray:
        return kalman.loglik(individual_systems(model, theta, delta, T), y[sel], rows[sel])

    def target(theta: np.ndarray) -> np.ndarray:
        todos = np.arange(theta.shape[0])
        try:
            ll = loglik(theta, todos)
        except FilterError:
            # Propuestas con F_t singular se rechazan una por una
            ll = np.full(theta.shape[0], -np.inf)
            for c in todos:
                try:
                    ll[c] = loglik(theta[c:c + 1], todos[c:c + 1])[0]
                except FilterError:
                    pass
        return ll + sub_prior.logpdf(theta)

    return target


# ============================================================================
# CADENAS
# ============================================================================

def _run_chains(
    target: Callable[[np.ndarray], np.ndarray],
    theta0: np.ndarray,
    scale0: np.ndarray,
    steps: np.ndarray,
    log_uniforms: np.ndarray,
    config: McmcConfig,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Metropolis en bloque para C cadenas independientes

    Args:
        target: θ (C, d) → log-densidad (C,)
        theta0: (C, d) estado inicial
        scale0: (C, d) escala inicial de la propuesta
        steps: (n_iter, C, d) incrementos N(0, 1)
        log_uniforms: (n_iter, C)

    Returns:
        (draws (M, C, d), aceptación por cadena (C,))
    """
    theta = np.array(theta0, dtype=float)
    log_scale = np.log(scale0)
    current = target(theta)
    n_keep = config.n_draws * config.thin
    draws = np.empty((config.n_draws,) + theta.shape)
    accepted = np.zeros(theta.shape[0])

    for k in range(config.burn_in + n_keep):
        proposal = theta + np.exp(log_scale) * steps[k]
        candidate = target(proposal)
        log_ratio = np.where(np.isfinite(candidate), candidate - current, -np.inf)
        accept = log_uniforms[k] < log_ratio
        theta = np.where(accept[:, None], proposal, theta)
        current = np.where(accept, candidate, current)

        if k < config.burn_in:
            gain = (k + 1.0) ** -0.6
            prob = np.exp(np.minimum(log_ratio, 0.0))
            log_scale = log_scale + gain * (prob - config.target_accept)[:, None]
        else:
            j = k - config.burn_in
            accepted += accept
            if (j + 1) % config.thin == 0:
                draws[(j + 1) // config.thin - 1] = theta

    return draws, accepted / n_keep


def _chain_inputs(seed: int, chain: int, n_iter: int, dim: int) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, chain])
    steps = rng.standard_normal((n_iter, dim))
    log_u = np.log(rng.uniform(size=n_iter))
    return steps, log_u


def _check_acceptance(acceptance: np.ndarray) -> None:
    dead = np.nonzero(acceptance == 0)[0]
    if dead.size:
        raise SamplerError(
            f"Sin aceptaciones tras la adaptación en {dead.size} cadena(s) (p.ej. {int(dead[0])}); "
            "reescale la propuesta (init_scale) o revise el modelo"
        )
    logger.debug(f"Aceptación media: {acceptance.mean():.3f} (min {acceptance.min():.3f})")


def sample_posterior(
    data: PanelData,
    model: ModelSpec,
    effects: EffectsDesign,
    params: ParameterVector,
    config: McmcConfig,
    init_theta: Optional[np.ndarray] = None,
) -> ThetaSamples:
    """
    Muestras de θ | y, Δ* por Metropolis de paseo aleatorio

    Target ∝ exp(loglik(y | θ, δ*)) · N(θ; Ψa*, blockdiag D(δ*)). Por
    individuo si el modelo se factoriza, conjunto en otro caso.

    Args:
        data: panel
        model, effects: modelo y diseño
        params: Δ* factible
        config: M, burn-in, thin, seed
        init_theta: (m, r) punto de partida (por defecto Ψa*)

    Returns:
        ThetaSamples con M draws

    Raises:
        SamplerError: alguna cadena sin aceptaciones
    """
    params.check_feasible()
    if data.m != effects.m:
        raise ConfigError(f"El panel tiene {data.m} individuos y el diseño {effects.m}")
    delta = params.delta
    D = model.effects_cov(delta)
    prior = EffectsPrior(effects.mean_theta(params.fixed_effects), D)
    theta0 = prior.mean.copy() if init_theta is None else np.array(init_theta, dtype=float)
    scale = config.init_scale * np.sqrt(np.diag(D))
    n_iter = config.burn_in + config.n_draws * config.thin
    m, r = effects.m, model.r

    if model.independent:
        inputs = [_chain_inputs(config.seed, i, n_iter, r) for i in range(m)]
        steps = np.stack([s for s, _ in inputs], axis=1)
        log_u = np.stack([u for _, u in inputs], axis=1)

        def run(members: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
            target = _individual_target(data, model, delta, prior, members)
            return _run_chains(
                target, theta0[members], np.broadcast_to(scale, (members.size, r)),
                steps[:, members], log_u[:, members], config,
            )

        chunks = [c for c in np.array_split(np.arange(m), max(1, min(config.threads, m))) if c.size]
        if len(chunks) == 1:
            results = [run(chunks[0])]
        else:
            with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
                results = list(pool.map(run, chunks))
        draws = np.concatenate([d for d, _ in results], axis=1)
        acceptance = np.concatenate([a for _, a in results])
    else:
        y, rows = data.stacked()
        T = data.n_times

        def target(flat: np.ndarray) -> np.ndarray:
            out = np.empty(flat.shape[0])
            for c, th in enumerate(flat):
                try:
                    system = assemble_block_system(model, effects, th, delta, T)
                    out[c] = kalman.loglik(system, y, rows)[0] + prior.logpdf(th.reshape(m, r)).sum()
                except FilterError:
                    out[c] = -np.inf
            return out

        steps, log_u = _chain_inputs(config.seed, 0, n_iter, m * r)
        flat_draws, acceptance = _run_chains(
            target, theta0.reshape(1, m * r), np.tile(scale, m)[None], steps[:, None],
            log_u[:, None], config,
        )
        draws = flat_draws.reshape(config.n_draws, m, r)

    _check_acceptance(acceptance)
    return ThetaSamples(draws=draws, acceptance=acceptance, burn_in=config.burn_in,
                        thin=config.thin, seed=config.seed)


def posterior_moments(samples: ThetaSamples, effects: EffectsDesign, a: np.ndarray) -> PosteriorMoments:
    """
    Momentos Monte Carlo por individuo

        b_{i|T} = media(θ_i) − Ψ_i a*,   Var(b_i|y) = covarianza (1/M) de θ_i
    """
    draws = samples.draws
    mean = draws.mean(axis=0)
    dev = draws - mean
    cov = np.einsum("jia,jib->iab", dev, dev) / draws.shape[0]
    b = mean - effects.mean_theta(a)
    return PosteriorMoments(theta_mean=mean, theta_cov=cov, b_mean=b, b_cov=cov)
