"""
SIMULATE - Generación de paneles y estudio de simulación

1. simulate_panel: b_i ~ N(0, D), θ_i = Ψ_i a + b_i, x_0 ~ N(a_0, P_0),
   recorre las ecuaciones de estado y observación (con ruido correlacionado
   entre individuos si el modelo lo declara) y aplica la máscara.
2. run_study: por celda (m, T) y réplica simula, ajusta y registra Δ̂; la
   tabla final tiene media y SE empírico por parámetro.

Autor: Sistema
Fecha: 2026-10-17
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import polars as pl

from messm.em import FitConfig, fit_em
from messm.errors import ConfigError, MessmError
from messm.model import (
    EffectsDesign,
    ModelSpec,
    PanelData,
    ParameterVector,
    assemble_block_system,
    individual_systems,
)
from messm.score import fit_quasi_newton
from messm.seeds import derive_seed, stream

logger = logging.getLogger(__name__)

ModelFactory = Callable[[int], Tuple[ModelSpec, EffectsDesign]]
UNCONVERGED_WARNING = 0.05


# ============================================================================
# CONFIGURACIÓN
# ============================================================================

@dataclass(frozen=True)
class MissingSpec:
    """
    Patrón de faltantes

    Attributes:
        kind: "none", "interval" (todos los individuos en [τ, τ*)) o
            "bernoulli" (cada celda falta con probabilidad `rate`)
        tau, tau_star: intervalo 1-based, τ < τ* ≤ T + 1
        rate: tasa de faltantes por celda
    """

    kind: str = "none"
    tau: Optional[int] = None
    tau_star: Optional[int] = None
    rate: float = 0.0

    def validate(self, n_times: int) -> None:
        if self.kind not in ("none", "interval", "bernoulli"):
            raise ConfigError(f"Tipo de faltantes desconocido: {self.kind}")
        if self.kind == "bernoulli" and not 0 <= self.rate < 1:
            raise ConfigError(f"Tasa de faltantes fuera de [0, 1): {self.rate}")
        if self.kind == "interval":
            if self.tau is None or self.tau_star is None:
                raise ConfigError("El intervalo de faltantes requiere tau y tau_star")
            if not 1 <= self.tau < self.tau_star <= n_times + 1:
                raise ConfigError(
                    f"Intervalo de faltantes inválido: τ={self.tau}, τ*={self.tau_star}, T={n_times}"
                )

    def mask(self, m: int, n_times: int, rng: np.random.Generator) -> np.ndarray:
        """(m, T) True = observado"""
        mask = np.ones((m, n_times), dtype=bool)
        if self.kind == "interval":
            mask[:, self.tau - 1:self.tau_star - 1] = False
        elif self.kind == "bernoulli" and self.rate > 0:
            mask = rng.uniform(size=(m, n_times)) >= self.rate
        return mask


@dataclass(frozen=True, eq=False)
class SimConfig:
    """
    Configuración de una simulación

    Attributes:
        model, effects: modelo y diseño (m individuos)
        params: Δ₀ verdadero (se admiten varianzas nulas)
        n_times: T
        seed: semilla base; la réplica k usa la corriente (seed, k)
        missing: patrón de faltantes
        replications: número de réplicas
    """

    model: ModelSpec
    effects: EffectsDesign
    params: ParameterVector
    n_times: int
    seed: int = 0
    missing: MissingSpec = field(default_factory=MissingSpec)
    replications: int = 1

    def __post_init__(self):
        if self.n_times < 1 or self.replications < 1:
            raise ConfigError(f"T={self.n_times} y réplicas={self.replications} deben ser ≥ 1")
        values = self.params.values
        if not np.all(np.isfinite(values)) or np.any(self.params.delta < 0):
            raise ConfigError("Δ₀ no factible: varianzas negativas o valores no finitos")
        if self.model.t_prime is not None and not 1 < self.model.t_prime < self.n_times:
            raise ConfigError(f"T′={self.model.t_prime} fuera de rango para T={self.n_times}")
        self.missing.validate(self.n_times)

    @property
    def kind(self) -> str:
        return self.model.kind

    @property
    def m(self) -> int:
        return self.effects.m


@dataclass(frozen=True, eq=False)
class TruthRecord:
    """Valores latentes de una simulación"""

    theta: np.ndarray    # (m, r)
    b: np.ndarray        # (m, r)
    x: np.ndarray        # (m, T+1, p), incluye x_0
    y_full: np.ndarray   # (m, T, q) sin máscara
    params: Dict[str, float]
    seed: int
    replication: int

    def to_dict(self) -> Dict[str, object]:
        return {
            "schema": 1,
            "seed": self.seed,
            "replication": self.replication,
            "params": self.params,
            "theta": self.theta.tolist(),
            "b": self.b.tolist(),
            "x": self.x.tolist(),
        }


# ============================================================================
# SIMULACIÓN
# ============================================================================

def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    """Raíz S con S Sᵀ = cov para matrices PSD (admite singulares), batch en el eje 0"""
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    evals, evecs = np.linalg.eigh(cov)
    return evecs * np.sqrt(np.clip(evals, 0.0, None))[..., None, :]


def simulate_panel(config: SimConfig, replication: int = 0) -> Tuple[PanelData, TruthRecord]:
    """
    Genera un panel y su verdad latente

    Args:
        config: modelo, Δ₀, T, semilla y faltantes
        replication: índice de réplica (selecciona la corriente aleatoria)

    Returns:
        (PanelData con máscara aplicada, TruthRecord)
    """
    model, effects, params = config.model, config.effects, config.params
    m, T, r = effects.m, config.n_times, model.r
    delta = params.delta
    rng = stream(config.seed, replication)

    b = rng.standard_normal((m, r)) @ _psd_sqrt(model.effects_cov(delta)).T
    theta = effects.theta_from_effects(params.fixed_effects, b)

    if model.independent:
        system = individual_systems(model, theta, delta, T)
    else:
        system = assemble_block_system(model, effects, theta, delta, T)
    B, n, k = system.batch, system.n_state, system.n_obs

    x = np.empty((B, T + 1, n))
    y = np.empty((B, T, k))
    x[:, 0] = system.init_mean + np.einsum(
        "bij,bj->bi", _psd_sqrt(system.init_cov), rng.standard_normal((B, n))
    )
    Q_root = _psd_sqrt(np.asarray(system.state_cov))
    R_root = _psd_sqrt(np.asarray(system.obs_cov))
    for t in range(T):
        v = np.einsum("bij,bj->bi", Q_root, rng.standard_normal((B, n)))
        w = np.einsum("bij,bj->bi", R_root, rng.standard_normal((B, k)))
        x[:, t + 1] = np.einsum("bij,bj->bi", system.transition[:, t], x[:, t]) + v
        y[:, t] = np.einsum("bij,bj->bi", system.observation[:, t], x[:, t + 1]) + w

    if not model.independent:
        x = x[0].reshape(T + 1, m, model.p).transpose(1, 0, 2)
        y = y[0].reshape(T, m, model.q).transpose(1, 0, 2)

    mask = config.missing.mask(m, T, stream(config.seed, replication, 1))
    data = PanelData(y=np.where(mask[..., None], y, np.nan), mask=mask)
    truth = TruthRecord(
        theta=theta, b=b, x=x, y_full=y, params=params.as_dict(),
        seed=config.seed, replication=replication,
    )
    return data, truth


# ============================================================================
# ESTUDIO
# ============================================================================

@dataclass(frozen=True, eq=False)
class StudyConfig:
    """
    Estudio de simulación sobre una grilla (m, T)

    Attributes:
        factory: m → (modelo, diseño)
        truth: Δ₀ por nombre
        init: Δ inicial del ajuste por nombre
        grid: celdas (m, T)
        replications: réplicas por celda
        estimator: "em" o "score"
        fit: configuración del ajuste (la semilla se deriva por réplica)
        missing: faltantes
        seed: semilla base
        threads: réplicas en paralelo
    """

    factory: ModelFactory
    truth: Dict[str, float]
    init: Dict[str, float]
    grid: Tuple[Tuple[int, int], ...]
    replications: int = 20
    estimator: str = "em"
    fit: FitConfig = field(default_factory=FitConfig)
    missing: MissingSpec = field(default_factory=MissingSpec)
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.estimator not in ("em", "score"):
            raise ConfigError(f"Estimador desconocido: {self.estimator} (use 'em' o 'score')")
        if self.replications < 1 or not self.grid:
            raise ConfigError("El estudio requiere al menos una réplica y una celda")


@dataclass(frozen=True, eq=False)
class StudyResult:
    table: pl.DataFrame
    replications: pl.DataFrame


def _run_replication(config: StudyConfig, cell: int, m: int, n_times: int, rep: int) -> Dict[str, object]:
    """Simula y ajusta una réplica; errores quedan en el dict de estadísticas"""
    stats = {"m": m, "T": n_times, "replication": rep, "exito": False,
             "converged": False, "n_iter": 0, "wall_clock": 0.0, "error": None}
    inicio = time.perf_counter()
    try:
        model, effects = config.factory(m)
        truth = ParameterVector.from_dict(model, effects, config.truth)
        init = ParameterVector.from_dict(model, effects, config.init)
        sim = SimConfig(model, effects, truth, n_times, seed=derive_seed(config.seed, cell, rep),
                        missing=config.missing)
        data, _ = simulate_panel(sim)
        fit_config = replace(config.fit, seed=derive_seed(config.seed, cell, rep, 1), threads=1)
        fit = fit_em if config.estimator == "em" else fit_quasi_newton
        result = fit(data, model, effects, init, fit_config)
        stats.update(result.params.as_dict())
        stats.update(exito=True, converged=result.converged, n_iter=result.n_iter)
    except (MessmError, np.linalg.LinAlgError) as exc:
        stats["error"] = str(exc)
        logger.error(f"❌ Réplica m={m} T={n_times} #{rep}: {exc}")
    stats["wall_clock"] = time.perf_counter() - inicio
    return stats


def _summarise(rows: List[Dict[str, object]], names: Sequence[str], grid: Sequence[Tuple[int, int]]) -> pl.DataFrame:
    registros = []
    for m, n_times in grid:
        cell = [r for r in rows if r["m"] == m and r["T"] == n_times]
        ok = [r for r in cell if r["exito"]]
        good = [r for r in ok if r["converged"]]
        fila = {"m": m, "T": n_times, "n_ok": len(good), "n_failed": len(cell) - len(ok),
                "n_unconverged": len(ok) - len(good)}
        if cell and fila["n_unconverged"] / len(cell) > UNCONVERGED_WARNING:
            logger.warning(
                f"⚠️  Celda m={m} T={n_times}: {fila['n_unconverged']} de {len(cell)} réplicas "
                "sin convergencia; se excluyen de las medias"
            )
        for name in names:
            values = np.array([r[name] for r in good], dtype=float)
            fila[f"{name}_Estimate"] = float(values.mean()) if values.size else float("nan")
            fila[f"{name}_SE"] = float(values.std(ddof=1)) if values.size > 1 else float("nan")
        registros.append(fila)
    return pl.DataFrame(registros)


def run_study(config: StudyConfig) -> StudyResult:
    """
    Corre el estudio completo

    Cada réplica devuelve un dict de estadísticas con 'exito' / 'error'; las
    fallas se registran y cuentan sin abortar el lote.

    Returns:
        StudyResult con la tabla por celda y el detalle por réplica
    """
    model, effects = config.factory(config.grid[0][0])
    names = effects.fixed_names + model.delta_names
    tasks = [(c, m, n_times, rep) for c, (m, n_times) in enumerate(config.grid)
             for rep in range(config.replications)]

    logger.info(f"🚀 Estudio: {len(config.grid)} celdas × {config.replications} réplicas, "
                f"estimador={config.estimator}, hilos={config.threads}")
    inicio = time.perf_counter()

    def work(task):
        return _run_replication(config, *task)

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            rows = list(pool.map(work, tasks))
    else:
        rows = [work(t) for t in tasks]

    table = _summarise(rows, names, config.grid)
    detalle = pl.DataFrame(rows, infer_schema_length=None)
    exitos = sum(1 for r in rows if r["exito"])
    logger.info(f"✅ Estudio terminado: {exitos}/{len(rows)} réplicas exitosas "
                f"en {time.perf_counter() - inicio:.1f}s")
    return StudyResult(table=table, replications=detalle)
