"""
CONFIGURACIÓN - Variables de entorno (.env) y archivos JSON (schema 1)

Variables (ver .env.template):
    MESSM_SEED      reemplaza la semilla de los archivos de configuración
    MESSM_THREADS   hilos por defecto (por defecto os.cpu_count())
    MESSM_LOG_DIR   carpeta de logs (por defecto <out>/logs)
    MESSM_M_DRAWS, MESSM_BURN_IN, MESSM_THIN   valores por defecto del MCMC
    MESSM_ENV_FILE  ruta alternativa del .env

Archivos JSON:
    modelo      {"schema": 1, "model": {"kind": ..., ...}}
    parámetros  {"schema": 1, "params": {nombre: valor}}
    simulación  modelo + "params" + "simulation": {m, T, seed, replications, missing}
    estudio     modelo + "study": {grid, replications, estimator, truth, init, em, mcmc}

Autor: Sistema
Fecha: 2026-10-17
"""

import json
import logging
import os
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from dotenv import load_dotenv

from messm.em import FitConfig
from messm.errors import ConfigError
from messm.mkfks import ParticleConfig
from messm.model import (
    EffectsDesign,
    InitialState,
    ModelSpec,
    ParameterVector,
    build_ar_noise,
    build_custom,
    build_damped_local_linear,
    build_swarm,
    build_two_regime,
)
from messm.posterior import McmcConfig
from messm.simulate import MissingSpec, ModelFactory, SimConfig, StudyConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
JsonSource = Union[str, Path, Dict[str, Any]]


# ============================================================================
# ENTORNO
# ============================================================================

def load_environment(env_file: Optional[Union[str, Path]] = None) -> bool:
    """Carga el .env (MESSM_ENV_FILE tiene prioridad); True si se encontró"""
    path = os.getenv("MESSM_ENV_FILE") or env_file or ".env"
    encontrado = load_dotenv(path)
    if encontrado:
        logger.debug(f"Variables cargadas desde {path}")
    return encontrado


def env_int(name: str, default: Optional[int]) -> Optional[int]:
    valor = os.getenv(name)
    if valor is None or not valor.strip():
        return default
    try:
        return int(valor.strip())
    except ValueError:
        raise ConfigError(f"Variable {name} debe ser entera (recibido '{valor}')") from None


def env_seed(default: int) -> int:
    """Semilla efectiva: MESSM_SEED si está definida"""
    return env_int("MESSM_SEED", default)


def default_threads() -> int:
    return env_int("MESSM_THREADS", None) or os.cpu_count() or 1


def log_dir(out_dir: Union[str, Path]) -> Path:
    return Path(os.getenv("MESSM_LOG_DIR") or Path(out_dir) / "logs")


def mcmc_config(section: Optional[Dict[str, Any]] = None, seed: int = 0, threads: int = 1) -> McmcConfig:
    """McmcConfig con valores del JSON, luego del entorno, luego por defecto"""
    section = section or {}
    base = McmcConfig()
    return McmcConfig(
        n_draws=int(section.get("n_draws", env_int("MESSM_M_DRAWS", base.n_draws))),
        burn_in=int(section.get("burn_in", env_int("MESSM_BURN_IN", base.burn_in))),
        thin=int(section.get("thin", env_int("MESSM_THIN", base.thin))),
        target_accept=float(section.get("target_accept", base.target_accept)),
        init_scale=float(section.get("init_scale", base.init_scale)),
        seed=seed,
        threads=threads,
    )


# ============================================================================
# JSON
# ============================================================================

def read_json(source: JsonSource) -> Dict[str, Any]:
    """
    Lee un JSON versionado

    Raises:
        ConfigError: JSON inválido o schema distinto de 1
        OSError: archivo ilegible
    """
    if isinstance(source, dict):
        data = source
    else:
        try:
            with open(source, encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: JSON inválido ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError("La configuración debe ser un objeto JSON")
    if data.get("schema") != SCHEMA_VERSION:
        raise ConfigError(f"Schema no soportado: {data.get('schema')!r} (se espera {SCHEMA_VERSION})")
    return data


def _require(section: Dict[str, Any], key: str, donde: str) -> Any:
    if key not in section:
        raise ConfigError(f"Falta '{key}' en {donde}")
    return section[key]


def _initial_state(spec: Optional[Dict[str, Any]], p: int) -> Optional[InitialState]:
    if spec is None:
        return None
    mode = spec.get("mode", "fixed")
    if mode not in ("stationary", "fixed"):
        raise ConfigError(f"initial_state.mode desconocido: {mode}")
    mean = np.asarray(spec.get("mean", np.zeros(p)), dtype=float).reshape(-1)
    cov = np.atleast_2d(np.asarray(spec.get("cov", np.eye(p)), dtype=float))
    if mean.shape != (p,) or cov.shape != (p, p):
        raise ConfigError(f"initial_state con dimensiones {mean.shape}/{cov.shape}, se esperaba p={p}")
    if not np.allclose(cov, cov.T) or np.linalg.eigvalsh(cov)[0] <= 0:
        raise ConfigError("initial_state.cov debe ser simétrica definida positiva")
    return InitialState(mode, mean, cov)


def _cov_terms(entries, names) -> list:
    terms = []
    for entry in entries or []:
        param = _require(entry, "param", "término de covarianza")
        if param not in names:
            raise ConfigError(f"Término de covarianza con parámetro desconocido: {param}")
        terms.append((names.index(param), entry.get("matrix", [[1.0]])))
    return terms


def _build(spec: Dict[str, Any], m: int) -> Tuple[ModelSpec, EffectsDesign]:
    kind = _require(spec, "kind", "model")
    if kind == "ar_noise":
        return build_ar_noise(m, _initial_state(spec.get("initial_state"), 1))
    if kind == "damped_local_linear":
        return build_damped_local_linear(m, _initial_state(spec.get("initial_state"), 2))
    if kind == "two_regime":
        base, base_effects = _build(_require(spec, "base", "two_regime"), m)
        return build_two_regime(base, base_effects, int(_require(spec, "t_prime", "two_regime")))
    if kind == "swarm":
        return build_swarm(
            m, float(_require(spec, "tau", "swarm")), _require(spec, "observation", "swarm"),
            _initial_state(spec.get("initial_state"), 4),
        )
    if kind == "custom":
        p, q, r = (int(_require(spec, k, "custom")) for k in ("p", "q", "r"))
        names = list(_require(spec, "delta_names", "custom"))
        model, effects = build_custom(
            m, p, q, r, names, list(_require(spec, "fixed_names", "custom")),
            transition=_require(spec, "transition", "custom"),
            observation=_require(spec, "observation", "custom"),
            obs_terms=_cov_terms(spec.get("obs_cov"), names),
            state_terms=_cov_terms(spec.get("state_cov"), names),
            effects_terms=_cov_terms(spec.get("effects_cov"), names),
            cross_terms=_cov_terms(spec.get("cross_cov"), names),
            initial=_initial_state(spec.get("initial_state"), p) or InitialState("fixed", np.zeros(p), np.eye(p)),
            design=spec.get("design"),
        )
        if "delta_lower" in spec:
            model = replace(model, delta_lower=tuple(float(v) for v in spec["delta_lower"]))
        return model, effects
    raise ConfigError(
        f"Tipo de modelo desconocido: {kind} "
        "(ar_noise, damped_local_linear, two_regime, swarm, custom)"
    )


def model_factory(source: JsonSource) -> ModelFactory:
    """
    Fábrica m → (ModelSpec, EffectsDesign) a partir del JSON de modelo

    La configuración se valida construyendo el modelo con m = 2; las notas
    del modelo (p.ej. el intercambio T/Z del lineal local amortiguado) se
    registran en el log.
    """
    data = read_json(source)
    spec = _require(data, "model", "archivo de modelo")
    probe, _ = _build(spec, 2)
    for nota in probe.notes:
        logger.info(f"Nota del modelo: {nota}")

    def factory(m: int) -> Tuple[ModelSpec, EffectsDesign]:
        return _build(spec, m)

    return factory


def load_params(source: JsonSource, model: ModelSpec, effects: EffectsDesign) -> ParameterVector:
    data = read_json(source)
    return ParameterVector.from_dict(model, effects, _require(data, "params", "archivo de parámetros"))


def fit_config(section: Optional[Dict[str, Any]], mcmc: Optional[Dict[str, Any]], seed: int,
               threads: int, known_theta: Optional[np.ndarray] = None) -> FitConfig:
    """FitConfig desde la sección "em"/"fit" del JSON"""
    section = section or {}
    base = FitConfig()
    return FitConfig(
        max_iter=int(section.get("max_iter", base.max_iter)),
        tol=float(section.get("tol", base.tol)),
        window=int(section.get("window", base.window)),
        mcmc=mcmc_config(mcmc, seed, threads),
        seed=seed,
        fixed=tuple(section.get("fixed", ())),
        known_theta=known_theta,
        threads=threads,
        warm_start=bool(section.get("warm_start", base.warm_start)),
        gtol=float(section.get("gtol", base.gtol)),
        max_backtracks=int(section.get("max_backtracks", base.max_backtracks)),
        initial_step=float(section.get("initial_step", base.initial_step)),
        fd_step=float(section.get("fd_step", base.fd_step)),
    )


def particle_config(section: Optional[Dict[str, Any]], seed: int, threads: int) -> ParticleConfig:
    section = section or {}
    base = ParticleConfig()
    return ParticleConfig(
        n_particles=int(section.get("n_particles", base.n_particles)),
        h=float(section.get("h", base.h)),
        seed=seed,
        threads=threads,
    )


def _missing(spec: Optional[Dict[str, Any]]) -> MissingSpec:
    spec = spec or {}
    return MissingSpec(
        kind=spec.get("kind", "none"),
        tau=spec.get("tau"),
        tau_star=spec.get("tau_star"),
        rate=float(spec.get("rate", 0.0)),
    )


def load_sim_config(source: JsonSource, seed: Optional[int] = None) -> SimConfig:
    """
    Configuración de simulación

    Args:
        seed: semilla de línea de comandos; MESSM_SEED la reemplaza
    """
    data = read_json(source)
    sim = _require(data, "simulation", "archivo de simulación")
    factory = model_factory(data)
    model, effects = factory(int(_require(sim, "m", "simulation")))
    truth = ParameterVector.from_dict(model, effects, _require(data, "params", "archivo de simulación"))
    base_seed = int(sim.get("seed", 0)) if seed is None else seed
    return SimConfig(
        model=model, effects=effects, params=truth,
        n_times=int(_require(sim, "T", "simulation")),
        seed=env_seed(base_seed),
        missing=_missing(sim.get("missing")),
        replications=int(sim.get("replications", 1)),
    )


def load_study_config(source: JsonSource, threads: int = 1, seed: Optional[int] = None) -> StudyConfig:
    data = read_json(source)
    study = _require(data, "study", "archivo de estudio")
    factory = model_factory(data)
    base_seed = env_seed(int(study.get("seed", 0)) if seed is None else seed)
    grid = tuple((int(m), int(t)) for m, t in _require(study, "grid", "study"))
    return StudyConfig(
        factory=factory,
        truth=dict(_require(study, "truth", "study")),
        init=dict(_require(study, "init", "study")),
        grid=grid,
        replications=int(study.get("replications", 20)),
        estimator=study.get("estimator", "em"),
        fit=fit_config(study.get("em"), study.get("mcmc"), base_seed, 1),
        missing=_missing(study.get("missing")),
        seed=base_seed,
        threads=threads,
    )
