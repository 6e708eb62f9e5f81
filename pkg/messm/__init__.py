"""
messm - Modelos de espacio de estados con efectos mixtos para paneles longitudinales

Estimación de máxima verosimilitud por EM Monte Carlo o cuasi-Newton con
score analítico, y estimación de estados con MKF-KS.

Autor: Sistema
Fecha: 2026-10-17
"""

__version__ = "0.1.0"

from messm.em import FitConfig, FitResult, e_step, fit_em, m_step, q_function
from messm.errors import (
    ConfigError,
    DataFormatError,
    FilterError,
    MessmError,
    NumericalError,
    ParticleDegeneracyError,
    SamplerError,
)
from messm.kalman import BlockSystem, disturbance_smoother, kalman_filter, loglik
from messm.mkfks import ParticleConfig, init_particles, run_filter, state_estimate, step
from messm.model import (
    EffectsDesign,
    InitialState,
    ModelSpec,
    PanelData,
    ParameterVector,
    build_ar_noise,
    build_custom,
    build_damped_local_linear,
    build_swarm,
    build_swarm_transition,
    build_two_regime,
)
from messm.posterior import McmcConfig, ThetaSamples, posterior_moments, sample_posterior
from messm.score import fit_quasi_newton, observed_information, score
from messm.simulate import MissingSpec, SimConfig, StudyConfig, run_study, simulate_panel

__all__ = [
    "__version__",
    "BlockSystem", "ConfigError", "DataFormatError", "EffectsDesign", "FilterError",
    "FitConfig", "FitResult", "InitialState", "McmcConfig", "MessmError", "MissingSpec",
    "ModelSpec", "NumericalError", "PanelData", "ParameterVector", "ParticleConfig",
    "ParticleDegeneracyError", "SamplerError", "SimConfig", "StudyConfig", "ThetaSamples",
    "build_ar_noise", "build_custom", "build_damped_local_linear", "build_swarm",
    "build_swarm_transition", "build_two_regime", "disturbance_smoother", "e_step",
    "fit_em", "fit_quasi_newton", "init_particles", "kalman_filter", "loglik", "m_step",
    "observed_information", "posterior_moments", "q_function", "run_filter", "run_study",
    "sample_posterior", "score", "simulate_panel", "state_estimate", "step",
]
