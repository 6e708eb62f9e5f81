"""
MODEL CORE - Tipos del modelo de espacio de estados con efectos mixtos

Contiene:
1. ModelSpec: matrices del sistema de un individuo en función de θ_i y δ
2. EffectsDesign: θ_i = Ψ_i a + b_i, con b_i ~ N(0, D(δ))
3. PanelData: observaciones y_{it} con máscara de faltantes
4. ParameterVector: Δ = (a, δ)
5. Constructores de los modelos incluidos (AR + ruido, lineal local
   amortiguado, dos regímenes, enjambre, matrices afines) y ensamblado del
   sistema por bloques

Las covarianzas se declaran como combinaciones lineales Σ_j δ_j G_j con G_j
fijas; de ahí salen cov(δ), sus derivadas y las formas cerradas del paso M.

Autor: Sistema
Fecha: 2026-10-17
"""

import logging
import re
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import block_diag, expm

from messm.errors import ConfigError
from messm.kalman import BlockSystem

logger = logging.getLogger(__name__)

CovTerms = Tuple[Tuple[int, np.ndarray], ...]
MatrixFn = Callable[[np.ndarray, int], np.ndarray]

DLL_SWAP_NOTE = (
    "Modelo lineal local amortiguado: se usa transición [[1,1],[0,θ]] y "
    "observación (1,0); la versión impresa intercambia T y Z, lo que es "
    "dimensionalmente inconsistente"
)


# ============================================================================
# TIPOS
# ============================================================================

@dataclass(frozen=True, eq=False)
class InitialState:
    """
    Distribución del estado pre-muestral x_0 ~ N(mean, cov)

    mode = "stationary" usa la distribución estacionaria del modelo cuando
    existe (evaluada en θ y δ actuales) y `cov` como respaldo.
    """

    mode: str
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True, eq=False)
class CovDerivatives:
    """∂Q/∂δ_j, ∂R/∂δ_j, ∂D/∂δ_j y ∂Σ/∂δ_j (Σ = covarianza cruzada)"""

    dQ: np.ndarray
    dR: np.ndarray
    dD: np.ndarray
    dSigma: Optional[np.ndarray]


def _cov_from_terms(terms: CovTerms, delta: np.ndarray, dim: int) -> np.ndarray:
    out = np.zeros((dim, dim))
    for j, G in terms:
        out = out + delta[j] * G
    return out


def _dcov_from_terms(terms: CovTerms, j: int, dim: int) -> np.ndarray:
    out = np.zeros((dim, dim))
    for jj, G in terms:
        if jj == j:
            out = out + G
    return out


def _as_terms(pairs: Sequence[Tuple[int, object]]) -> CovTerms:
    terms = []
    for j, G in pairs:
        G = np.atleast_2d(np.asarray(G, dtype=float))
        if G.shape[0] != G.shape[1] or not np.allclose(G, G.T):
            raise ConfigError(f"Matriz de covarianza del parámetro {j} no es simétrica")
        if np.linalg.eigvalsh(G)[0] < -1e-12 * max(1.0, np.abs(G).max()):
            raise ConfigError(f"Matriz de covarianza del parámetro {j} no es PSD")
        G.setflags(write=False)
        terms.append((int(j), G))
    return tuple(terms)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """
    Parametrización del sistema de un individuo

    Attributes:
        kind: nombre del modelo
        p, q, r: dimensiones de estado, observación y θ_i
        delta_names: nombres de los componentes de δ
        transition_fn: θ (..., r), t → (..., p, p); None si la transición es
            conjunta (ver block_transition_fn)
        observation_fn: θ (..., r), t → (..., q, p)
        state_terms, obs_terms, effects_terms: Q, R, D como Σ δ_j G_j
        initial: distribución de x_0
        stationary_cov_fn: θ (B, r), δ, respaldo → (B, p, p)
        stationary_dcov_fn: θ (B, r), δ → (n_delta, B, p, p) con ∂P_0/∂δ_j; cero
            en los miembros que usan la covarianza de respaldo
        cross_terms: Σ, covarianza entre v_{it} y v_{i't}; vacío ⇒ independientes
        block_transition_fn: θ (m, r), t → (mp, mp) para transiciones no diagonales
        t_prime: límite de régimen T′ (modelo de dos regímenes)
        delta_lower: cotas inferiores de δ
    """

    kind: str
    p: int
    q: int
    r: int
    delta_names: Tuple[str, ...]
    transition_fn: Optional[MatrixFn]
    observation_fn: MatrixFn
    state_terms: CovTerms
    obs_terms: CovTerms
    effects_terms: CovTerms
    initial: InitialState
    stationary_cov_fn: Optional[Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]] = None
    stationary_dcov_fn: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    cross_terms: CovTerms = ()
    block_transition_fn: Optional[MatrixFn] = None
    t_prime: Optional[int] = None
    delta_lower: Optional[Tuple[float, ...]] = None
    notes: Tuple[str, ...] = ()

    @property
    def n_delta(self) -> int:
        return len(self.delta_names)

    @property
    def independent(self) -> bool:
        """True si la verosimilitud se factoriza por individuo"""
        return not self.cross_terms and self.block_transition_fn is None

    def transition(self, theta: np.ndarray, t: int = 1) -> np.ndarray:
        if self.transition_fn is None:
            raise ConfigError(f"El modelo {self.kind} no tiene transición por individuo")
        return self.transition_fn(np.asarray(theta, dtype=float), t)

    def observation(self, theta: np.ndarray, t: int = 1) -> np.ndarray:
        return self.observation_fn(np.asarray(theta, dtype=float), t)

    def state_noise_cov(self, delta: np.ndarray) -> np.ndarray:
        return _cov_from_terms(self.state_terms, np.asarray(delta, dtype=float), self.p)

    def cross_cov(self, delta: np.ndarray) -> Optional[np.ndarray]:
        if not self.cross_terms:
            return None
        return _cov_from_terms(self.cross_terms, np.asarray(delta, dtype=float), self.p)

    def obs_noise_cov(self, delta: np.ndarray) -> np.ndarray:
        return _cov_from_terms(self.obs_terms, np.asarray(delta, dtype=float), self.q)

    def effects_cov(self, delta: np.ndarray) -> np.ndarray:
        return _cov_from_terms(self.effects_terms, np.asarray(delta, dtype=float), self.r)

    def d_cov(self, delta: np.ndarray, j: int) -> CovDerivatives:
        """Derivadas parciales de las covarianzas respecto de δ_j"""
        if not 0 <= j < self.n_delta:
            raise ConfigError(f"Índice de varianza fuera de rango: {j}")
        return CovDerivatives(
            dQ=_dcov_from_terms(self.state_terms, j, self.p),
            dR=_dcov_from_terms(self.obs_terms, j, self.q),
            dD=_dcov_from_terms(self.effects_terms, j, self.r),
            dSigma=_dcov_from_terms(self.cross_terms, j, self.p) if self.cross_terms else None,
        )

    def transition_stack(self, theta: np.ndarray, n_times: int) -> np.ndarray:
        """(B, r) → (B, T, p, p) con el régimen correspondiente a cada t"""
        return self._time_stack(self.transition, theta, n_times, self.p)

    def observation_stack(self, theta: np.ndarray, n_times: int) -> np.ndarray:
        """(B, r) → (B, T, q, p)"""
        return self._time_stack(self.observation, theta, n_times, self.q)

    def _time_stack(self, fn: Callable, theta: np.ndarray, n_times: int, rows: int) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        B = theta.shape[0]
        shape = (B, n_times, rows, self.p)
        if self.t_prime is None:
            return np.broadcast_to(fn(theta, 1)[:, None], shape)
        check_t_prime(self.t_prime, n_times)
        first = np.broadcast_to(fn(theta, 1)[:, None], (B, self.t_prime, rows, self.p))
        second = np.broadcast_to(
            fn(theta, self.t_prime + 1)[:, None], (B, n_times - self.t_prime, rows, self.p)
        )
        return np.concatenate([first, second], axis=1)

    def initial_state(self, theta: np.ndarray, delta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Media y covarianza de x_0 por miembro del batch

        Args:
            theta: (B, r)
            delta: componentes de varianza

        Returns:
            ((B, p), (B, p, p))
        """
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        B = theta.shape[0]
        mean = np.broadcast_to(self.initial.mean, (B, self.p)).copy()
        if self.initial.mode == "stationary" and self.stationary_cov_fn is not None:
            cov = self.stationary_cov_fn(theta, np.asarray(delta, dtype=float), self.initial.cov)
        else:
            cov = np.broadcast_to(self.initial.cov, (B, self.p, self.p)).copy()
        return mean, cov

    def initial_cov_derivative(self, theta: np.ndarray, delta: np.ndarray) -> Optional[np.ndarray]:
        """
        ∂P_0/∂δ_j para cada j: (n_delta, B, p, p), o None si P_0 no depende de δ

        La covarianza estacionaria es lineal en Q, así que P_0 = Σ_j δ_j ∂P_0/∂δ_j
        en los miembros estacionarios.
        """
        if self.initial.mode != "stationary" or self.stationary_dcov_fn is None:
            return None
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        return self.stationary_dcov_fn(theta, np.asarray(delta, dtype=float))

    def lower_bounds(self) -> np.ndarray:
        if self.delta_lower is None:
            return np.zeros(self.n_delta)
        return np.asarray(self.delta_lower, dtype=float)


@dataclass(frozen=True, eq=False)
class EffectsDesign:
    """
    Diseño de efectos θ_i = Ψ_i a + b_i

    Attributes:
        psi: (m, r, dim(a)) matrices Ψ_i
        fixed_names: nombres de los componentes de a
        t_prime: T′ si el diseño es de dos regímenes
    """

    psi: np.ndarray
    fixed_names: Tuple[str, ...]
    t_prime: Optional[int] = None

    @property
    def m(self) -> int:
        return self.psi.shape[0]

    @property
    def r(self) -> int:
        return self.psi.shape[1]

    @property
    def n_fixed(self) -> int:
        return self.psi.shape[2]

    def mean_theta(self, a: np.ndarray) -> np.ndarray:
        """Ψ_i a para todos los individuos: (m, r)"""
        return np.einsum("irk,k->ir", self.psi, np.asarray(a, dtype=float))

    def theta_from_effects(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return self.mean_theta(a) + np.asarray(b, dtype=float)

    def effects_from_theta(self, a: np.ndarray, theta: np.ndarray) -> np.ndarray:
        return np.asarray(theta, dtype=float) - self.mean_theta(a)

    def subset(self, individuals: Sequence[int]) -> "EffectsDesign":
        return EffectsDesign(self.psi[np.asarray(individuals)], self.fixed_names, self.t_prime)


@dataclass(frozen=True, eq=False)
class PanelData:
    """
    Panel de observaciones

    Attributes:
        y: (m, T, q); NaN donde no hay observación
        mask: (m, T) True = observado
    """

    y: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 2:
            y = y[..., None]
        if y.ndim != 3:
            raise ValueError(f"y debe tener forma (m, T, q), recibido {y.shape}")
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != y.shape[:2]:
            raise ValueError(f"Máscara {mask.shape} no coincide con (m, T) = {y.shape[:2]}")
        if not np.all(np.isfinite(y[mask])):
            raise ValueError("Hay observaciones no finitas marcadas como observadas")
        y = np.where(mask[..., None], y, np.nan)
        y.setflags(write=False)
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def from_arrays(cls, y: np.ndarray, mask: Optional[np.ndarray] = None) -> "PanelData":
        y = np.asarray(y, dtype=float)
        if y.ndim == 2:
            y = y[..., None]
        if mask is None:
            mask = np.isfinite(y).all(axis=2)
        return cls(y=y, mask=mask)

    @property
    def m(self) -> int:
        return self.y.shape[0]

    @property
    def n_times(self) -> int:
        return self.y.shape[1]

    @property
    def q(self) -> int:
        return self.y.shape[2]

    @property
    def n_observed(self) -> np.ndarray:
        """Tiempos observados por individuo"""
        return self.mask.sum(axis=1)

    def observed_rows(self) -> np.ndarray:
        """(m, T, q) máscara por fila de observación"""
        return np.broadcast_to(self.mask[..., None], self.y.shape)

    def stacked(self) -> Tuple[np.ndarray, np.ndarray]:
        """y apilado (1, T, m·q) y sus filas observadas, para el sistema conjunto"""
        m, T, q = self.y.shape
        y = self.y.transpose(1, 0, 2).reshape(T, m * q)[None]
        rows = self.observed_rows().transpose(1, 0, 2).reshape(T, m * q)[None]
        return y, rows

    def subset(self, individuals: Sequence[int]) -> "PanelData":
        idx = np.asarray(individuals)
        return PanelData(self.y[idx], self.mask[idx])

    def with_mask(self, mask: np.ndarray) -> "PanelData":
        """Panel con faltantes adicionales (la máscara se combina con AND)"""
        return PanelData(self.y, self.mask & np.asarray(mask, dtype=bool))


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """
    Δ = (a, δ)

    Attributes:
        names: nombres de a seguidos de los de δ
        values: valores
        n_fixed: dim(a)
        lower: cotas inferiores (−inf para efectos fijos)
    """

    names: Tuple[str, ...]
    values: np.ndarray
    n_fixed: int
    lower: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if len(self.names) != values.size:
            raise ConfigError("Número de nombres y valores de parámetros no coincide")

    @classmethod
    def from_parts(cls, model: ModelSpec, effects: EffectsDesign, a: Sequence[float],
                   delta: Sequence[float]) -> "ParameterVector":
        a = np.atleast_1d(np.asarray(a, dtype=float))
        delta = np.atleast_1d(np.asarray(delta, dtype=float))
        if a.size != effects.n_fixed or delta.size != model.n_delta:
            raise ConfigError(
                f"Se esperaban {effects.n_fixed} efectos fijos y {model.n_delta} varianzas, "
                f"recibidos {a.size} y {delta.size}"
            )
        lower = np.concatenate([np.full(a.size, -np.inf), model.lower_bounds()])
        return cls(effects.fixed_names + model.delta_names, np.concatenate([a, delta]), a.size, lower)

    @classmethod
    def from_dict(cls, model: ModelSpec, effects: EffectsDesign,
                  valores: Dict[str, float]) -> "ParameterVector":
        names = effects.fixed_names + model.delta_names
        faltantes = [n for n in names if n not in valores]
        sobrantes = [n for n in valores if n not in names]
        if faltantes or sobrantes:
            raise ConfigError(
                f"Parámetros inválidos. Faltan: {faltantes or '-'}; desconocidos: {sobrantes or '-'}"
            )
        vals = [float(valores[n]) for n in names]
        return cls.from_parts(model, effects, vals[: effects.n_fixed], vals[effects.n_fixed:])

    @property
    def fixed_effects(self) -> np.ndarray:
        return self.values[: self.n_fixed]

    @property
    def delta(self) -> np.ndarray:
        return self.values[self.n_fixed:]

    @property
    def delta_names(self) -> Tuple[str, ...]:
        return self.names[self.n_fixed:]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigError(f"Parámetro desconocido: {name}") from None

    def with_values(self, values: np.ndarray) -> "ParameterVector":
        return ParameterVector(self.names, np.asarray(values, dtype=float), self.n_fixed, self.lower)

    def with_parts(self, a: np.ndarray, delta: np.ndarray) -> "ParameterVector":
        return self.with_values(np.concatenate([np.atleast_1d(a), np.atleast_1d(delta)]))

    def as_dict(self) -> Dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.values)}

    def check_feasible(self) -> None:
        """Varianzas estrictamente positivas y sobre sus cotas"""
        delta = self.delta
        if not np.all(np.isfinite(self.values)):
            raise ConfigError("Parámetros no finitos")
        if np.any(delta <= 0) or np.any(delta < self.lower[self.n_fixed:]):
            malos = [n for n, v in zip(self.delta_names, delta) if v <= 0]
            raise ConfigError(f"Varianzas no positivas: {malos}")


def check_t_prime(t_prime: int, n_times: int) -> None:
    """Valida 1 < T′ < T"""
    if not 1 < t_prime < n_times:
        raise ConfigError(f"T′={t_prime} fuera de rango: se requiere 1 < T′ < T={n_times}")


# ============================================================================
# MODELOS INCLUIDOS
# ============================================================================

def _identity_design(m: int, r: int, names: Tuple[str, ...]) -> EffectsDesign:
    if m < 1:
        raise ConfigError(f"Se requiere m ≥ 1 (recibido {m})")
    psi = np.broadcast_to(np.eye(r), (m, r, r)).copy()
    return EffectsDesign(psi=psi, fixed_names=names)


def _ar_transition(theta: np.ndarray, t: int) -> np.ndarray:
    return theta[..., :1, None]


def _ar_observation(theta: np.ndarray, t: int) -> np.ndarray:
    return np.ones(theta.shape[:-1] + (1, 1))


def _ar_stationary_cov(theta: np.ndarray, delta: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    phi = theta[..., 0]
    stable = np.abs(phi) < 1
    denom = np.where(stable, 1.0 - phi ** 2, 1.0)
    var = np.where(stable, delta[1] / denom, fallback[0, 0])
    return var[..., None, None]


def _ar_stationary_dcov(theta: np.ndarray, delta: np.ndarray) -> np.ndarray:
    phi = theta[..., 0]
    stable = np.abs(phi) < 1
    out = np.zeros((delta.size,) + phi.shape + (1, 1))
    out[1, ..., 0, 0] = np.where(stable, 1.0 / np.where(stable, 1.0 - phi ** 2, 1.0), 0.0)
    return out


def build_ar_noise(m: int, initial: Optional[InitialState] = None) -> Tuple[ModelSpec, EffectsDesign]:
    """
    Modelo AR(1) más ruido

        y_it = x_it + w_it,   x_it = θ_i x_i,t-1 + v_it
        R = δ₁, Q = δ₂, D = δ₃, θ_i = μ + b_i

    Args:
        m: número de individuos
        initial: estado inicial; por defecto estacionario si |θ| < 1, si no N(0, 3.2)
    """
    if initial is None:
        initial = InitialState("stationary", np.zeros(1), np.array([[3.2]]))
    one = np.ones((1, 1))
    model = ModelSpec(
        kind="ar_noise", p=1, q=1, r=1,
        delta_names=("d1", "d2", "d3"),
        transition_fn=_ar_transition,
        observation_fn=_ar_observation,
        obs_terms=_as_terms([(0, one)]),
        state_terms=_as_terms([(1, one)]),
        effects_terms=_as_terms([(2, one)]),
        initial=initial,
        stationary_cov_fn=_ar_stationary_cov,
        stationary_dcov_fn=_ar_stationary_dcov,
    )
    return model, _identity_design(m, 1, ("mu",))


def _dll_transition(theta: np.ndarray, t: int) -> np.ndarray:
    out = np.zeros(theta.shape[:-1] + (2, 2))
    out[..., 0, 0] = 1.0
    out[..., 0, 1] = 1.0
    out[..., 1, 1] = theta[..., 0]
    return out


def _dll_observation(theta: np.ndarray, t: int) -> np.ndarray:
    out = np.zeros(theta.shape[:-1] + (1, 2))
    out[..., 0, 0] = 1.0
    return out


def build_damped_local_linear(m: int, initial: Optional[InitialState] = None) -> Tuple[ModelSpec, EffectsDesign]:
    """
    Modelo lineal local amortiguado con estado (z, u)

        z_t = z_{t-1} + u_{t-1} + v^z_t,   u_t = θ_i u_{t-1} + v^u_t,   y_t = z_t + w_t
        R = δ₁, Q = diag(δ₂, δ₃), D = δ₄
    """
    if initial is None:
        initial = InitialState("fixed", np.zeros(2), 1e7 * np.eye(2))
    model = ModelSpec(
        kind="damped_local_linear", p=2, q=1, r=1,
        delta_names=("d1", "d2", "d3", "d4"),
        transition_fn=_dll_transition,
        observation_fn=_dll_observation,
        obs_terms=_as_terms([(0, np.ones((1, 1)))]),
        state_terms=_as_terms([(1, np.diag([1.0, 0.0])), (2, np.diag([0.0, 1.0]))]),
        effects_terms=_as_terms([(3, np.ones((1, 1)))]),
        initial=initial,
        notes=(DLL_SWAP_NOTE,),
    )
    return model, _identity_design(m, 1, ("mu",))


def _second_regime_names(base_names: Sequence[str], effect_names: Sequence[str],
                         base_count: int) -> List[str]:
    # d1..dk continúan la numeración; otros nombres reciben sufijo _2
    if all(re.fullmatch(r"d\d+", n) for n in base_names):
        return [f"d{base_count + k + 1}" for k in range(len(effect_names))]
    return [f"{n}_2" for n in effect_names]


def build_two_regime(
    base: ModelSpec,
    base_effects: EffectsDesign,
    t_prime: int,
    n_times: Optional[int] = None,
) -> Tuple[ModelSpec, EffectsDesign]:
    """
    Efectos dependientes del tiempo: θ⁽¹⁾ para t ≤ T′ y θ⁽²⁾ para t > T′

    θ se guarda apilado (θ⁽¹⁾, θ⁽²⁾) con dimensión 2r. D₁ conserva los
    índices de varianza del modelo base; D₂ recibe índices nuevos al final.
    Los efectos fijos se duplican (mu → mu1, mu2).

    Args:
        base: modelo estático con efectos independientes
        base_effects: diseño Ψ_i del modelo base (se usa en ambos regímenes)
        t_prime: último tiempo del primer régimen
        n_times: T, si se conoce, para validar T′

    Raises:
        ConfigError: T′ fuera de rango o modelo base no apto
    """
    if not base.independent or base.t_prime is not None:
        raise ConfigError("El modelo base de dos regímenes debe ser estático e independiente")
    if t_prime < 2 or (n_times is not None and t_prime >= n_times):
        raise ConfigError(f"T′={t_prime} fuera de rango (1 < T′ < T)")

    r, nd = base.r, base.n_delta
    effect_params = sorted({j for j, _ in base.effects_terms})
    new_index = {j: nd + k for k, j in enumerate(effect_params)}
    zeros = np.zeros((r, r))
    effects_terms = []
    for j, G in base.effects_terms:
        effects_terms.append((j, block_diag(G, zeros)))
    for j, G in base.effects_terms:
        effects_terms.append((new_index[j], block_diag(zeros, G)))

    base_effect_names = [base.delta_names[j] for j in effect_params]
    new_names = _second_regime_names(base.delta_names, base_effect_names, nd)

    def transition(theta: np.ndarray, t: int) -> np.ndarray:
        part = theta[..., :r] if t <= t_prime else theta[..., r:]
        return base.transition(part, t)

    def observation(theta: np.ndarray, t: int) -> np.ndarray:
        part = theta[..., :r] if t <= t_prime else theta[..., r:]
        return base.observation(part, t)

    stationary = None
    if base.stationary_cov_fn is not None:
        def stationary(theta, delta, fallback):
            return base.stationary_cov_fn(theta[..., :r], delta[:nd], fallback)

    stationary_d = None
    if base.stationary_dcov_fn is not None:
        def stationary_d(theta, delta):
            inner = base.stationary_dcov_fn(theta[..., :r], delta[:nd])
            pad = np.zeros((delta.size - nd,) + inner.shape[1:])
            return np.concatenate([inner, pad])

    lower = None
    if base.delta_lower is not None:
        lower = tuple(base.delta_lower) + tuple(base.delta_lower[j] for j in effect_params)

    model = ModelSpec(
        kind=f"two_regime[{base.kind}]", p=base.p, q=base.q, r=2 * r,
        delta_names=base.delta_names + tuple(new_names),
        transition_fn=transition,
        observation_fn=observation,
        state_terms=base.state_terms,
        obs_terms=base.obs_terms,
        effects_terms=_as_terms(effects_terms),
        initial=base.initial,
        stationary_cov_fn=stationary,
        stationary_dcov_fn=stationary_d,
        t_prime=t_prime,
        delta_lower=lower,
        notes=base.notes,
    )
    psi = np.stack([block_diag(p_i, p_i) for p_i in base_effects.psi])
    names = tuple(f"{n}1" for n in base_effects.fixed_names) + tuple(
        f"{n}2" for n in base_effects.fixed_names
    )
    return model, EffectsDesign(psi=psi, fixed_names=names, t_prime=t_prime)


def build_custom(
    m: int,
    p: int,
    q: int,
    r: int,
    delta_names: Sequence[str],
    fixed_names: Sequence[str],
    transition: Dict[str, object],
    observation: Dict[str, object],
    obs_terms: Sequence[Tuple[int, object]],
    state_terms: Sequence[Tuple[int, object]],
    effects_terms: Sequence[Tuple[int, object]],
    initial: InitialState,
    design: Optional[np.ndarray] = None,
    cross_terms: Sequence[Tuple[int, object]] = (),
) -> Tuple[ModelSpec, EffectsDesign]:
    """
    Modelo con matrices afines en θ: T(θ) = T₀ + Σ_k θ_k T_k, igual para Z

    Args:
        transition / observation: {"constant": matriz, "theta": [matriz_k, ...]}
        *_terms: pares (índice δ, G)
        design: Ψ (m, r, dim(a)); por defecto identidad
    """
    def affine(spec: Dict[str, object], rows: int) -> MatrixFn:
        const = np.asarray(spec.get("constant", np.zeros((rows, p))), dtype=float)
        coefs = np.asarray(spec.get("theta", np.zeros((r, rows, p))), dtype=float)
        if const.shape != (rows, p) or coefs.shape != (r, rows, p):
            raise ConfigError(
                f"Matriz afín con forma inválida: constante {const.shape}, θ {coefs.shape}; "
                f"se esperaba ({rows}, {p}) y ({r}, {rows}, {p})"
            )

        def fn(theta: np.ndarray, t: int) -> np.ndarray:
            return const + np.einsum("...k,kij->...ij", theta, coefs)

        return fn

    model = ModelSpec(
        kind="custom", p=p, q=q, r=r,
        delta_names=tuple(delta_names),
        transition_fn=affine(transition, p),
        observation_fn=affine(observation, q),
        obs_terms=_as_terms(obs_terms),
        state_terms=_as_terms(state_terms),
        effects_terms=_as_terms(effects_terms),
        cross_terms=_as_terms(cross_terms),
        initial=initial,
    )
    if design is None:
        if len(fixed_names) != r:
            raise ConfigError("Sin 'design' el número de efectos fijos debe ser r")
        effects = _identity_design(m, r, tuple(fixed_names))
    else:
        psi = np.asarray(design, dtype=float)
        if psi.ndim == 2:
            psi = np.broadcast_to(psi, (m,) + psi.shape).copy()
        if psi.shape[:2] != (m, r) or psi.shape[2] != len(fixed_names):
            raise ConfigError(f"Diseño Ψ con forma {psi.shape} inválida")
        effects = EffectsDesign(psi=psi, fixed_names=tuple(fixed_names))
    return model, effects


# ============================================================================
# ENJAMBRE (GROUP TRACKING)
# ============================================================================

@dataclass(frozen=True, eq=False)
class SwarmDynamics:
    """Generador A(θ), transición exp(A τ) y Var(v) del enjambre"""

    generator: np.ndarray
    transition: np.ndarray
    state_cov: np.ndarray


def swarm_generator(theta: np.ndarray) -> np.ndarray:
    """
    Matriz A(θ) de 4m×4m con bloques A_{i1} en la diagonal y A_{i3} fuera

    Estado por objetivo: (S^x, Ṡ^x, S^y, Ṡ^y).
    """
    theta = np.asarray(theta, dtype=float).reshape(-1, 3)
    m = theta.shape[0]
    A = np.zeros((4 * m, 4 * m))
    for i, (alpha, beta, gamma) in enumerate(theta):
        a2 = np.array([[0.0, 1.0], [-alpha + alpha / m, -beta - gamma + beta / m]])
        a4 = np.array([[0.0, 0.0], [alpha / m, beta / m]])
        a1 = block_diag(a2, a2)
        a3 = block_diag(a4, a4)
        for j in range(m):
            A[4 * i:4 * i + 4, 4 * j:4 * j + 4] = a1 if i == j else a3
    return A


def swarm_state_cov(Q: np.ndarray, Sigma: np.ndarray, m: int) -> np.ndarray:
    """Var(v) = (𝟙𝟙ᵀ) ⊗ Σ + blockdiag(Q − Σ)"""
    Q = np.asarray(Q, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    diff = Q - Sigma
    escala = max(1.0, float(np.abs(Q).max()))
    if np.linalg.eigvalsh(0.5 * (diff + diff.T))[0] < -1e-10 * escala:
        raise ConfigError("Q − Σ no es semidefinida positiva")
    return np.kron(np.ones((m, m)), Sigma) + np.kron(np.eye(m), diff)


def build_swarm_transition(theta: np.ndarray, tau: float, Q: np.ndarray, Sigma: np.ndarray) -> SwarmDynamics:
    """
    Transición del enjambre T(θ) = exp(A(θ) τ) y covarianza conjunta

    Args:
        theta: m ternas (α_i, β_i, γ_i)
        tau: intervalo de muestreo
        Q, Sigma: 4×4

    Raises:
        ConfigError: m < 2, τ ≤ 0 o Var(v) no PSD
    """
    theta = np.asarray(theta, dtype=float).reshape(-1, 3)
    m = theta.shape[0]
    if m < 2:
        raise ConfigError("El enjambre requiere m ≥ 2")
    if tau <= 0:
        raise ConfigError(f"τ debe ser positivo (recibido {tau})")
    A = swarm_generator(theta)
    return SwarmDynamics(generator=A, transition=expm(A * tau), state_cov=swarm_state_cov(Q, Sigma, m))


def build_swarm(m: int, tau: float, observation: np.ndarray,
                initial: Optional[InitialState] = None) -> Tuple[ModelSpec, EffectsDesign]:
    """
    Modelo de enjambre con θ_i = (α_i, β_i, γ_i) y observación lineal dada

    R = d_r I_q, Q = d_q I₄, Σ = d_sigma I₄, D = d_b I₃. La transición es
    conjunta, así que el filtrado y el muestreo son siempre conjuntos.
    """
    if m < 2:
        raise ConfigError("El enjambre requiere m ≥ 2")
    if tau <= 0:
        raise ConfigError(f"τ debe ser positivo (recibido {tau})")
    Z = np.atleast_2d(np.asarray(observation, dtype=float))
    if Z.shape[1] != 4:
        raise ConfigError(f"La observación del enjambre debe tener 4 columnas (recibido {Z.shape})")
    if initial is None:
        initial = InitialState("fixed", np.zeros(4), np.eye(4))

    def block_transition(theta: np.ndarray, t: int) -> np.ndarray:
        return expm(swarm_generator(theta) * tau)

    def obs(theta: np.ndarray, t: int) -> np.ndarray:
        return np.broadcast_to(Z, theta.shape[:-1] + Z.shape).copy()

    model = ModelSpec(
        kind="swarm", p=4, q=Z.shape[0], r=3,
        delta_names=("d_r", "d_q", "d_sigma", "d_b"),
        transition_fn=None,
        observation_fn=obs,
        obs_terms=_as_terms([(0, np.eye(Z.shape[0]))]),
        state_terms=_as_terms([(1, np.eye(4))]),
        cross_terms=_as_terms([(2, np.eye(4))]),
        effects_terms=_as_terms([(3, np.eye(3))]),
        initial=initial,
        block_transition_fn=block_transition,
    )
    return model, _identity_design(m, 3, ("alpha", "beta", "gamma"))


# ============================================================================
# ENSAMBLADO DE SISTEMAS
# ============================================================================

def individual_systems(model: ModelSpec, theta: np.ndarray, delta: np.ndarray, n_times: int) -> BlockSystem:
    """
    Sistemas por individuo con eje batch (caso independiente)

    Args:
        theta: (B, r) un θ por miembro del batch
        delta: varianzas
        n_times: T

    Returns:
        BlockSystem de batch B y dimensión p
    """
    if not model.independent:
        raise ConfigError(f"El modelo {model.kind} no se factoriza por individuo")
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    if theta.shape[1] != model.r:
        raise ConfigError(f"θ con dimensión {theta.shape[1]}, se esperaba {model.r}")
    B = theta.shape[0]
    p, q = model.p, model.q
    a0, P0 = model.initial_state(theta, delta)
    return BlockSystem(
        transition=model.transition_stack(theta, n_times),
        observation=model.observation_stack(theta, n_times),
        state_cov=np.broadcast_to(model.state_noise_cov(delta), (B, p, p)),
        obs_cov=np.broadcast_to(model.obs_noise_cov(delta), (B, q, q)),
        init_mean=a0,
        init_cov=P0,
    )


def _stack_diag(blocks: np.ndarray) -> np.ndarray:
    """(m, T, a, b) → (T, m·a, m·b) diagonal por bloques"""
    m, T, a, b = blocks.shape
    out = np.zeros((T, m * a, m * b))
    for i in range(m):
        out[:, i * a:(i + 1) * a, i * b:(i + 1) * b] = blocks[i]
    return out


def assemble_block_system(
    model: ModelSpec,
    effects: EffectsDesign,
    theta: np.ndarray,
    delta: np.ndarray,
    n_times: int,
) -> BlockSystem:
    """
    Sistema apilado de todo el panel (batch 1)

        T̃ = blockdiag(T(θ_i))   (o la transición conjunta del modelo)
        Z̃ = blockdiag(Z(θ_i))
        Q̃ = bloques Q en la diagonal y Σ fuera de ella
        R̃ = blockdiag(R)

    Args:
        theta: vector apilado de largo m·r o matriz (m, r)

    Raises:
        ConfigError: dimensiones incompatibles o Q − Σ no PSD
    """
    m, r, p, q = effects.m, model.r, model.p, model.q
    theta = np.asarray(theta, dtype=float)
    if theta.size != m * r:
        raise ConfigError(f"θ tiene {theta.size} componentes, se esperaban m·r = {m * r}")
    theta = theta.reshape(m, r)
    delta = np.asarray(delta, dtype=float)

    if model.block_transition_fn is not None:
        if model.t_prime is None:
            big = model.block_transition_fn(theta, 1)
            transition = np.broadcast_to(big, (n_times,) + big.shape)
        else:
            check_t_prime(model.t_prime, n_times)
            transition = np.stack([model.block_transition_fn(theta, t) for t in range(1, n_times + 1)])
    else:
        transition = _stack_diag(model.transition_stack(theta, n_times))
    observation = _stack_diag(model.observation_stack(theta, n_times))

    Q = model.state_noise_cov(delta)
    Sigma = model.cross_cov(delta)
    if Sigma is None:
        Q_tilde = np.kron(np.eye(m), Q)
    else:
        Q_tilde = swarm_state_cov(Q, Sigma, m)
    R_tilde = np.kron(np.eye(m), model.obs_noise_cov(delta))

    a0, P0 = model.initial_state(theta, delta)
    return BlockSystem(
        transition=np.asarray(transition)[None],
        observation=observation[None],
        state_cov=Q_tilde[None],
        obs_cov=R_tilde[None],
        init_mean=a0.reshape(1, m * p),
        init_cov=block_diag(*P0)[None],
    )
