"""
KALMAN - Filtro de Kalman, log-verosimilitud y suavizador de perturbaciones

Inferencia exacta lineal-gaussiana para θ fijo. Todas las funciones trabajan
sobre un eje batch B (draws × individuos, partículas), de modo que un mismo
recorrido en t procesa miles de sistemas pequeños a la vez.

Convención temporal:
    x_0 ~ N(a_0, P_0)                 (estado pre-muestral)
    x_t = T_t x_{t-1} + v_t,   v_t ~ N(0, Q)
    y_t = Z_t x_t + w_t,       w_t ~ N(0, R)

Filas faltantes:
    Se reduce Z_t y R_t a las filas observadas. En los arreglos guardados
    las filas faltantes quedan con ν = 0 y F⁻¹ = 0, así el suavizador no
    recibe aporte de ellas (e_t = 0, D_t = 0 en esas filas).

Autor: Sistema
Fecha: 2026-10-17
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from messm.errors import FilterError

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
MAX_CONDITION = 1e12


# ============================================================================
# TIPOS
# ============================================================================

@dataclass(frozen=True, eq=False)
class BlockSystem:
    """
    Sistema lineal-gaussiano con eje batch

    Attributes:
        transition: (B, T, n, n), T_t lleva x_{t-1} a x_t
        observation: (B, T, k, n)
        state_cov: (B, n, n)
        obs_cov: (B, k, k)
        init_mean: (B, n) media de x_0
        init_cov: (B, n, n) covarianza de x_0
    """

    transition: np.ndarray
    observation: np.ndarray
    state_cov: np.ndarray
    obs_cov: np.ndarray
    init_mean: np.ndarray
    init_cov: np.ndarray

    @property
    def batch(self) -> int:
        return self.transition.shape[0]

    @property
    def n_times(self) -> int:
        return self.transition.shape[1]

    @property
    def n_state(self) -> int:
        return self.transition.shape[-1]

    @property
    def n_obs(self) -> int:
        return self.observation.shape[-2]

    @classmethod
    def single(
        cls,
        transition: np.ndarray,
        observation: np.ndarray,
        state_cov: np.ndarray,
        obs_cov: np.ndarray,
        init_mean: np.ndarray,
        init_cov: np.ndarray,
        n_times: int,
    ) -> "BlockSystem":
        """
        Construye un sistema invariante en el tiempo con B = 1

        Args:
            transition: (n, n)
            observation: (k, n)
            state_cov, obs_cov, init_mean, init_cov: sin eje batch
            n_times: número de periodos T
        """
        tr = np.asarray(transition, dtype=float)
        ob = np.asarray(observation, dtype=float)
        return cls(
            transition=np.broadcast_to(tr, (1, n_times) + tr.shape),
            observation=np.broadcast_to(ob, (1, n_times) + ob.shape),
            state_cov=np.asarray(state_cov, dtype=float)[None],
            obs_cov=np.asarray(obs_cov, dtype=float)[None],
            init_mean=np.asarray(init_mean, dtype=float)[None],
            init_cov=np.asarray(init_cov, dtype=float)[None],
        )

    def member(self, b: int) -> "BlockSystem":
        """Sub-sistema con solo el miembro b del batch"""
        s = slice(b, b + 1)
        return BlockSystem(
            self.transition[s], self.observation[s], self.state_cov[s],
            self.obs_cov[s], self.init_mean[s], self.init_cov[s],
        )


@dataclass(frozen=True, eq=False)
class UpdateResult:
    """Resultado de un paso de actualización (batch)"""

    x: np.ndarray        # (B, n) media filtrada
    P: np.ndarray        # (B, n, n) covarianza filtrada
    nu: np.ndarray       # (B, k) innovación
    F: np.ndarray        # (B, k, k)
    F_inv: np.ndarray    # (B, k, k)
    loglik: np.ndarray   # (B,)


@dataclass(frozen=True, eq=False)
class FilterResult:
    """
    Cantidades del filtro para t = 1..T (índice 0-based en el eje 1)

    K_t y L_t usan T_{t+1}; en t = T se toma T_T (no influye porque r_T = 0).
    """

    x_pred: np.ndarray     # (B, T, n)     x_{t|t-1}
    P_pred: np.ndarray     # (B, T, n, n)  P_{t|t-1}
    x_filt: np.ndarray     # (B, T, n)     x_{t|t}
    P_filt: np.ndarray     # (B, T, n, n)  P_{t|t}
    nu: np.ndarray         # (B, T, k)
    F: np.ndarray          # (B, T, k, k)
    F_inv: np.ndarray      # (B, T, k, k)
    K: np.ndarray          # (B, T, n, k)
    L: np.ndarray          # (B, T, n, n)
    observed: np.ndarray   # (B, T, k)
    loglik_terms: np.ndarray  # (B, T)

    @property
    def loglik(self) -> np.ndarray:
        """Log-verosimilitud por miembro del batch"""
        return self.loglik_terms.sum(axis=1)

    @property
    def n_observed(self) -> np.ndarray:
        """Número de tiempos con al menos una fila observada, por miembro"""
        return self.observed.any(axis=2).sum(axis=1)

    def to_dict(self, member: int = 0) -> dict:
        """Volcado JSON-serializable de un miembro (diagnóstico)"""
        b = member
        return {
            "loglik": float(self.loglik[b]),
            "x_pred": self.x_pred[b].tolist(),
            "P_pred": self.P_pred[b].tolist(),
            "x_filt": self.x_filt[b].tolist(),
            "P_filt": self.P_filt[b].tolist(),
            "nu": self.nu[b].tolist(),
            "F": self.F[b].tolist(),
            "K": self.K[b].tolist(),
            "L": self.L[b].tolist(),
            "observed": self.observed[b].tolist(),
        }


@dataclass(frozen=True, eq=False)
class SmootherResult:
    """
    Cantidades del suavizador de perturbaciones

    r y N tienen T+1 entradas: r[:, s] = r_s para s = 0..T, con r_T = N_T = 0.
    """

    e: np.ndarray        # (B, T, k)
    D: np.ndarray        # (B, T, k, k)
    r: np.ndarray        # (B, T+1, n)
    N: np.ndarray        # (B, T+1, n, n)
    w_hat: np.ndarray    # (B, T, k)     R e_t
    w_var: np.ndarray    # (B, T, k, k)  R − R D_t R
    v_hat: np.ndarray    # (B, T, n)     Q r_{t-1}
    v_var: np.ndarray    # (B, T, n, n)  Q − Q N_{t-1} Q
    x_smooth: np.ndarray  # (B, T, n)
    P_smooth: np.ndarray  # (B, T, n, n)
    x0_hat: np.ndarray   # (B, n)
    x0_var: np.ndarray   # (B, n, n)

    def obs_moment(self) -> np.ndarray:
        """Σ_t (e_t e_tᵀ − D_t) por miembro: (B, k, k)"""
        outer = self.e[..., :, None] * self.e[..., None, :]
        return (outer - self.D).sum(axis=1)

    def state_moment(self) -> np.ndarray:
        """Σ_{t=1..T} (r_{t-1} r_{t-1}ᵀ − N_{t-1}) por miembro: (B, n, n)"""
        r = self.r[:, :-1]
        outer = r[..., :, None] * r[..., None, :]
        return (outer - self.N[:, :-1]).sum(axis=1)

    def init_moment(self, transition: np.ndarray) -> np.ndarray:
        """
        T_1ᵀ (r_0 r_0ᵀ − N_0) T_1 por miembro: (B, n, n)

        Con U = este valor, E[(x_0 − a_0)(x_0 − a_0)ᵀ | y] = P_0 + P_0 U P_0.

        Args:
            transition: (B, T, n, n) transiciones del sistema
        """
        r0 = self.r[:, 0]
        inner = r0[..., :, None] * r0[..., None, :] - self.N[:, 0]
        T1 = np.asarray(transition)[:, 0]
        return _sym(_swap(T1) @ inner @ T1)


# ============================================================================
# FUNCIONES AUXILIARES
# ============================================================================

def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + _swap(a))


def _matvec(a: np.ndarray, v: np.ndarray) -> np.ndarray:
    return (a @ v[..., None])[..., 0]


def _invert_spd(F: np.ndarray, t: Optional[int]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Inversa y log-determinante de un batch de matrices SPD

    Returns:
        (F⁻¹, log|F|)

    Raises:
        FilterError: si algún F no es finito, no es PD o cond(F) > 1e12
    """
    k = F.shape[-1]
    if not np.all(np.isfinite(F)):
        member = int(np.argmax(~np.isfinite(F).reshape(F.shape[0], -1).all(axis=1)))
        raise FilterError(t if t is not None else -1, member, "valores no finitos")

    if k == 1:
        f = F[..., 0, 0]
        bad = f <= 0
        if bad.any():
            member = int(np.argmax(bad))
            raise FilterError(t if t is not None else -1, member, f"F = {f[member]:.3g}")
        return (1.0 / f)[..., None, None], np.log(f)

    eig = np.linalg.eigvalsh(F)
    lo, hi = eig[..., 0], eig[..., -1]
    safe_lo = np.where(lo > 0, lo, 1.0)
    cond = np.where(lo > 0, hi / safe_lo, np.inf)
    bad = cond > MAX_CONDITION
    if bad.any():
        member = int(np.argmax(bad))
        raise FilterError(t if t is not None else -1, member, f"cond = {cond[member]:.3g}")

    try:
        chol = np.linalg.cholesky(F)
    except np.linalg.LinAlgError as exc:
        raise FilterError(t if t is not None else -1, None, str(exc)) from exc
    chol_inv = np.linalg.inv(chol)
    F_inv = _swap(chol_inv) @ chol_inv
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)
    return F_inv, logdet


def predict(x: np.ndarray, P: np.ndarray, T: np.ndarray, Q: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Paso de predicción x_{t|t-1} = T x_{t-1|t-1}, P_{t|t-1} = T P Tᵀ + Q

    Args:
        x: (B, n)
        P: (B, n, n)
        T: (B, n, n)
        Q: (B, n, n) o (n, n)
    """
    return _matvec(T, x), _sym(T @ P @ _swap(T) + Q)


def update(
    x: np.ndarray,
    P: np.ndarray,
    y: np.ndarray,
    Z: np.ndarray,
    R: np.ndarray,
    t: Optional[int] = None,
) -> UpdateResult:
    """
    Paso de actualización con las filas ya reducidas a las observadas

    Args:
        x, P: predicción (B, n), (B, n, n)
        y: (B, k) observaciones
        Z: (B, k, n)
        R: (B, k, k) o (k, k)
        t: tiempo 1-based (solo para mensajes de error)
    """
    PZt = P @ _swap(Z)
    F = _sym(Z @ PZt + R)
    F_inv, logdet = _invert_spd(F, t)
    nu = y - _matvec(Z, x)
    gain = PZt @ F_inv
    x_f = x + _matvec(gain, nu)
    P_f = _sym(P - gain @ _swap(PZt))
    quad = (nu[..., None, :] @ F_inv @ nu[..., :, None])[..., 0, 0]
    loglik = -0.5 * (y.shape[-1] * LOG_2PI + logdet + quad)
    return UpdateResult(x=x_f, P=P_f, nu=nu, F=F, F_inv=F_inv, loglik=loglik)


def _check_data(system: BlockSystem, y: np.ndarray, observed: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=float)
    single = y.ndim == 2
    if single:
        y = y[None]
    if observed is None:
        observed = np.isfinite(y)
    observed = np.asarray(observed, dtype=bool)
    # (T, k) o (T,) de un único miembro; (B, T) es la máscara por celda
    if single and observed.ndim in (1, 2):
        observed = observed[None]
    if observed.shape == y.shape[:2]:
        observed = np.broadcast_to(observed[..., None], y.shape)

    expected = (system.batch, system.n_times, system.n_obs)
    if y.shape != expected or observed.shape != expected:
        raise ValueError(
            f"Dimensiones de datos {y.shape} / máscara {observed.shape} "
            f"no coinciden con el sistema {expected}"
        )
    if not np.all(np.isfinite(y[observed])):
        raise ValueError("Hay observaciones no finitas marcadas como observadas")
    return np.where(observed, y, 0.0), observed


def _with_member(err: FilterError, members: np.ndarray) -> FilterError:
    if err.member is None:
        return err
    return FilterError(err.t, int(members[err.member]))


# ============================================================================
# FILTRO
# ============================================================================

def kalman_filter(
    system: BlockSystem,
    y: np.ndarray,
    observed: Optional[np.ndarray] = None,
    init: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> FilterResult:
    """
    Filtro de Kalman hacia adelante con manejo de faltantes

    Args:
        system: sistema (batch B)
        y: (B, T, k) observaciones; NaN permitido en filas no observadas
        observed: (B, T, k) o (B, T) booleano; por defecto isfinite(y)
        init: (media, covarianza) de x_0 que reemplaza a la del sistema

    Returns:
        FilterResult con todas las cantidades por t

    Raises:
        FilterError: F_t singular (cond > 1e12) en algún t observado
    """
    y0, observed = _check_data(system, y, observed)
    B, T, k = y0.shape
    n = system.n_state
    x, P = (system.init_mean, system.init_cov) if init is None else init
    x = np.broadcast_to(np.asarray(x, dtype=float), (B, n)).copy()
    P = np.broadcast_to(np.asarray(P, dtype=float), (B, n, n)).copy()
    R = np.broadcast_to(system.obs_cov, (B, k, k))

    x_pred = np.zeros((B, T, n))
    P_pred = np.zeros((B, T, n, n))
    x_filt = np.zeros((B, T, n))
    P_filt = np.zeros((B, T, n, n))
    nu_all = np.zeros((B, T, k))
    F_all = np.zeros((B, T, k, k))
    Finv_all = np.zeros((B, T, k, k))
    ll = np.zeros((B, T))

    for t in range(T):
        x_p, P_p = predict(x, P, system.transition[:, t], system.state_cov)
        x_pred[:, t], P_pred[:, t] = x_p, P_p
        Z_t = system.observation[:, t]
        rows = observed[:, t]
        full = rows.all(axis=1)

        x_f, P_f = x_p.copy(), P_p.copy()
        if full.all():
            try:
                upd = update(x_p, P_p, y0[:, t], Z_t, R, t + 1)
            except FilterError as err:
                raise FilterError(t + 1, err.member) from err
            x_f, P_f = upd.x, upd.P
            nu_all[:, t], F_all[:, t], Finv_all[:, t], ll[:, t] = upd.nu, upd.F, upd.F_inv, upd.loglik
        else:
            idx = np.nonzero(full)[0]
            if idx.size:
                try:
                    upd = update(x_p[idx], P_p[idx], y0[idx, t], Z_t[idx], R[idx], t + 1)
                except FilterError as err:
                    raise _with_member(err, idx) from err
                x_f[idx], P_f[idx] = upd.x, upd.P
                nu_all[idx, t], F_all[idx, t], Finv_all[idx, t] = upd.nu, upd.F, upd.F_inv
                ll[idx, t] = upd.loglik

            partial = np.nonzero(rows.any(axis=1) & ~full)[0]
            for b in partial:
                sel = np.nonzero(rows[b])[0]
                mb = slice(b, b + 1)
                try:
                    upd = update(
                        x_p[mb], P_p[mb], y0[mb, t][:, sel], Z_t[mb][:, sel],
                        R[mb][:, sel][:, :, sel], t + 1,
                    )
                except FilterError as err:
                    raise FilterError(t + 1, int(b)) from err
                x_f[b], P_f[b] = upd.x[0], upd.P[0]
                nu_all[b, t, sel] = upd.nu[0]
                F_all[b, t][np.ix_(sel, sel)] = upd.F[0]
                Finv_all[b, t][np.ix_(sel, sel)] = upd.F_inv[0]
                ll[b, t] = upd.loglik[0]

        x_filt[:, t], P_filt[:, t] = x_f, P_f
        x, P = x_f, P_f

    # Ganancias K_t = T_{t+1} P_{t|t-1} Z_tᵀ F_t⁻¹ y L_t = T_{t+1} − K_t Z_t
    if T > 0:
        T_next = np.concatenate([system.transition[:, 1:], system.transition[:, -1:]], axis=1)
        Z = system.observation
        K = T_next @ (P_pred @ _swap(Z) @ Finv_all)
        L = T_next - K @ Z
    else:
        K = np.zeros((B, 0, n, k))
        L = np.zeros((B, 0, n, n))

    return FilterResult(
        x_pred=x_pred, P_pred=P_pred, x_filt=x_filt, P_filt=P_filt,
        nu=nu_all, F=F_all, F_inv=Finv_all, K=K, L=L,
        observed=np.array(observed), loglik_terms=ll,
    )


def _scalar_loglik(system: BlockSystem, y0: np.ndarray, observed: np.ndarray,
                   x: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Recursión escalar (n = k = 1) vectorizada sobre el batch"""
    phi = system.transition[:, :, 0, 0]
    z = system.observation[:, :, 0, 0]
    q = system.state_cov[:, 0, 0]
    h = system.obs_cov[:, 0, 0]
    obs = observed[:, :, 0]
    x = x[:, 0].copy()
    P = P[:, 0, 0].copy()
    total = np.zeros(system.batch)

    for t in range(system.n_times):
        x = phi[:, t] * x
        P = phi[:, t] ** 2 * P + q
        f = z[:, t] ** 2 * P + h
        o = obs[:, t]
        bad = o & ~(np.isfinite(f) & (f > 0))
        if bad.any():
            member = int(np.argmax(bad))
            raise FilterError(t + 1, member, f"F = {f[member]:.3g}")
        f_safe = np.where(o, f, 1.0)
        nu = y0[:, t, 0] - z[:, t] * x
        gain = P * z[:, t] / f_safe
        x = np.where(o, x + gain * nu, x)
        P = np.where(o, P - gain * z[:, t] * P, P)
        total += np.where(o, -0.5 * (LOG_2PI + np.log(f_safe) + nu ** 2 / f_safe), 0.0)
    return total


def loglik(
    system: BlockSystem,
    y: np.ndarray,
    observed: Optional[np.ndarray] = None,
    init: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> np.ndarray:
    """
    Log-verosimilitud por descomposición del error de predicción

    Usa una recursión escalar cuando n = k = 1 y el filtro completo en otro
    caso. No guarda cantidades intermedias.

    Returns:
        (B,) log-verosimilitud por miembro del batch (0 si no hay datos)
    """
    y0, observed = _check_data(system, y, observed)
    B = y0.shape[0]
    n, k = system.n_state, system.n_obs
    x, P = (system.init_mean, system.init_cov) if init is None else init
    x = np.broadcast_to(np.asarray(x, dtype=float), (B, n))
    P = np.broadcast_to(np.asarray(P, dtype=float), (B, n, n))
    if system.n_times == 0:
        return np.zeros(B)
    if n == 1 and k == 1:
        return _scalar_loglik(system, y0, observed, x, P)
    return kalman_filter(system, y0, observed, init=(x, P)).loglik


# ============================================================================
# SUAVIZADOR DE PERTURBACIONES
# ============================================================================

def disturbance_smoother(system: BlockSystem, filt: FilterResult) -> SmootherResult:
    """
    Recursiones hacia atrás t = T..1 con r_T = N_T = 0

        e_t     = F_t⁻¹ ν_t − K_tᵀ r_t
        D_t     = F_t⁻¹ + K_tᵀ N_t K_t
        r_{t-1} = Z_tᵀ F_t⁻¹ ν_t + L_tᵀ r_t
        N_{t-1} = Z_tᵀ F_t⁻¹ Z_t + L_tᵀ N_t L_t

    En t sin observaciones F⁻¹ = 0 y K = 0, de modo que r_{t-1} = Tᵀ r_t y
    N_{t-1} = Tᵀ N_t T.

    Args:
        system: mismo sistema usado en el filtro
        filt: resultado de kalman_filter

    Returns:
        SmootherResult
    """
    B, T, k = filt.nu.shape
    n = system.n_state

    e = np.zeros((B, T, k))
    D = np.zeros((B, T, k, k))
    r = np.zeros((B, T + 1, n))
    N = np.zeros((B, T + 1, n, n))
    r_t = np.zeros((B, n))
    N_t = np.zeros((B, n, n))

    for t in range(T - 1, -1, -1):
        F_inv = filt.F_inv[:, t]
        K = filt.K[:, t]
        L = filt.L[:, t]
        Z = system.observation[:, t]
        u = _matvec(F_inv, filt.nu[:, t])
        e[:, t] = u - _matvec(_swap(K), r_t)
        D[:, t] = _sym(F_inv + _swap(K) @ N_t @ K)
        r_t = _matvec(_swap(Z), u) + _matvec(_swap(L), r_t)
        N_t = _sym(_swap(Z) @ F_inv @ Z + _swap(L) @ N_t @ L)
        r[:, t] = r_t
        N[:, t] = N_t

    R = np.broadcast_to(system.obs_cov, (B, k, k))[:, None]
    Q = np.broadcast_to(system.state_cov, (B, n, n))[:, None]
    w_hat = _matvec(R, e)
    w_var = _sym(R - R @ D @ R)
    v_hat = _matvec(Q, r[:, :T])
    v_var = _sym(Q - Q @ N[:, :T] @ Q)
    x_smooth = filt.x_pred + _matvec(filt.P_pred, r[:, :T])
    P_smooth = _sym(filt.P_pred - filt.P_pred @ N[:, :T] @ filt.P_pred)

    a0 = np.broadcast_to(system.init_mean, (B, n))
    P0 = np.broadcast_to(system.init_cov, (B, n, n))
    if T > 0:
        # x_0 | y: a_0 + P_0 T_1ᵀ r_0
        PT = P0 @ _swap(system.transition[:, 0])
        x0_hat = a0 + _matvec(PT, r[:, 0])
        x0_var = _sym(P0 - PT @ N[:, 0] @ _swap(PT))
    else:
        x0_hat, x0_var = np.array(a0), np.array(P0)

    return SmootherResult(
        e=e, D=D, r=r, N=N, w_hat=w_hat, w_var=w_var, v_hat=v_hat, v_var=v_var,
        x_smooth=x_smooth, P_smooth=P_smooth, x0_hat=x0_hat, x0_var=x0_var,
    )
