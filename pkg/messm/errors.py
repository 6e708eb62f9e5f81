"""
Excepciones del paquete messm

Cada excepción lleva el código de salida que usa la CLI:
    0 = OK, 1 = IO / numérico, 2 = configuración o validación,
    3 = no convergencia (no es excepción: FitResult.converged = False)

Autor: Sistema
Fecha: 2026-10-17
"""

from typing import Optional


class MessmError(Exception):
    """Error base del paquete"""

    exit_code = 1


class ConfigError(MessmError, ValueError):
    """Configuración inválida (JSON de modelo, parámetros, dimensiones)"""

    exit_code = 2


class DataFormatError(MessmError, ValueError):
    """Panel CSV mal formado; `row` es el número de fila (1-based, sin header)"""

    exit_code = 2

    def __init__(self, mensaje: str, row: Optional[int] = None):
        self.row = row
        if row is not None:
            mensaje = f"fila {row}: {mensaje}"
        super().__init__(mensaje)


class NumericalError(MessmError):
    """Fallo numérico en filtro, muestreador o partículas"""

    exit_code = 1


class FilterError(NumericalError):
    """F_t numéricamente singular"""

    def __init__(self, t: int, member: Optional[int] = None, detalle: str = ""):
        self.t = t
        self.member = member
        self.draw: Optional[int] = None
        texto = f"F_t singular en t={t}"
        if member is not None:
            texto += f" (miembro {member})"
        if detalle:
            texto += f": {detalle}"
        super().__init__(texto)

    def with_draw(self, draw: int, individual: Optional[int] = None) -> "FilterError":
        """Devuelve una copia que identifica el draw de θ que falló"""
        err = FilterError(self.t, individual if individual is not None else self.member,
                          f"draw {draw}")
        err.draw = draw
        return err


class SamplerError(NumericalError):
    """Metropolis sin aceptaciones después de la adaptación"""


class ParticleDegeneracyError(NumericalError):
    """Todos los pesos de una etapa son numéricamente cero"""

    def __init__(self, t: int, max_log_weight: float, stage: str = "primera"):
        self.t = t
        self.max_log_weight = max_log_weight
        self.stage = stage
        super().__init__(
            f"Pesos de {stage} etapa nulos en t={t} (max log-peso = {max_log_weight:.3g}); "
            "el modelo no describe estas observaciones"
        )
