"""
ENTRADA / SALIDA - Panel CSV, JSON versionados, trayectorias y manifiesto

Lectura:  pandas (tolerante, detecta separador) → polars → PanelData
Escritura: polars para CSV, json para reportes (schema 1)

Formato del panel (largo, una fila por (individuo, t, componente)):
    individual  entero ≥ 0
    t           entero ≥ 1
    component   entero ≥ 0 (opcional; 0 si no existe la columna)
    value       número; vacío si no observado
    observed    0/1 (también true/false)

Autor: Sistema
Fecha: 2026-10-17
"""

import json
import logging
import re
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd
import polars as pl

from messm.errors import DataFormatError
from messm.model import PanelData
from messm.posterior import ThetaSamples
from messm.simulate import TruthRecord

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

PANEL_COLUMNS = ["individual", "t", "component", "value", "observed"]
REQUIRED_COLUMNS = ["individual", "t", "value", "observed"]
TRUE_VALUES = {"1", "true", "t", "yes", "si", "sí"}
FALSE_VALUES = {"0", "false", "f", "no"}
NULL_VALUES = {"", "nan", "na", "null", "none"}


# ============================================================================
# LECTURA DEL PANEL
# ============================================================================

def detect_separator(path: PathLike) -> str:
    """';' si la primera línea tiene más ';' que ',' (archivos exportados desde Excel)"""
    with open(path, "r", encoding="utf-8-sig") as f:
        primera_linea = f.readline()
    return ";" if primera_linea.count(";") > primera_linea.count(",") else ","


def _read_raw(path: PathLike) -> pl.DataFrame:
    separador = detect_separator(path)
    logger.debug(f"Separador detectado en {path}: '{separador}'")
    try:
        df_pandas = pd.read_csv(
            path,
            sep=separador,
            encoding="utf-8-sig",
            dtype=str,
            keep_default_na=False,
            engine="python",
        )
    except pd.errors.EmptyDataError:
        raise DataFormatError(f"{path}: archivo vacío") from None
    except pd.errors.ParserError as exc:
        # pandas informa la línea del archivo (el header es la línea 1)
        match = re.search(r"line (\d+)", str(exc))
        row = int(match.group(1)) - 1 if match else None
        raise DataFormatError(f"{path}: número de campos incorrecto", row) from exc
    df = pl.from_pandas(df_pandas)
    return df.rename({c: c.strip().lower() for c in df.columns})


def _first_bad_row(df: pl.DataFrame, bad: pl.Expr) -> Optional[int]:
    malas = df.filter(bad)
    return None if malas.is_empty() else int(malas["fila"][0])


def _parse_int(df: pl.DataFrame, column: str, minimum: int) -> pl.DataFrame:
    parsed = pl.col(column).str.strip_chars().cast(pl.Int64, strict=False)
    df = df.with_columns(parsed.alias(f"_{column}"))
    row = _first_bad_row(df, pl.col(f"_{column}").is_null() | (pl.col(f"_{column}") < minimum))
    if row is not None:
        raise DataFormatError(f"'{column}' debe ser entero ≥ {minimum}", row)
    return df


def _parse_observed(df: pl.DataFrame) -> pl.DataFrame:
    texto = pl.col("observed").str.strip_chars().str.to_lowercase()
    df = df.with_columns(
        pl.when(texto.is_in(list(TRUE_VALUES))).then(True)
        .when(texto.is_in(list(FALSE_VALUES))).then(False)
        .otherwise(None)
        .alias("_observed")
    )
    row = _first_bad_row(df, pl.col("_observed").is_null())
    if row is not None:
        raise DataFormatError("'observed' debe ser 0/1 o true/false", row)
    return df


def _parse_value(df: pl.DataFrame) -> pl.DataFrame:
    texto = pl.col("value").str.strip_chars()
    es_nulo = texto.str.to_lowercase().is_in(list(NULL_VALUES))
    df = df.with_columns(
        es_nulo.alias("_vacio"),
        pl.when(es_nulo).then(None).otherwise(texto.cast(pl.Float64, strict=False)).alias("_value"),
    )
    row = _first_bad_row(df, ~pl.col("_vacio") & pl.col("_value").is_null())
    if row is not None:
        raise DataFormatError("'value' no es numérico", row)
    row = _first_bad_row(df, pl.col("_observed") & (pl.col("_value").is_null() | pl.col("_value").is_infinite()))
    if row is not None:
        raise DataFormatError("fila observada sin valor finito", row)
    return df


def read_panel(path: PathLike) -> PanelData:
    """
    Lee un panel CSV en formato largo

    Las celdas (i, t) sin filas se consideran no observadas. Todas las
    componentes de una misma celda deben compartir el indicador 'observed'.

    Args:
        path: archivo CSV (separador ',' o ';')

    Returns:
        PanelData de forma (m, T, q)

    Raises:
        DataFormatError: columnas faltantes, valores inválidos, duplicados
            o indicadores inconsistentes (incluye el número de fila)
        OSError: archivo ilegible
    """
    df = _read_raw(path)
    faltantes = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    if faltantes:
        raise DataFormatError(f"{path}: faltan columnas {faltantes} (se esperan {PANEL_COLUMNS})")
    if df.is_empty():
        raise DataFormatError(f"{path}: el panel no tiene filas")
    if "component" not in df.columns:
        df = df.with_columns(pl.lit("0").alias("component"))

    df = df.with_row_index("fila", offset=1)
    df = _parse_int(df, "individual", 0)
    df = _parse_int(df, "t", 1)
    df = _parse_int(df, "component", 0)
    df = _parse_observed(df)
    df = _parse_value(df)

    row = _first_bad_row(df, ~pl.struct("_individual", "_t", "_component").is_first_distinct())
    if row is not None:
        raise DataFormatError("celda (individual, t, component) repetida", row)

    inconsistentes = (
        df.group_by("_individual", "_t")
        .agg(pl.col("_observed").n_unique().alias("n"), pl.col("fila").max())
        .filter(pl.col("n") > 1)
        .sort("fila")
    )
    if not inconsistentes.is_empty():
        raise DataFormatError("componentes de una misma celda con distinto 'observed'",
                              int(inconsistentes["fila"][0]))

    ind = df["_individual"].to_numpy()
    tt = df["_t"].to_numpy() - 1
    comp = df["_component"].to_numpy()
    m, T, q = int(ind.max()) + 1, int(tt.max()) + 1, int(comp.max()) + 1

    y = np.full((m, T, q), np.nan)
    mask = np.zeros((m, T), dtype=bool)
    observed = df["_observed"].to_numpy().astype(bool)
    y[ind[observed], tt[observed], comp[observed]] = df["_value"].to_numpy()[observed]
    mask[ind[observed], tt[observed]] = True

    completas = np.isfinite(y).all(axis=2)
    if np.any(mask & ~completas):
        i, t = np.argwhere(mask & ~completas)[0]
        raise DataFormatError(f"individuo {i}, t={t + 1}: faltan componentes observadas")

    sin_datos = np.flatnonzero(~mask.any(axis=1))
    if sin_datos.size:
        logger.warning(f"⚠️  {sin_datos.size} individuos sin observaciones: {sin_datos[:10].tolist()}")
    logger.info(f"✓ Panel leído: m={m}, T={T}, q={q}, celdas observadas {int(mask.sum()):,}/{m * T:,}")
    return PanelData(y=y, mask=mask)


def read_theta(path: PathLike) -> np.ndarray:
    """θ por individuo desde JSON {"schema": 1, "theta": [[...], ...]} (p.ej. truth.json)"""
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    if data.get("schema") != 1 or "theta" not in data:
        raise DataFormatError(f"{path}: se espera un JSON schema 1 con la clave 'theta'")
    return np.atleast_2d(np.asarray(data["theta"], dtype=float))


# ============================================================================
# ESCRITURA
# ============================================================================

def _json_default(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"No serializable: {type(obj).__name__}")


def write_json(obj: Dict[str, Any], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, ensure_ascii=False, default=_json_default)
        f.write("\n")
    return path


def panel_frame(data: PanelData) -> pl.DataFrame:
    m, T, q = data.y.shape
    ii, tt, cc = np.meshgrid(np.arange(m), np.arange(1, T + 1), np.arange(q), indexing="ij")
    observed = data.observed_rows()
    columnas = {
        "individual": ii.ravel(),
        "t": tt.ravel(),
        "component": cc.ravel(),
        "value": data.y.ravel(),
        "observed": observed.ravel().astype(np.int8),
    }
    return pl.DataFrame(columnas).with_columns(pl.col("value").fill_nan(None))


def write_panel(data: PanelData, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    panel_frame(data).write_csv(path)
    return path


def write_truth(truth: TruthRecord, path: PathLike) -> Path:
    return write_json(truth.to_dict(), path)


def write_frame(df: pl.DataFrame, path: PathLike) -> Path:
    """CSV de trayectorias, tablas de estudio y traza"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.write_csv(path)
    return path


def write_trace(trace: List[Dict[str, float]], path: PathLike) -> Path:
    return write_frame(pl.DataFrame(trace), path)


def draws_frame(samples: ThetaSamples) -> pl.DataFrame:
    """Una fila por draw, una columna theta_<individuo>_<componente>"""
    M, m, r = samples.draws.shape
    names = [f"theta_{i}_{k}" for i in range(m) for k in range(r)]
    return pl.DataFrame(samples.stacked, schema=names, orient="row")


def write_draws(samples: ThetaSamples, path: PathLike) -> Path:
    return write_frame(draws_frame(samples), path)


# ============================================================================
# MANIFIESTO
# ============================================================================

@dataclass
class RunManifest:
    """
    Registro auditable de una corrida de la CLI

    Se escribe antes de cualquier cómputo (status "running") y se actualiza
    al final con la lista de archivos generados.
    """

    subcommand: str
    config: Optional[str]
    seed: Optional[int]
    out_dir: str
    version: str
    timestamp: str = field(default_factory=lambda: datetime.now().isoformat(timespec="seconds"))
    status: str = "running"
    outputs: List[str] = field(default_factory=list)
    inputs: Dict[str, str] = field(default_factory=dict)

    FILENAME = "manifest.json"

    @property
    def path(self) -> Path:
        return Path(self.out_dir) / self.FILENAME

    def to_dict(self) -> Dict[str, Any]:
        return {"schema": 1, **asdict(self)}

    def write(self) -> Path:
        return write_json(self.to_dict(), self.path)

    def add(self, path: PathLike) -> Path:
        path = Path(path)
        nombre = str(path.relative_to(self.out_dir)) if path.is_relative_to(self.out_dir) else str(path)
        if nombre not in self.outputs:
            self.outputs.append(nombre)
        return path

    def finish(self, status: str) -> Path:
        self.status = status
        return self.write()
