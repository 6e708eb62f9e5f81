#!/usr/bin/env python3
"""
PIPELINE MAESTRO - Corre de punta a punta simulación, ajuste y filtrado

Pasos:
1. Simular un panel (configs/ar_noise_sim.json)
2. Ajustar Δ por EM Monte Carlo con información observada
3. Filtrar con MKF-KS usando Δ̂ y comparar contra el Kalman oráculo
4. Reporte del ajuste

Uso:
    python pipeline_maestro.py              # Ejecutar todo
    python pipeline_maestro.py --dry-run    # Mostrar comandos sin ejecutar
    python pipeline_maestro.py --step 2     # Ejecutar solo paso 2

Autor: Sistema
Fecha: 2026-10-17
"""

import argparse
import logging
import subprocess
import sys
from datetime import datetime
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

BASE_DIR = Path(__file__).parent
CONFIG_DIR = BASE_DIR / "configs"
RUNS_DIR = BASE_DIR / "runs"

load_dotenv(BASE_DIR / ".env")

log_file = RUNS_DIR / "logs" / f"pipeline_{datetime.now().strftime('%Y%m%d_%H%M%S')}.log"
log_file.parent.mkdir(parents=True, exist_ok=True)

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s [%(levelname)s] %(message)s",
    datefmt="%Y-%m-%d %H:%M:%S",
    handlers=[
        logging.FileHandler(log_file, encoding="utf-8"),
        logging.StreamHandler(sys.stdout),
    ],
)
logger = logging.getLogger(__name__)

# Código 3 = ajuste sin convergencia: los resultados existen y el pipeline sigue
EXIT_UNCONVERGED = 3


# ============================================================================
# FUNCIONES AUXILIARES
# ============================================================================

def verificar_configuracion() -> bool:
    """
    Verifica archivos de configuración y dependencias

    Returns:
        True si todo OK, False si falta algo
    """
    logger.info("=" * 80)
    logger.info("🔍 VERIFICANDO CONFIGURACIÓN")
    logger.info("=" * 80)

    errores = []
    for nombre in ("ar_noise_sim.json", "ar_noise_model.json", "ar_noise_init.json"):
        if (CONFIG_DIR / nombre).exists():
            logger.info(f"✓ {nombre} encontrado")
        else:
            errores.append(f"Falta configs/{nombre}")

    if not (BASE_DIR / ".env").exists():
        logger.warning("⚠️  .env no encontrado; se usan valores por defecto (ver .env.template)")

    logger.info("\nVerificando dependencias Python...")
    for dep in ("numpy", "scipy", "polars", "pandas", "pyarrow", "dotenv", "messm"):
        try:
            __import__(dep)
            logger.info(f"✓ {dep} instalado")
        except ImportError:
            errores.append(f"Dependencia {dep} no instalada. Ejecuta: pip install -r requirements.txt")

    logger.info("\n" + "=" * 80)
    if errores:
        logger.error("❌ ERRORES DE CONFIGURACIÓN:")
        for error in errores:
            logger.error(f"  - {error}")
        logger.info("=" * 80)
        return False
    logger.info("✅ CONFIGURACIÓN CORRECTA")
    logger.info("=" * 80)
    return True


def ejecutar_comando(args: List[str], descripcion: str, dry_run: bool = False) -> int:
    """
    Ejecuta `python -m messm <args>`

    Returns:
        código de salida (0 en dry-run)
    """
    logger.info("\n" + "=" * 80)
    logger.info(f"▶️  {descripcion}")
    logger.info("=" * 80)

    cmd = [sys.executable, "-m", "messm", *args]
    logger.info(f"Comando: {' '.join(cmd)}\n")
    if dry_run:
        logger.info("⏭️  DRY-RUN: no se ejecuta")
        return 0

    try:
        result = subprocess.run(cmd, cwd=BASE_DIR, capture_output=False, text=True)
    except OSError as e:
        logger.error(f"\n❌ Error ejecutando {descripcion}: {e}")
        return 1

    if result.returncode == 0:
        logger.info(f"\n✅ {descripcion} - COMPLETADO")
    elif result.returncode == EXIT_UNCONVERGED:
        logger.warning(f"\n⚠️  {descripcion} - SIN CONVERGENCIA (resultados escritos)")
    else:
        logger.error(f"\n❌ {descripcion} - ERROR (Exit code: {result.returncode})")
    return result.returncode


# ============================================================================
# PIPELINE PRINCIPAL
# ============================================================================

def definir_pasos(run_dir: Path) -> List[dict]:
    sim_dir, fit_dir, filter_dir = run_dir / "sim", run_dir / "fit", run_dir / "filter"
    panel = str(sim_dir / "panel.csv")
    model = str(CONFIG_DIR / "ar_noise_model.json")
    return [
        {
            "num": 1,
            "desc": "PASO 1: Simular panel",
            "args": ["simulate", "--config", str(CONFIG_DIR / "ar_noise_sim.json"), "--out", str(sim_dir)],
        },
        {
            "num": 2,
            "desc": "PASO 2: Ajuste EM Monte Carlo",
            "args": ["fit", "--method", "em", "--data", panel, "--model", model,
                     "--init", str(CONFIG_DIR / "ar_noise_init.json"), "--information",
                     "--out", str(fit_dir)],
        },
        {
            "num": 3,
            "desc": "PASO 3: Filtrado MKF-KS",
            "args": ["filter", "--data", panel, "--model", model,
                     "--params", str(fit_dir / "fit_result.json"),
                     "--oracle-theta", str(sim_dir / "truth.json"), "--plugin",
                     "--out", str(filter_dir)],
        },
        {
            "num": 4,
            "desc": "PASO 4: Reporte del ajuste",
            "args": ["report", "--fit", str(fit_dir / "fit_result.json"),
                     "--information", str(fit_dir / "information.json")],
        },
    ]


def ejecutar_pipeline(dry_run: bool = False, solo_paso: Optional[int] = None,
                      run_dir: Optional[Path] = None) -> int:
    """
    Ejecuta el pipeline completo

    Args:
        dry_run: solo muestra los comandos
        solo_paso: ejecuta solo ese paso (1-4)
        run_dir: carpeta de la corrida (por defecto runs/<timestamp>)

    Returns:
        0 si todos los pasos terminaron (con o sin convergencia), 1 si alguno falló
    """
    inicio = datetime.now()
    run_dir = run_dir or RUNS_DIR / inicio.strftime("%Y%m%d_%H%M%S")

    logger.info("=" * 80)
    logger.info("🚀 PIPELINE MESSM - SIMULACIÓN + AJUSTE + FILTRADO")
    logger.info("=" * 80)
    logger.info(f"Inicio: {inicio.strftime('%Y-%m-%d %H:%M:%S')}")
    logger.info(f"Modo: {'DRY-RUN' if dry_run else 'EJECUCIÓN'}")
    logger.info(f"Carpeta de la corrida: {run_dir}")
    if solo_paso:
        logger.info(f"Ejecutando solo paso: {solo_paso}")
    logger.info(f"Log guardado en: {log_file}")
    logger.info("=" * 80)

    if not verificar_configuracion():
        logger.error("\n❌ PIPELINE ABORTADO - Corrige los errores de configuración")
        return 1

    pasos = definir_pasos(run_dir)
    if solo_paso:
        pasos = [p for p in pasos if p["num"] == solo_paso]

    exitosos = 0
    fallidos = 0
    for paso in pasos:
        codigo = ejecutar_comando(paso["args"], paso["desc"], dry_run)
        if codigo in (0, EXIT_UNCONVERGED):
            exitosos += 1
        else:
            fallidos += 1
            # Los pasos siguientes dependen de las salidas de este
            logger.warning("Pipeline detenido: los pasos siguientes requieren esta salida")
            break

    duracion = datetime.now() - inicio
    logger.info("\n" + "=" * 80)
    logger.info("📊 RESUMEN DEL PIPELINE")
    logger.info("=" * 80)
    logger.info(f"Pasos ejecutados: {exitosos + fallidos}")
    logger.info(f"✅ Exitosos: {exitosos}")
    logger.info(f"❌ Fallidos: {fallidos}")
    logger.info(f"⏱️  Duración: {duracion}")
    logger.info(f"📁 Resultados: {run_dir}")
    logger.info("=" * 80)

    if fallidos == 0:
        logger.info("✅ PIPELINE COMPLETADO EXITOSAMENTE")
        if dry_run:
            logger.info("\n💡 Para ejecutar:")
            logger.info("   python pipeline_maestro.py")
        return 0
    logger.error("❌ PIPELINE COMPLETADO CON ERRORES")
    logger.error("   Revisa el log y manifest.json de cada paso")
    return 1


# ============================================================================
# MAIN
# ============================================================================

def main():
    parser = argparse.ArgumentParser(
        description="Pipeline maestro de messm: simular → ajustar → filtrar → reportar",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Ejemplos:
  python pipeline_maestro.py                  # Ejecutar todo
  python pipeline_maestro.py --dry-run        # Mostrar comandos
  python pipeline_maestro.py --step 2 --run-dir runs/demo   # Solo el ajuste
        """,
    )
    parser.add_argument("--dry-run", action="store_true", help="Mostrar comandos sin ejecutar")
    parser.add_argument("--step", type=int, choices=[1, 2, 3, 4],
                        help="Ejecutar solo un paso (1=simular, 2=ajustar, 3=filtrar, 4=reporte)")
    parser.add_argument("--run-dir", type=Path, default=None,
                        help="Carpeta de la corrida (necesaria con --step para reutilizar salidas)")
    args = parser.parse_args()

    sys.exit(ejecutar_pipeline(dry_run=args.dry_run, solo_paso=args.step, run_dir=args.run_dir))


if __name__ == "__main__":
    main()
