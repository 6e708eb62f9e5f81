"""
CLI - python -m messm <subcomando>

Subcomandos:
    simulate   genera paneles y verdad latente desde un JSON de simulación
    fit        ajusta Δ por EM Monte Carlo (--method em) o cuasi-Newton (--method score)
    filter     estima estados con MKF-KS y compara contra Kalman oráculo / plug-in
    study      estudio de simulación sobre una grilla (m, T)
    report     tabla de parámetros y errores estándar de un ajuste

Códigos de salida:
    0 OK, 1 IO / numérico, 2 configuración o datos inválidos, 3 sin convergencia

Uso:
    python -m messm simulate --config sim.json --out runs/sim
    python -m messm fit --method em --data runs/sim/panel.csv --model model.json --init init.json --out runs/fit
    python -m messm filter --data runs/sim/panel.csv --model model.json --params runs/fit/fit_result.json --out runs/filter
    python -m messm study --config study.json --out runs/study
    python -m messm report --fit runs/fit/fit_result.json --information runs/fit/information.json

Autor: Sistema
Fecha: 2026-10-17
"""

import argparse
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from messm import __version__
from messm import config as cfg
from messm import io
from messm.em import draw_samples, fit_em
from messm.errors import ConfigError, MessmError
from messm.kalman import kalman_filter
from messm.mkfks import run_filter
from messm.model import (
    EffectsDesign,
    ModelSpec,
    PanelData,
    ParameterVector,
    assemble_block_system,
    check_t_prime,
    individual_systems,
)
from messm.score import fit_quasi_newton, observed_information
from messm.simulate import run_study, simulate_panel

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_UNCONVERGED = 3


# ============================================================================
# LOGGING
# ============================================================================

def configurar_logging(out_dir: Optional[Path], verbose: bool = False) -> Optional[Path]:
    """
    Handlers de consola y archivo (<out>/logs/messm_<timestamp>.log)

    Returns:
        ruta del log, o None si solo hay consola
    """
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    log_file = None
    if out_dir is not None:
        log_file = cfg.log_dir(out_dir) / f"messm_{datetime.now().strftime('%Y%m%d_%H%M%S')}.log"
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handlers.insert(0, logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s [%(levelname)s] %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        handlers=handlers,
        force=True,
    )
    return log_file


# ============================================================================
# AUXILIARES
# ============================================================================

def _settings(args: argparse.Namespace, model_json: Dict[str, Any]) -> Dict[str, Any]:
    """Secciones em / mcmc / filter: las del modelo, reemplazadas por --settings"""
    secciones = {k: model_json.get(k) for k in ("em", "mcmc", "filter")}
    if getattr(args, "settings", None):
        extra = cfg.read_json(args.settings)
        secciones.update({k: extra[k] for k in ("em", "mcmc", "filter") if k in extra})
    return secciones


def _seed(args: argparse.Namespace, section: Optional[Dict[str, Any]]) -> int:
    base = args.seed if args.seed is not None else int((section or {}).get("seed", 0))
    return cfg.env_seed(base)


def _load_problem(args: argparse.Namespace):
    """Panel + modelo compatible + secciones de configuración"""
    data = io.read_panel(args.data)
    model_json = cfg.read_json(args.model)
    model, effects = cfg.model_factory(model_json)(data.m)
    if data.q != model.q:
        raise ConfigError(f"El panel tiene q={data.q} componentes y el modelo espera q={model.q}")
    if model.t_prime is not None:
        check_t_prime(model.t_prime, data.n_times)
    return data, model, effects, _settings(args, model_json)


def _kalman_dump(data: PanelData, model: ModelSpec, effects: EffectsDesign,
                 params: ParameterVector, theta: np.ndarray) -> Dict[str, Any]:
    if model.independent:
        system = individual_systems(model, theta, params.delta, data.n_times)
        filt = kalman_filter(system, data.y, data.observed_rows())
        members = [filt.to_dict(i) for i in range(data.m)]
    else:
        y, rows = data.stacked()
        system = assemble_block_system(model, effects, theta, params.delta, data.n_times)
        members = [kalman_filter(system, y, rows).to_dict(0)]
    return {"schema": 1, "theta": theta, "params": params.as_dict(), "members": members}


# ============================================================================
# SUBCOMANDOS
# ============================================================================

def cmd_simulate(args: argparse.Namespace, manifest: io.RunManifest) -> int:
    sim = cfg.load_sim_config(args.config, args.seed)
    manifest.seed = sim.seed
    manifest.write()
    out = Path(args.out)

    logger.info(f"🚀 Simulando {sim.replications} réplica(s): m={sim.m}, T={sim.n_times}, "
                f"modelo={sim.model.kind}, seed={sim.seed}")
    for rep in range(sim.replications):
        data, truth = simulate_panel(sim, rep)
        sufijo = "" if sim.replications == 1 else f"_rep{rep:03d}"
        manifest.add(io.write_panel(data, out / f"panel{sufijo}.csv"))
        manifest.add(io.write_truth(truth, out / f"truth{sufijo}.json"))
        logger.info(f"   ✓ Réplica {rep}: {int(data.mask.sum()):,} celdas observadas de {data.m * data.n_times:,}")
    return EXIT_OK


def cmd_fit(args: argparse.Namespace, manifest: io.RunManifest) -> int:
    data, model, effects, secciones = _load_problem(args)
    seed = _seed(args, secciones["em"])
    known = io.read_theta(args.known_theta) if args.known_theta else None
    fit_cfg = cfg.fit_config(secciones["em"], secciones["mcmc"], seed, args.threads, known)
    params0 = cfg.load_params(args.init, model, effects)
    manifest.seed = seed
    manifest.write()
    out = Path(args.out)

    logger.info(f"🚀 Ajuste {args.method.upper()}: m={data.m}, T={data.n_times}, modelo={model.kind}")
    fit = fit_em if args.method == "em" else fit_quasi_newton
    result = fit(data, model, effects, params0, fit_cfg)

    manifest.add(io.write_json(result.to_dict(), out / "fit_result.json"))
    manifest.add(io.write_trace(result.trace, out / "trace.csv"))

    if args.information:
        info = observed_information(data, model, effects, result.params, fit_cfg)
        manifest.add(io.write_json(info.to_dict(), out / "information.json"))
    if args.dump_draws:
        samples = draw_samples(data, model, effects, result.params, fit_cfg, result.n_iter + 1)
        manifest.add(io.write_draws(samples, out / "draws.csv"))
    if args.dump_kalman:
        theta = known if known is not None else effects.mean_theta(result.params.fixed_effects)
        manifest.add(io.write_json(_kalman_dump(data, model, effects, result.params, theta),
                                   out / "kalman.json"))

    logger.info("=" * 80)
    logger.info("📊 PARÁMETROS ESTIMADOS")
    for nombre, valor in result.params.as_dict().items():
        logger.info(f"   {nombre:<12} {valor: .6f}")
    logger.info(f"⏱️  {result.n_iter} iteraciones, {result.wall_clock:.1f}s")
    logger.info("=" * 80)
    if not result.converged:
        logger.warning("⚠️  Ajuste sin convergencia; resultados escritos igualmente")
        return EXIT_UNCONVERGED
    return EXIT_OK


def cmd_filter(args: argparse.Namespace, manifest: io.RunManifest) -> int:
    data, model, effects, secciones = _load_problem(args)
    seed = _seed(args, secciones["filter"])
    params = cfg.load_params(args.params, model, effects)
    particles = cfg.particle_config(secciones["filter"], seed, args.threads)
    manifest.seed = seed
    manifest.write()
    out = Path(args.out)

    oracle = io.read_theta(args.oracle_theta) if args.oracle_theta else None
    plugin = None
    if args.plugin:
        fit_cfg = cfg.fit_config(secciones["em"], secciones["mcmc"], seed, args.threads)
        plugin = draw_samples(data, model, effects, params, fit_cfg, 0).draws.mean(axis=0)

    logger.info(f"🚀 MKF-KS: M={particles.n_particles}, h={particles.h}, m={data.m}, T={data.n_times}")
    report = run_filter(data, model, effects, params, particles, oracle_theta=oracle, plugin_theta=plugin)
    manifest.add(io.write_frame(report.trajectory, out / "trajectory.csv"))
    manifest.add(io.write_json(report.mse, out / "mse.json"))

    logger.info("=" * 80)
    logger.info(f"📊 MSE mediano de predicción MKF-KS: {report.mse['mkfks']['median']:.5g}")
    for clave in ("oracle_kf", "plugin_kf"):
        if clave in report.mse:
            logger.info(f"   {clave}: {report.mse[clave]['median']:.5g}")
    logger.info(f"   Cobertura 95 %: {report.mse['coverage']:.3f}")
    logger.info("=" * 80)
    return EXIT_OK


def cmd_study(args: argparse.Namespace, manifest: io.RunManifest) -> int:
    study = cfg.load_study_config(args.config, threads=args.threads, seed=args.seed)
    manifest.seed = study.seed
    manifest.write()
    out = Path(args.out)

    result = run_study(study)
    manifest.add(io.write_frame(result.table, out / "study_table.csv"))
    manifest.add(io.write_frame(result.replications, out / "replications.csv"))

    logger.info("=" * 80)
    logger.info("📊 TABLA DEL ESTUDIO")
    logger.info("\n" + str(result.table))
    logger.info("=" * 80)
    return EXIT_OK


def format_report(fit: Dict[str, Any], information: Optional[Dict[str, Any]] = None) -> str:
    """Tabla de texto: parámetro, estimación y error estándar"""
    se = (information or {}).get("se") or {}
    lineas = [
        "=" * 80,
        f"📊 AJUSTE {str(fit.get('method', '')).upper()}  "
        f"(convergió: {'sí' if fit.get('converged') else 'no'}, iteraciones: {fit.get('n_iter')})",
        "=" * 80,
        f"{'Parámetro':<14}{'Estimate':>14}{'SE':>14}",
    ]
    for nombre, valor in fit["params"].items():
        texto_se = f"{se[nombre]:>14.5f}" if nombre in se else f"{'-':>14}"
        lineas.append(f"{nombre:<14}{valor:>14.5f}{texto_se}")
    if information and information.get("se") is None:
        lineas.append("⚠️  Información observada no definida positiva; sin errores estándar")
    lineas.append("=" * 80)
    return "\n".join(lineas)


def cmd_report(args: argparse.Namespace, manifest: Optional[io.RunManifest]) -> int:
    fit = cfg.read_json(args.fit)
    if "params" not in fit:
        raise ConfigError(f"{args.fit} no contiene 'params'")
    information = cfg.read_json(args.information) if args.information else None
    print(format_report(fit, information))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "filter": cmd_filter,
    "study": cmd_study,
    "report": cmd_report,
}


# ============================================================================
# ARGUMENTOS
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="messm",
        description="Modelos de espacio de estados con efectos mixtos: simulación, ajuste y filtrado",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Ejemplos:
  python -m messm simulate --config sim.json --out runs/sim
  python -m messm fit --method em --data panel.csv --model model.json --init init.json --out runs/fit
  python -m messm filter --data panel.csv --model model.json --params runs/fit/fit_result.json --out runs/filter
  python -m messm study --config study.json --out runs/study
  python -m messm report --fit runs/fit/fit_result.json

Variables de entorno: MESSM_SEED, MESSM_THREADS, MESSM_LOG_DIR, MESSM_M_DRAWS,
MESSM_BURN_IN, MESSM_THIN, MESSM_ENV_FILE (ver .env.template)
        """,
    )
    parser.add_argument("--version", action="version", version=f"messm {__version__}")

    comunes = argparse.ArgumentParser(add_help=False)
    comunes.add_argument("--threads", type=int, default=None,
                         help="Hilos de cómputo (por defecto MESSM_THREADS o núcleos disponibles)")
    comunes.add_argument("--verbose", action="store_true", help="Log en nivel DEBUG")

    salida = argparse.ArgumentParser(add_help=False)
    salida.add_argument("--out", required=True, help="Carpeta de salida")
    salida.add_argument("--seed", type=int, default=None,
                        help="Semilla (reemplaza la del archivo; MESSM_SEED tiene prioridad)")

    problema = argparse.ArgumentParser(add_help=False)
    problema.add_argument("--data", required=True, help="Panel CSV (individual, t, component, value, observed)")
    problema.add_argument("--model", required=True, help="JSON del modelo (schema 1)")
    problema.add_argument("--settings", default=None,
                          help="JSON con secciones em / mcmc / filter (reemplaza las del modelo)")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[comunes, salida], help="Simula paneles")
    p.add_argument("--config", required=True, help="JSON de simulación")

    p = sub.add_parser("fit", parents=[comunes, salida, problema], help="Ajusta Δ")
    p.add_argument("--method", choices=["em", "score"], default="em", help="Estimador")
    p.add_argument("--init", required=True, help="JSON de parámetros iniciales")
    p.add_argument("--known-theta", default=None, help="JSON con 'theta' conocido (p.ej. truth.json)")
    p.add_argument("--information", action="store_true", help="Escribe information.json con errores estándar")
    p.add_argument("--dump-draws", action="store_true", help="Escribe draws.csv de θ en Δ̂")
    p.add_argument("--dump-kalman", action="store_true", help="Escribe kalman.json del filtro en Ψâ")

    p = sub.add_parser("filter", parents=[comunes, salida, problema], help="Filtra con MKF-KS")
    p.add_argument("--params", required=True, help="JSON de parámetros o fit_result.json")
    p.add_argument("--oracle-theta", default=None, help="JSON con 'theta' verdadero (truth.json)")
    p.add_argument("--plugin", action="store_true", help="Agrega el Kalman con θ̂ = media posterior")

    p = sub.add_parser("study", parents=[comunes, salida], help="Estudio de simulación")
    p.add_argument("--config", required=True, help="JSON de estudio")

    p = sub.add_parser("report", parents=[comunes], help="Resumen de un ajuste")
    p.add_argument("--fit", required=True, help="fit_result.json")
    p.add_argument("--information", default=None, help="information.json")

    return parser


# ============================================================================
# MAIN
# ============================================================================

def main(argv: Optional[List[str]] = None) -> int:
    """
    Punto de entrada

    Returns:
        código de salida (0, 1, 2 o 3)
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg.load_environment()
    try:
        args.threads = args.threads or cfg.default_threads()
    except ConfigError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(args.out) if hasattr(args, "out") else None
    manifest = None
    try:
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
        log_file = configurar_logging(out_dir, args.verbose)
        if out_dir is not None:
            manifest = io.RunManifest(
                subcommand=args.command,
                config=getattr(args, "config", None) or getattr(args, "model", None),
                seed=args.seed,
                out_dir=str(out_dir),
                version=__version__,
                inputs={k: str(v) for k, v in vars(args).items()
                        if k in ("config", "data", "model", "init", "params", "settings",
                                 "known_theta", "oracle_theta") and v},
            )
            manifest.write()
            logger.debug(f"Log: {log_file}")
    except OSError as exc:
        print(f"❌ No se pudo preparar la salida: {exc}", file=sys.stderr)
        return EXIT_IO

    try:
        code = COMMANDS[args.command](args, manifest)
    except MessmError as exc:
        logger.error(f"❌ {type(exc).__name__}: {exc}")
        code = exc.exit_code
    except OSError as exc:
        logger.error(f"❌ Error de lectura/escritura: {exc}")
        code = EXIT_IO
    except np.linalg.LinAlgError as exc:
        logger.error(f"❌ Error numérico: {exc}")
        code = EXIT_IO
    except ValueError as exc:
        logger.error(f"❌ Datos inválidos: {exc}")
        code = EXIT_CONFIG

    if manifest is not None:
        status = {EXIT_OK: "ok", EXIT_UNCONVERGED: "unconverged"}.get(code, "failed")
        try:
            manifest.finish(status)
        except OSError as exc:
            logger.error(f"❌ No se pudo actualizar el manifiesto: {exc}")
            code = code or EXIT_IO
    return code


if __name__ == "__main__":
    sys.exit(main())
