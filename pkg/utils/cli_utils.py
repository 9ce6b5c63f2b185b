# utils/cli_utils.py

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from utils.errors import ConfigError, FSLabError
from utils.experiment_utils import (
    GENERATORS,
    STATISTICS,
    SYSTEMS,
    ExperimentRunner,
    apply_overrides,
    build_sequence,
    load_config,
    parse_config,
    run_experiment,
)
from utils.io_utils import write_json, write_sequence_binary, write_sequence_csv
from utils.sequence_utils import besicovitch_mean

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_ERROR = 2


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="TOML experiment config")
    common.add_argument("--out", type=str, help="output directory (default: results)")
    common.add_argument("--threads", type=int, help="worker threads for FFTs and pools")
    common.add_argument("--no-cache", action="store_true", help="bypass the autocorrelation cache")
    common.add_argument("--log-averaging", action="store_true", help="logarithmic instead of Cesaro averages")
    common.add_argument("--verbose", "-v", action="store_true")
    common.add_argument("--quiet", "-q", action="store_true")
    return common


def _sequence_flags() -> argparse.ArgumentParser:
    seq = argparse.ArgumentParser(add_help=False)
    seq.add_argument("--generator", "-g", choices=GENERATORS, default="liouville")
    seq.add_argument("--N", "-N", type=int)
    seq.add_argument("--seed", type=int, default=0)
    seq.add_argument("--alpha", type=float, help="skew generator angle")
    seq.add_argument("--L", type=int, help="skew generator piece count")
    seq.add_argument("--t", type=float, help="archimedean frequency")
    seq.add_argument("--r", type=float, help="power decay exponent")
    seq.add_argument("--q", type=int, help="root of unity order")
    seq.add_argument("--a", type=int, help="root of unity numerator")
    seq.add_argument("--input", type=str, help="sequence file for the 'file' generator")
    return seq


def _system_flags() -> argparse.ArgumentParser:
    system = argparse.ArgumentParser(add_help=False)
    system.add_argument("--system", choices=SYSTEMS, default="circle")
    system.add_argument("--sys-alpha", type=float, default=0.0)
    system.add_argument("--sys-beta", type=float, default=0.0)
    system.add_argument("--sys-a", type=float, default=0.0)
    system.add_argument("--sys-b", type=float, default=0.0)
    system.add_argument("--sys-c", type=float, default=0.0)
    system.add_argument("--observable", type=str)
    system.add_argument("--x0", type=float, nargs="*", default=[])
    return system


def build_parser() -> argparse.ArgumentParser:
    common, seq, system = _common_flags(), _sequence_flags(), _system_flags()
    parser = argparse.ArgumentParser(prog="fslab", description="Empirical Furstenberg-system experiments")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen", parents=[common, seq], help="generate a sequence file")
    gen.add_argument("--format", choices=["csv", "binary"], default="csv")

    auto = commands.add_parser("autocorr", parents=[common, seq], help="autocorrelation table")
    auto.add_argument("--H", type=int, required=True)

    stat = commands.add_parser("stat", parents=[common, seq], help="one statistic")
    stat.add_argument("--name", choices=STATISTICS, required=True)
    stat.add_argument("--H", type=int)
    stat.add_argument("--Q", type=int)
    stat.add_argument("--lag-L", dest="lag_L", type=int, help="window L of relative_vn")
    stat.add_argument("--qs", type=int, nargs="*", default=[])
    stat.add_argument("--theta", type=float, nargs="*", default=[])
    stat.add_argument("--grid", type=int)

    spectral = commands.add_parser("spectral", parents=[common, seq], help="spectral atom summary")
    spectral.add_argument("--H", type=int, required=True)
    spectral.add_argument("--grid", type=int)
    spectral.add_argument("--qs", type=int, nargs="*", default=[])

    orth = commands.add_parser("orth", parents=[common, seq, system], help="orthogonality to an orbit")
    orth.add_argument("--Ns", type=int, nargs="+", required=True)

    momo = commands.add_parser("momo", parents=[common, seq, system], help="strong MOMO test")
    momo.add_argument("--K", type=int)
    momo.add_argument("--schedule", choices=["square", "msv"], default="square")
    momo.add_argument("--restarts", choices=["random", "orbit"], default="random")
    momo.add_argument("--restart-seed", type=int, default=0)

    join = commands.add_parser("join", parents=[common, seq], help="self-joining pipeline")
    join.add_argument("--target", type=str, required=True)
    join.add_argument("--Ns", type=int, nargs="+", required=True)
    join.add_argument("--quantization", choices=["signs", "phase_bins", "value_set"], default="signs")
    join.add_argument("--bins", type=int, default=16)
    join.add_argument("--with-rotation", action="store_true")
    join.add_argument("--projection-M", type=int)

    commands.add_parser("run", parents=[common], help="run a full TOML config")
    return parser


def _sequence_payload(args: argparse.Namespace) -> Dict[str, Any]:
    payload: Dict[str, Any] = {"generator": args.generator, "seed": args.seed}
    for key in ("N", "alpha", "L", "t", "r", "q", "a"):
        value = getattr(args, key, None)
        if value is not None:
            payload[key] = value
    if args.input:
        payload["path"] = args.input
    return payload


def _system_payload(args: argparse.Namespace) -> Dict[str, Any]:
    payload = {
        "kind": args.system,
        "alpha": args.sys_alpha,
        "beta": args.sys_beta,
        "a": args.sys_a,
        "b": args.sys_b,
        "c": args.sys_c,
        "x0": args.x0,
    }
    if args.observable:
        payload["observable"] = args.observable
    return payload


def _config_from_args(args: argparse.Namespace):
    if args.command == "run" or args.config:
        if not args.config:
            raise ConfigError("the run command needs --config", field="config")
        config = load_config(args.config)
    else:
        payload: Dict[str, Any] = {"sequence": _sequence_payload(args)}
        if args.command == "stat":
            stat = {"name": args.name, "q": args.qs, "theta": args.theta}
            for key, value in (("H", args.H), ("Q", args.Q), ("L", args.lag_L), ("grid", args.grid)):
                if value is not None:
                    stat[key] = value
            payload["statistics"] = [stat]
        elif args.command == "spectral":
            stats: List[Dict[str, Any]] = [{"name": "wiener_atom_mass", "H": args.H}]
            if args.grid:
                stats[0]["grid"] = args.grid
            if args.qs:
                stats.append({"name": "rational_atom_mass", "H": args.H, "q": args.qs})
            payload["statistics"] = stats
        elif args.command == "orth":
            payload["systems"] = [dict(_system_payload(args), test="orthogonality", Ns=args.Ns)]
        elif args.command == "momo":
            system = dict(_system_payload(args), test="strong_momo", schedule=args.schedule,
                          restarts=args.restarts, seed=args.restart_seed)
            if args.K is not None:
                system["K"] = args.K
            payload["systems"] = [system]
        elif args.command == "join":
            joining = {"target": args.target, "Ns": args.Ns, "quantization": args.quantization,
                       "bins": args.bins, "with_rotation": args.with_rotation}
            if args.projection_M:
                joining["projection_M"] = args.projection_M
            payload["joining"] = joining
        config = parse_config(payload)
    return apply_overrides(config, out=args.out, threads=args.threads,
                           no_cache=args.no_cache, log_averaging=args.log_averaging)


def _emit(payload: Dict[str, Any]):
    print(json.dumps(payload, sort_keys=True))


def _run_gen(args: argparse.Namespace, config) -> int:
    u = build_sequence(config.sequence, config.output.threads)
    out_dir = Path(config.output.dir)
    if args.format == "binary":
        path = write_sequence_binary(out_dir / "sequence.fsl", u)
    else:
        path = write_sequence_csv(out_dir / "sequence.csv", u)
    _emit({"label": u.label, "N": len(u), "hash": u.content_hash(), "besicovitch_mean": besicovitch_mean(u),
           "path": str(path)})
    return EXIT_OK


def _run_autocorr(args: argparse.Namespace, config) -> int:
    out_dir = Path(config.output.dir)
    runner = ExperimentRunner(config, out_dir)
    u = build_sequence(config.sequence, runner.workers)
    acf = runner.table(u, args.H)
    summary = {
        "H": acf.H_max,
        "N": acf.N,
        "N_prime": acf.N_prime,
        "averaging": acf.averaging,
        "sequence_hash": acf.sequence_hash,
        "gamma0": float(acf.gamma[0].real),
        "cache_hits": runner.cache.hits,
        "path": runner.artifacts[f"autocorr_H{acf.H_max}_{acf.averaging}"],
    }
    write_json(out_dir / "autocorr.json", summary)
    _emit(summary)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        config = _config_from_args(args)
        if args.command == "gen":
            return _run_gen(args, config)
        if args.command == "autocorr":
            return _run_autocorr(args, config)
        record = run_experiment(config)
    except FSLabError as e:
        logger.error(f"{args.command} failed: {e}")
        print(json.dumps(e.to_dict(), sort_keys=True), file=sys.stderr)
        return EXIT_ERROR

    for report in record.reports:
        print(report.model_dump_json())
    for stage in record.stages:
        print(stage.model_dump_json())
    for failure in record.failures:
        print(json.dumps(failure, sort_keys=True), file=sys.stderr)
    return EXIT_OK if record.success else EXIT_PARTIAL
