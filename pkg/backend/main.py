"""
ScanLab - multiscale scan statistics for tensor databases
Command-line entry point: data generation, nets, scanning, detection,
calibration and the Monte Carlo diagnostics.
"""

import argparse
import json
import logging
import os
import sys
import traceback
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

from dotenv import load_dotenv

# Load environment variables FIRST so MSS_* defaults are visible to the services
load_dotenv()

from services.config import Settings, load_settings, read_config_file
from services.detect import (
    CalibrationCache,
    calibrate_K,
    calibration_key,
    decide,
    mc_threshold,
    theoretical_spec,
)
from services.errors import ValidationError
from services.net import (
    NetSpec,
    build_net,
    build_net_from_spec,
    calibrate_net_constants,
    gamma_for_dictionary,
    verify_net,
)
from services.patterns import Pattern, builtin_dictionary, load_dictionary
from services.scan import Geometry, ScanEngine, pamss
from services.simulate import (
    SimConfig,
    dataset_mu,
    gen_alt,
    gen_null,
    null_scans,
    scale_correction_report,
    tail_maxgauss,
    tail_scan,
)
from services.tensor_io import (
    Manifest,
    ManifestEntry,
    load_manifest,
    load_tensors,
    read_tensor,
    write_manifest,
    write_tensor,
)

logger = logging.getLogger("scanlab")


class ArgumentParser(argparse.ArgumentParser):
    """Parser that raises instead of exiting, so bad flags map to exit code 1."""

    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _configure_logging(level: Optional[str]):
    level = (level or os.getenv("MSS_LOG_LEVEL") or "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def _emit(report: Dict, args, name: str):
    if not args.deterministic:
        report = {**report, "generated_at": datetime.now(timezone.utc).isoformat()}
    text = json.dumps(report, sort_keys=True, indent=2)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / f"{name}.json", "w") as fh:
            fh.write(text + "\n")
        logger.info(f"Report written to {out_dir / f'{name}.json'}")
    else:
        sys.stdout.write(text + "\n")


def _dictionary(args, config: Dict, d: int) -> List[Pattern]:
    path = args.dict or config.get("dictionary")
    if path:
        patterns = load_dictionary(path)
        if patterns[0].d != d:
            raise ValidationError(f"Dictionary {path} has d={patterns[0].d}, data has d={d}")
        return patterns
    return builtin_dictionary(d)


def _net(args, settings: Settings, config: Dict, dictionary: List[Pattern], L: float, d: int):
    if "net" in config:
        spec = NetSpec(**config["net"])
        if spec.L != L or spec.d != d:
            raise ValidationError(f"Net spec (L={spec.L}, d={spec.d}) does not match data (L={L}, d={d})")
        return build_net_from_spec(spec, settings)
    return build_net(L, d, epsilon=settings.epsilon, gamma=gamma_for_dictionary(dictionary),
                     settings=settings, alpha=args.alpha, beta=args.beta)


def _sim_config(args, config: Dict) -> SimConfig:
    values = dict(config.get("simulation", {}))
    flags = {
        "d": args.d, "L": args.L, "R": args.R, "n": args.n, "hypothesis": args.hypothesis,
        "pattern": args.pattern, "mu": args.mu, "power_gap": args.power_gap, "h_min": args.h_min,
        "h_max": args.h_max, "noise": args.noise,
    }
    values.update({k: v for k, v in flags.items() if v is not None})
    values["seed"] = args.seed
    if "L" not in values:
        raise ValidationError("gen needs --L or a simulation section with L")
    return SimConfig(**values)


def _manifest_tensors(args):
    if not args.manifest:
        raise ValidationError(f"{args.command} needs --manifest")
    manifest = load_manifest(args.manifest)
    return manifest, load_tensors(manifest, str(Path(args.manifest).parent))


def cmd_gen(args, settings: Settings, config: Dict) -> Dict:
    sim = _sim_config(args, config)
    if not args.out:
        raise ValidationError("gen needs --out for the dataset directory")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    planted = None
    if sim.hypothesis == "H1":
        planted = next((f for f in _dictionary(args, config, sim.d) if f.name == sim.pattern), None)
        if planted is None:
            raise ValidationError(f"Pattern '{sim.pattern}' is not in the dictionary")

    mu = dataset_mu(sim, planted) if planted is not None else None
    entries, truths = [], []
    for i in range(sim.n):
        if planted is None:
            field, truth = gen_null(sim, i), None
        else:
            field, truth = gen_alt(sim, planted, i, mu=mu)
        name = f"tensor_{i:04d}.msst"
        write_tensor(field, str(out_dir / name))
        entries.append(ManifestEntry(path=name, provenance={"kind": field.provenance["kind"], "index": i},
                                     ground_truth=truth.model_dump() if truth else None))
        if truth:
            truths.append({"path": name, **truth.model_dump()})

    manifest = Manifest(geometry=sim.geometry, entries=entries,
                        seed_lineage={"seed": sim.seed, "command": "gen", "config": sim.model_dump()})
    write_manifest(manifest, str(out_dir / "manifest.json"))
    if args.csv and truths:
        import pandas as pd

        pd.DataFrame(truths).to_csv(out_dir / "ground_truth.csv", index=False)
    logger.info(f"Wrote {sim.n} tensors to {out_dir}")
    return {"manifest": "manifest.json", "tensors": sim.n, "geometry": sim.geometry.model_dump(),
            "hypothesis": sim.hypothesis}


def cmd_net(args, settings: Settings, config: Dict) -> Dict:
    d = args.d or 1
    L = args.L or config.get("net", {}).get("L")
    if L is None:
        raise ValidationError("net needs --L or a net section")
    dictionary = _dictionary(args, config, d)
    return _net(args, settings, config, dictionary, L, d).summary()


def cmd_scan(args, settings: Settings, config: Dict) -> Dict:
    if not args.tensor:
        raise ValidationError("scan needs --tensor")
    X = read_tensor(args.tensor)
    dictionary = _dictionary(args, config, X.d)
    net = _net(args, settings, config, dictionary, X.L, X.d)
    results = ScanEngine(dictionary, net, X.geometry, settings).prepare().scan_all(X)
    best = max(results, key=lambda r: r.statistic)
    return {"tensor": args.tensor, "results": [r.report() for r in results], "best_pattern": best.pattern}


def _threshold(args, settings, config, geometry, dictionary, net, n):
    if args.method == "theoretical":
        K = args.K
        if K is None and args.cache:
            cached = CalibrationCache(args.cache).get(calibration_key(geometry, dictionary, net, n))
            K = cached.K if cached else None
        if K is None:
            raise ValidationError("theoretical thresholds need --K or a calibration cache entry (--cache)")
        return theoretical_spec(n, len(dictionary), args.delta, geometry.L, K)
    return mc_threshold(geometry, dictionary, net, n, args.delta, args.reps, args.seed, settings)


def _detect(args, settings: Settings, config: Dict):
    manifest, tensors = _manifest_tensors(args)
    dictionary = _dictionary(args, config, manifest.geometry.d)
    net = _net(args, settings, config, dictionary, manifest.geometry.L, manifest.geometry.d)
    result = pamss(tensors, dictionary, net, settings)
    threshold = _threshold(args, settings, config, manifest.geometry, dictionary, net, len(tensors))
    return manifest, decide(result, threshold)


def cmd_detect(args, settings: Settings, config: Dict) -> Dict:
    _, report = _detect(args, settings, config)
    return report.report()


def cmd_learn(args, settings: Settings, config: Dict) -> Dict:
    manifest, report = _detect(args, settings, config)
    estimates = [
        {"path": entry.path, "t": r.argmax_t, "h": r.argmax_h, "statistic": r.statistic}
        for entry, r in zip(manifest.entries, report.pamss.per_tensor)
    ]
    return {**report.report(), "learned": {"pattern": report.pamss.best_pattern, "estimates": estimates}}


def _geometry(args, config: Dict):
    if args.manifest:
        manifest = load_manifest(args.manifest)
        return manifest.geometry, args.n or len(manifest.entries)
    sim = config.get("simulation", {})
    L = args.L or sim.get("L")
    if L is None:
        raise ValidationError(f"{args.command} needs --manifest or --L")
    geometry = Geometry(d=args.d or sim.get("d", 1), L=L, R=args.R or sim.get("R", 16))
    return geometry, args.n or sim.get("n", 1)


def cmd_calibrate(args, settings: Settings, config: Dict) -> Dict:
    geometry, n = _geometry(args, config)
    dictionary = _dictionary(args, config, geometry.d)
    net = _net(args, settings, config, dictionary, geometry.L, geometry.d)
    if args.what == "K":
        calibration = calibrate_K(geometry, dictionary, net, n, args.reps, args.seed, settings)
        if args.cache:
            CalibrationCache(args.cache).put(calibration)
        return calibration.model_dump()
    spec = mc_threshold(geometry, dictionary, net, n, args.delta, args.reps, args.seed, settings)
    return spec.model_dump()


def _pattern(args, config: Dict, d: int) -> Pattern:
    dictionary = _dictionary(args, config, d)
    name = args.pattern or dictionary[0].name
    match = next((f for f in dictionary if f.name == name), None)
    if match is None:
        raise ValidationError(f"Pattern '{name}' is not in the dictionary ({', '.join(f.name for f in dictionary)})")
    return match


def cmd_verify_net(args, settings: Settings, config: Dict) -> Dict:
    d = args.d or 1
    L = args.L or 32.0
    epsilon = settings.epsilon
    if args.calibrate:
        # without --pattern the constants must cover the whole dictionary
        targets = [_pattern(args, config, d)] if args.pattern else _dictionary(args, config, d)
        return calibrate_net_constants(targets, L, d, epsilon, trials=args.trials, seed=args.seed,
                                       settings=settings)
    f = _pattern(args, config, d)
    net = build_net(L, d, epsilon=epsilon, gamma=gamma_for_dictionary([f]), settings=settings,
                    alpha=args.alpha, beta=args.beta)
    return verify_net(net, f, epsilon, trials=args.trials, seed=args.seed, R=settings.resolution).model_dump()


def cmd_diagnose_tails(args, settings: Settings, config: Dict) -> Dict:
    if args.kind == "maxgauss":
        return tail_maxgauss(args.N, reps=args.reps, seed=args.seed).model_dump()

    d = args.d or 1
    L = args.L or 256.0
    geometry = Geometry(d=d, L=L, R=args.R or settings.resolution)
    f = _pattern(args, config, d)
    net = _net(args, settings, config, [f], L, d)
    scans = null_scans(geometry, f, net, args.reps, args.seed, settings, progress=not args.deterministic)
    report = {"scale_correction": scale_correction_report(geometry, f, net, scans=scans).model_dump()}
    if args.kind == "scan":
        report["tail"] = tail_scan(f, L, net, reps=args.reps, seed=args.seed, R=geometry.R,
                                   settings=settings, scans=scans).model_dump()
    return report


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="base seed for all random streams")
    common.add_argument("--config", help="JSON config file (settings, simulation, net, dictionary)")
    common.add_argument("--out", help="directory for reports (and datasets for gen)")
    common.add_argument("--jobs", type=int, default=None, help="worker threads (default: MSS_JOBS or 1)")
    common.add_argument("--deterministic", action="store_true", help="omit timestamps from reports")
    common.add_argument("--log-level", default=None, help="logging level (default: MSS_LOG_LEVEL or INFO)")
    common.add_argument("--dict", help="dictionary JSON file (default: built-in dictionary)")
    common.add_argument("--epsilon", type=float, default=None, help="net covering radius")
    common.add_argument("--alpha", type=float, default=None, help="explicit lattice spacing factor")
    common.add_argument("--beta", type=float, default=None, help="explicit scale ratio")
    common.add_argument("--resolution", type=int, default=None, help="cells per unit length")

    parser = ArgumentParser(prog="scanlab", description="Multiscale scan statistics for tensor databases")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    def geometry_flags(p):
        p.add_argument("--d", type=int, default=None)
        p.add_argument("--L", type=float, default=None)
        p.add_argument("--R", type=int, default=None)
        p.add_argument("--n", type=int, default=None)

    gen = sub.add_parser("gen", parents=[common], help="generate an H0/H1 dataset")
    geometry_flags(gen)
    gen.add_argument("--hypothesis", choices=["H0", "H1"], default=None)
    gen.add_argument("--pattern", default=None)
    gen.add_argument("--mu", type=float, default=None)
    gen.add_argument("--power-gap", dest="power_gap", type=float, default=None,
                     help="size mu from the drawn scales: zero-gap amplitude plus this gap")
    gen.add_argument("--h-min", dest="h_min", type=float, default=None)
    gen.add_argument("--h-max", dest="h_max", type=float, default=None)
    gen.add_argument("--noise", choices=["gaussian", "rademacher"], default=None)
    gen.add_argument("--csv", action="store_true", help="also write ground_truth.csv")
    gen.set_defaults(handler=cmd_gen)

    net = sub.add_parser("net", parents=[common], help="build and summarize a net")
    geometry_flags(net)
    net.set_defaults(handler=cmd_net)

    scan = sub.add_parser("scan", parents=[common], help="scan one tensor against the dictionary")
    scan.add_argument("--tensor", required=False)
    scan.set_defaults(handler=cmd_scan)

    for name, handler in (("detect", cmd_detect), ("learn", cmd_learn)):
        p = sub.add_parser(name, parents=[common], help=f"{name} on a manifest")
        p.add_argument("--manifest")
        p.add_argument("--method", choices=["mc", "theoretical"], default="mc")
        p.add_argument("--delta", type=float, default=0.05)
        p.add_argument("--reps", type=int, default=200)
        p.add_argument("--K", type=float, default=None)
        p.add_argument("--cache", help="calibration cache file")
        p.set_defaults(handler=handler)

    calibrate = sub.add_parser("calibrate", parents=[common], help="Monte Carlo threshold or K calibration")
    geometry_flags(calibrate)
    calibrate.add_argument("--manifest")
    calibrate.add_argument("--what", choices=["threshold", "K"], default="threshold")
    calibrate.add_argument("--delta", type=float, default=0.05)
    calibrate.add_argument("--reps", type=int, default=200)
    calibrate.add_argument("--cache", help="calibration cache file")
    calibrate.set_defaults(handler=cmd_calibrate)

    verify = sub.add_parser("verify-net", parents=[common], help="Monte Carlo coverage check of a net")
    geometry_flags(verify)
    verify.add_argument("--pattern", default=None)
    verify.add_argument("--trials", type=int, default=200)
    verify.add_argument("--calibrate", action="store_true", help="search (C_alpha, C_beta)")
    verify.set_defaults(handler=cmd_verify_net)

    tails = sub.add_parser("diagnose-tails", parents=[common], help="tail and scale-correction diagnostics")
    geometry_flags(tails)
    tails.add_argument("--kind", choices=["maxgauss", "scan", "scale"], default="maxgauss")
    tails.add_argument("--N", type=int, default=10_000)
    tails.add_argument("--reps", type=int, default=100_000)
    tails.add_argument("--pattern", default=None)
    tails.set_defaults(handler=cmd_diagnose_tails)

    return parser


def cli(argv: Optional[List[str]] = None) -> int:
    """
    Run one subcommand.

    Returns:
        0 on success, 1 on validation errors, 2 on runtime errors
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # --help and --version
        return int(e.code or 0)
    except ValueError as e:
        sys.stderr.write(f"{e}\n")
        return 1

    _configure_logging(args.log_level)
    try:
        settings = load_settings(args.config, jobs=args.jobs, resolution=args.resolution, epsilon=args.epsilon)
        config = read_config_file(args.config)
        report = args.handler(args, settings, config)
        _emit(report, args, args.command)
        return 0
    except ValueError as e:
        logger.error(f"Validation error: {e}")
        return 1
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        logger.debug(traceback.format_exc())
        return 2


def main():
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
