"""Command line entry point.

    fedadg run        [--config FILE] [--<key> VALUE ...] [--jobs N] [--parallel-clients]
    fedadg ablation   ...
    fedadg fixed-ref  ...
    fedadg rp-sweep   --ratios 0.25,0.5,1,2 ...
    fedadg dump-data  --out FILE ...

Every config key is also a flag (underscores become dashes). On failure the
process exits non-zero and prints a JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import harness
from .config import ConfigError, ExperimentConfig, load_config
from .domains import dump_csv, make_split
from .protocol import TrainingDiverged

log = logging.getLogger("fedadg")

EXIT_CONFIG = 2
EXIT_RUNTIME = 1


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML file of config keys")
    g = p.add_argument_group("config overrides")
    for f in fields(ExperimentConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest=f"cfg_{f.name}", default=None,
                       metavar=f.name.upper(), help=f"override {f.name}")
    p.add_argument("--jobs", type=int, default=1, help="worker processes across (target, seed) runs")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedadg", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one configuration over all targets and seeds")
    _add_config_flags(p)
    p.add_argument("--parallel-clients", action="store_true", help="run clients of a round in threads")

    p = sub.add_parser("ablation", help="FedAvg / w/o RP / w/o one-hot / FedADG table")
    _add_config_flags(p)

    p = sub.add_parser("fixed-ref", help="fixed reference distributions against the generated one")
    _add_config_flags(p)

    p = sub.add_parser("rp-sweep", help="target accuracy against projection size")
    _add_config_flags(p)
    p.add_argument("--ratios", default="0.25,0.5,1,2", help="comma-separated rp_dim / feature_dim ratios")

    p = sub.add_parser("dump-data", help="write the configured domains to CSV")
    _add_config_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=None, help="data seed (default: first configured seed)")
    return parser


def _config_from_args(args) -> ExperimentConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return load_config(args.config, overrides)


def _emit_error(kind: str, exc: BaseException, code: int) -> int:
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config_from_args(args)
    except (ConfigError, OSError) as exc:
        return _emit_error("config", exc, EXIT_CONFIG)

    try:
        if args.command == "run":
            out = harness.run_experiment(cfg, jobs=args.jobs, parallel_clients=args.parallel_clients)
            print(json.dumps({"run_dir": str(out), "config_hash": cfg.hash()}))
        elif args.command == "ablation":
            table = harness.ablation_suite(cfg, jobs=args.jobs)
            print(table.to_text())
        elif args.command == "fixed-ref":
            table = harness.fixed_reference_suite(cfg, jobs=args.jobs)
            print(table.to_text())
        elif args.command == "rp-sweep":
            ratios = [float(r) for r in args.ratios.split(",") if r.strip()]
            path, _ = harness.rp_sweep(cfg, ratios, jobs=args.jobs)
            print(json.dumps({"curve_csv": str(path)}))
        elif args.command == "dump-data":
            seed = cfg.seeds[0] if args.seed is None else args.seed
            split = make_split(cfg.suite, cfg.domain_params, 0, samples=cfg.samples_per_domain,
                               noise=cfg.data_noise, seed=seed, num_classes=cfg.num_classes,
                               input_dim=cfg.input_dim)
            datasets = sorted(split.sources + [split.target], key=lambda d: d.domain_id)
            args.out.parent.mkdir(parents=True, exist_ok=True)
            dump_csv(args.out, datasets)
            print(json.dumps({"csv": str(args.out), "domains": len(datasets)}))
    except TrainingDiverged as exc:
        return _emit_error("diverged", exc, EXIT_RUNTIME)
    except (ValueError, OSError) as exc:
        return _emit_error(type(exc).__name__, exc, EXIT_RUNTIME)
    return 0


if __name__ == "__main__":
    sys.exit(main())
