"""Command-line interface.

Exit codes:
    0  success
    2  bad configuration or usage
    3  missing inputs
    4  config hash mismatch with the output directory
    5  container checksum failure
    6  malformed container or format version mismatch
    7  training divergence
    8  output directory locked by another process
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .config import ConfigError, ExperimentConfig
from .container import ChecksumMismatch, MalformedContainer
from .metaloop import MetaDivergence
from .pipeline import STAGES, HashMismatch, MissingInput, Run, RunLocked, run_stage
from .toybase import TrainingDivergence

__all__ = ["main", "build_parser", "resolve_config", "EXIT_CODES"]

EXIT_CODES = {
    "ok": 0,
    "usage": 2,
    "missing": 3,
    "hash": 4,
    "checksum": 5,
    "malformed": 6,
    "divergence": 7,
    "locked": 8,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML experiment config")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--force", action="store_true", help="recompute even if outputs exist")
    common.add_argument("--precision", choices=("f32", "f64"), help="floating-point precision")
    common.add_argument("-q", "--quiet", action="store_true", help="suppress progress output")

    parser = argparse.ArgumentParser(
        prog="icm-fusion",
        description="LoRA fusion with a meta-trained conditional VAE on a synthetic task suite.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
    sub.add_parser("run-all", parents=[common], help="run every stage in order")
    sub.add_parser("show-config", parents=[common], help="print the resolved config and its hash")
    return parser


def resolve_config(args) -> ExperimentConfig:
    """``--config`` if given, else the config echoed in ``--out``, else defaults."""
    if args.config:
        cfg = ExperimentConfig.load(args.config)
    elif args.out and os.path.exists(os.path.join(args.out, "config.yaml")):
        cfg = ExperimentConfig.load(os.path.join(args.out, "config.yaml"))
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.precision:
        cfg = replace(cfg, precision=args.precision)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def _dispatch(args) -> int:
    cfg = resolve_config(args)
    if args.command == "show-config":
        sys.stdout.write(cfg.to_yaml())
        print(f"# config hash: {cfg.config_hash()}")
        return 0
    log = (lambda msg: None) if args.quiet else (lambda msg: print(msg, flush=True))
    stages = STAGES if args.command == "run-all" else (args.command,)
    with Run(cfg, cfg.output_dir, args.force, log) as run:
        for stage in stages:
            run_stage(run, stage)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (ConfigError, FileNotFoundError) as exc:
        # FileNotFoundError here can only come from an unreadable --config path
        code, exc_ = EXIT_CODES["usage"], exc
    except MissingInput as exc:
        code, exc_ = EXIT_CODES["missing"], exc
    except HashMismatch as exc:
        code, exc_ = EXIT_CODES["hash"], exc
    except ChecksumMismatch as exc:
        code, exc_ = EXIT_CODES["checksum"], exc
    except MalformedContainer as exc:
        code, exc_ = EXIT_CODES["malformed"], exc
    except (TrainingDivergence, MetaDivergence, FloatingPointError) as exc:
        code, exc_ = EXIT_CODES["divergence"], exc
    except RunLocked as exc:
        code, exc_ = EXIT_CODES["locked"], exc
    print(f"icm-fusion: error: {exc_}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
