import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from services.experiment_service import load_settings, run_experiment
from services.selftest_service import run_selftest
from utils.errors import ConfigError, HolonomyError

from .models import ExperimentConfig
from .utils import write_outputs

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_FAIL = 2

RUN_SUBCOMMANDS = ["dist", "refine", "family", "jump", "subgroup", "bs-detect", "stokes"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse raises instead of exiting so usage problems map to exit code 1."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="holonomy", description="Monte Carlo holonomy distributions of metric connections")
    sub = parser.add_subparsers(dest="subcommand", parser_class=_Parser)
    for name in RUN_SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="Experiment config (JSON)")
        p.add_argument("--seed", type=int, help="Master seed (required unless set in the config)")
        p.add_argument("--out", help="Output directory")
        p.add_argument("--workers", type=int, help="Worker processes")
        p.add_argument("--m", type=int, help="Partition size override")
        p.add_argument("--samples", type=int, help="Admissible loops per run")
        p.add_argument("--sampler", choices=["exact", "is"])
        p.add_argument("--transport", choices=["ode", "exact-u1", "ito"])
        p.add_argument("--steps-per-segment", type=int, dest="steps_per_segment")
    selftest = sub.add_parser("selftest")
    selftest.add_argument("--seed", type=int, help="Seed of the sampled checks (fixed default)")
    selftest.add_argument("--out", help="Also write the selftest report here")
    return parser


def load_config(path: str, args: argparse.Namespace) -> ExperimentConfig:
    file = Path(path)
    if not file.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(file.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}")
    for field in ("m", "samples", "sampler", "transport", "steps_per_segment"):
        value = getattr(args, field, None)
        if value is not None:
            data[field] = value
    try:
        return ExperimentConfig(**data)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"invalid config {path}: {problems}")


def cli_main(argv: Optional[List[str]] = None) -> int:
    """Exit 0 on success or verdict PASS, 2 on verdict FAIL, 1 on any error."""
    load_dotenv()
    try:
        settings = load_settings()
    except HolonomyError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_ERROR
    logging.basicConfig(level=getattr(logging, settings.log_level, logging.INFO))

    try:
        args = build_parser().parse_args(argv)
        if args.subcommand is None:
            raise UsageError(f"choose a subcommand: {', '.join(RUN_SUBCOMMANDS + ['selftest'])}")
        if args.subcommand == "selftest":
            outcome = run_selftest(args.seed)
            if args.out:
                write_outputs(outcome, args.out)
        else:
            cfg = load_config(args.config, args)
            outcome = run_experiment(args.subcommand, cfg, settings, seed=args.seed, workers=args.workers,
                                     out_dir=args.out)
    except UsageError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_ERROR
    except HolonomyError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR

    report = outcome.report
    icon = {"PASS": "✅", "FAIL": "⚠️"}.get(report.verdict, "📊")
    print(f"{icon} {report.subcommand}: {report.verdict or 'done'} ({report.runtime_seconds:.2f}s)")
    if report.summary:
        print(f"   {report.summary}")
    if report.files:
        print(f"📁 {len(report.files)} files written")
    return EXIT_FAIL if report.verdict == "FAIL" else EXIT_OK
