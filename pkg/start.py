#!/usr/bin/env python3
"""
Command-line entry point for layered porous-medium convection runs
Subcommands: eigen, steady, run, verify
"""

import argparse
import logging
import sys

from src.config import Config
from src.models import CheckpointError, ConfigurationError, LayerconError
from src.services import cli
from src.services.run_config import load_config
from src.utils import setup_logging

logger = logging.getLogger('start')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Convection in layered porous media')
    parser.add_argument('command', choices=['eigen', 'steady', 'run', 'verify'],
                        help='What to compute')
    parser.add_argument('--config', help='Run configuration file (key = value)')
    parser.add_argument('--out', help=f"Output directory (default: output.directory or {Config.OUTPUT_DIR})")
    parser.add_argument('--resume', help='Checkpoint to restart a run from')
    parser.add_argument('--quick', action='store_true',
                        help='verify: fewer steps and coarser oracles')
    parser.add_argument('--quiet', action='store_true',
                        help='Only log warnings and errors to the console')
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(quiet=args.quiet)

    config_errors = Config.validate()
    if config_errors:
        for error in config_errors:
            logger.error(f"Environment: {error}")
        return cli.EXIT_CONFIG

    if not args.config:
        parser.error(f"--config is required for {args.command}")
    if args.resume and args.command != 'run':
        parser.error('--resume only applies to run')

    try:
        config = load_config(args.config)
        out_dir = cli.out_directory(config, args.out)
        if args.command == 'eigen':
            return cli.run_eigen(config, out_dir)
        if args.command == 'steady':
            return cli.run_steady(config, out_dir)
        if args.command == 'run':
            cli.run_simulation(config, out_dir, resume=args.resume)
            return cli.EXIT_OK
        return cli.run_verify(config, out_dir, quick=args.quick)
    except (ConfigurationError, CheckpointError) as e:
        logger.error(f"{type(e).__name__}: {str(e)}")
        return cli.EXIT_CONFIG
    except (LayerconError, OSError) as e:
        logger.error(f"{type(e).__name__}: {str(e)}")
        return cli.EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
