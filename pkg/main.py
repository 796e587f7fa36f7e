#!/usr/bin/env python3
"""
SAT-NGP - satellite neural radiance fields with multi-resolution hash encoding
Command-line entry point: one command module per pipeline stage
"""
import argparse
import logging
import os
import sys
from typing import List, Optional

import torch

# Import commands
from commands import dsm, eval as eval_command, render, synth, train

from services.errors import ConfigError
from services.run_config import resolve_threads

COMMANDS = (synth, train, render, dsm, eval_command)
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def create_parser() -> argparse.ArgumentParser:
    """Create the argument parser and register every command"""
    parser = argparse.ArgumentParser(
        prog="satngp",
        description="Fit hash-encoded radiance fields to satellite views and extract surface models.",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help="cap torch and loader threads (fallback: SATNGP_THREADS)")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="{synth,train,render,dsm,eval}")

    # Register commands
    for module in COMMANDS:
        module.register(subparsers)
    return parser


def configure_logging(verbose: bool = False) -> None:
    level = "DEBUG" if verbose else os.getenv("SATNGP_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)
    logging.getLogger().setLevel(level)


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point"""
    args = create_parser().parse_args(argv)
    configure_logging(args.verbose)

    try:
        args.threads = resolve_threads(args.threads)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    if args.threads:
        torch.set_num_threads(args.threads)

    print(f"🛰️  SAT-NGP {args.command}", file=sys.stderr)
    print(f"🧵 Threads: {args.threads or torch.get_num_threads()}"
          f"{'' if args.threads else ' (torch default)'}", file=sys.stderr)
    out = getattr(args, "out", None)
    if out is not None:
        print(f"📁 Output: {out}", file=sys.stderr)

    return args.func(args)


if __name__ == '__main__':
    sys.exit(main())
