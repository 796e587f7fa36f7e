"""Training command for SAT-NGP"""
import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List

from services.dataset import load_dataset
from services.errors import ConfigError
from services.run_config import load_run_config, write_effective_config
from services.training import train
from utils.decorators import command, timed


def register(subparsers) -> None:
    p = subparsers.add_parser("train", help="fit a field to a scene manifest",
                              description="Train on a manifest; writes config.json, model.satngp and "
                                          "metrics.csv to the run directory.")
    p.add_argument("manifest", type=Path, help="scene manifest JSON")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--config", type=Path, default=None, help="run config JSON")
    p.add_argument("--preset", choices=["desk"], default=None, help="scaled configuration preset")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--steps-per-epoch", type=int, default=None, help="default: one pass over all training rays")
    p.add_argument("--batch-rays", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-robust", action="store_true", help="plain MSE (unit weights for every ray)")
    p.add_argument("--patch-sampling", action="store_true", help="16x16 patch batches for the robust loss")
    p.add_argument("--save-optimizer", action="store_true", help="store RAdam moments in the checkpoint")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config value (repeatable), VALUE parsed as JSON when possible")
    p.set_defaults(func=run)


def parse_overrides(items: List[str]) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"override must look like section.key=value, got {item!r}", key or item)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def cli_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    flags = {
        "train.epochs": args.epochs,
        "train.steps_per_epoch": args.steps_per_epoch,
        "train.batch_rays": args.batch_rays,
        "train.seed": args.seed,
        "train.robust": False if args.no_robust else None,
        "train.patch_sampling": True if args.patch_sampling else None,
        "train.save_optimizer": True if args.save_optimizer else None,
    }
    out = parse_overrides(args.overrides)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


@command
@timed("train")
def run(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, cli_overrides(args), args.preset)
    write_effective_config(cfg, args.out)
    dataset = load_dataset(args.manifest, getattr(args, "threads", None))
    result = train(dataset, cfg, args.out)
    print(f"✓ {result.steps} steps, checkpoint {result.checkpoint}", file=sys.stderr)
    return 0
