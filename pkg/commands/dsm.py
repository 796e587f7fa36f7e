"""DSM extraction command for SAT-NGP"""
import argparse
import sys
from pathlib import Path

from services.checkpoint import load_checkpoint
from services.dsm_io import DEFAULT_CELL_SIZE, read_dsm, write_dsm
from services.evaluation import extract_dsm
from utils.decorators import command, timed


def register(subparsers) -> None:
    p = subparsers.add_parser("dsm", help="extract a DSM raster from a checkpoint",
                              description="Cast nadir rays through every cell centre and write an ESRI ASCII grid.")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--cell-size", type=float, default=DEFAULT_CELL_SIZE, help="meters (default 0.5)")
    p.add_argument("--like", type=Path, default=None, help="match the grid of an existing raster")
    p.add_argument("--out", type=Path, default=None, help="default: dsm.asc next to the checkpoint")
    p.add_argument("--dense", action="store_true", help="ignore the occupancy grid")
    p.add_argument("--chunk", type=int, default=4096)
    p.set_defaults(func=run)


@command
@timed("dsm")
def run(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    like = read_dsm(args.like) if args.like else None
    g = ckpt.config.grid
    raster = extract_dsm(ckpt.model, None if args.dense else ckpt.grid, ckpt.bounds, args.cell_size,
                         args.chunk, g.max_samples, g.min_samples, like=like)
    out = args.out or args.checkpoint.parent / "dsm.asc"
    write_dsm(raster, out)
    print(f"✓ {raster.width}x{raster.height} DSM written to {out}", file=sys.stderr)
    return 0
