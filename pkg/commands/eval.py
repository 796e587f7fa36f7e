"""Metric command for SAT-NGP: prints one machine-parsable line on stdout"""
import argparse
import logging
import math
from pathlib import Path

from services.dataset import read_image, read_mask
from services.dsm_io import read_dsm
from services.errors import ConfigError
from services.evaluation import mae, psnr, transient_residue
from utils.decorators import command

log = logging.getLogger(__name__)


def register(subparsers) -> None:
    p = subparsers.add_parser("eval", help="compare a prediction with a reference",
                              description="PSNR between images (.png / .f32), MAE between DSMs (.asc), or the "
                                          "transient residue inside a mask.")
    p.add_argument("pred", type=Path)
    p.add_argument("ref", type=Path)
    p.add_argument("--metric", choices=["psnr", "mae", "residue"], default=None,
                   help="default: mae for .asc inputs, psnr otherwise")
    p.add_argument("--height", type=int, default=None, help="height of .f32 images")
    p.add_argument("--width", type=int, default=None, help="width of .f32 images")
    p.add_argument("--align-median", action="store_true", help="remove the median altitude offset before MAE")
    p.add_argument("--mask", type=Path, default=None, help="transient mask PNG for --metric residue")
    p.set_defaults(func=run)


def format_psnr(value: float) -> str:
    return "PSNR=infdB" if math.isinf(value) else f"PSNR={value:.3f}dB"


@command
def run(args: argparse.Namespace) -> int:
    metric = args.metric or ("mae" if args.pred.suffix.lower() == ".asc" else "psnr")
    if metric == "mae":
        value, count = mae(read_dsm(args.pred), read_dsm(args.ref), args.align_median)
        log.info("MAE over %d cells", count)
        print(f"MAE={value:.3f}m")
        return 0
    pred = read_image(args.pred, args.height, args.width)
    ref = read_image(args.ref, args.height, args.width)
    if metric == "psnr":
        print(format_psnr(psnr(pred, ref)))
        return 0
    if args.mask is None:
        raise ConfigError("--metric residue needs --mask", "mask")
    if not args.mask.exists():
        raise FileNotFoundError(f"mask not found: {args.mask}")
    print(f"RESIDUE={transient_residue(pred, ref, read_mask(args.mask)):.4f}")
    return 0
