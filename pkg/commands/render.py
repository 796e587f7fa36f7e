"""Novel-view rendering command for SAT-NGP"""
import argparse
import json
import sys
from pathlib import Path

from services.checkpoint import load_checkpoint
from services.dataset import ImageRecord, read_manifest, write_image
from services.errors import ConfigError
from services.geometry import sun_vector
from services.renderer import render_image
from utils.decorators import command, timed


def register(subparsers) -> None:
    p = subparsers.add_parser("render", help="render a view from a checkpoint",
                              description="Render a manifest view (--manifest/--view) or a standalone view "
                                          "spec JSON holding camera/rpc, width, height and sun angles.")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--out", type=Path, required=True, help="output image (.png or .f32)")
    p.add_argument("--manifest", type=Path, default=None)
    p.add_argument("--view", type=int, default=None, help="view index in --manifest")
    p.add_argument("--view-spec", type=Path, default=None, help="standalone view JSON")
    p.add_argument("--sun-azimuth", type=float, default=None, help="relight: override the sun azimuth (deg)")
    p.add_argument("--sun-elevation", type=float, default=None, help="relight: override the sun elevation (deg)")
    p.add_argument("--dense", action="store_true", help="ignore the occupancy grid")
    p.add_argument("--chunk", type=int, default=4096)
    p.set_defaults(func=run)


def resolve_view(args: argparse.Namespace) -> ImageRecord:
    if args.view_spec is not None:
        if not args.view_spec.exists():
            raise FileNotFoundError(f"view spec not found: {args.view_spec}")
        try:
            data = json.loads(args.view_spec.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.view_spec}: invalid JSON at line {e.lineno}, column {e.colno}")
        data.setdefault("img", args.out.name)
        return ImageRecord.from_dict(data, args.view_spec.parent, 0)
    if args.manifest is None or args.view is None:
        raise ConfigError("give either --view-spec or --manifest with --view", "view")
    manifest = read_manifest(args.manifest)
    if not 0 <= args.view < len(manifest.images):
        raise ConfigError(f"view {args.view} outside [0, {len(manifest.images)})", "view")
    return manifest.images[args.view]


@command
@timed("render")
def run(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    record = resolve_view(args)
    az = record.sun_azimuth if args.sun_azimuth is None else args.sun_azimuth
    el = record.sun_elevation if args.sun_elevation is None else args.sun_elevation
    grid = None if args.dense else ckpt.grid
    g = ckpt.config.grid
    rendered = render_image(record.camera, sun_vector(az, el), ckpt.model, grid, ckpt.bounds,
                            record.height, record.width, args.chunk, g.max_samples, g.min_samples)
    write_image(args.out, rendered.rgb)
    print(f"✓ {record.width}x{record.height} view rendered to {args.out} "
          f"({rendered.samples_per_ray:.1f} samples/ray)", file=sys.stderr)
    return 0
