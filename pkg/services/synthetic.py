"""
Synthetic satellite scenes with exact ground truth.

A value-noise heightfield (plus a few flat-roofed blocks) is imaged by
orthographic-oblique cameras. Each pixel shows albedo * (s + (1 - s) * l_sky)
where s is 1 when the surface point sees the sun over the heightfield and 0
otherwise. Optional transient boxes are painted over a fraction of the
training views; their masks and the clean images are written alongside.
"""
import datetime
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from services.dataset import DatasetManifest, ImageRecord, write_image, write_manifest, write_mask
from services.dsm_io import DsmRaster, write_dsm
from services.errors import ConfigError
from services.geometry import AffineCamera, SceneBounds, SunDirection, pixel_grid, sun_vector

log = logging.getLogger(__name__)

SKY_LIGHT = np.array([0.2, 0.3, 0.5])
BOUNDS_MARGIN_M = 5.0
BISECTION_STEPS = 30
TRANSIENT_COLORS = np.array([
    [0.95, 0.10, 0.10], [0.10, 0.85, 0.15], [0.10, 0.20, 0.95],
    [0.95, 0.85, 0.10], [0.90, 0.10, 0.90], [0.05, 0.90, 0.90],
])


@dataclass
class SyntheticSceneSpec:
    heightfield_res: int = 128
    ground_extent: float = 128.0
    base_altitude: float = 10.0
    altitude_range: float = 60.0
    noise_cells: int = 6
    buildings: int = 3
    albedo_seed: int = 1
    views: int = 15
    holdout: int = 3
    image_size: int = 96
    max_view_zenith: float = 25.0
    sun_angles: Optional[List[List[float]]] = None  # [azimuth, elevation] per view, cycled
    sun_azimuth_range: Tuple[float, float] = (100.0, 220.0)
    sun_elevation_range: Tuple[float, float] = (40.0, 75.0)
    transients: int = 6
    transient_size: int = 10
    corrupted_fraction: float = 0.0
    seed: int = 0
    utm_zone: int = 17
    origin_easting: float = 435000.0
    origin_northing: float = 3354000.0
    image_format: str = "png"

    def __post_init__(self):
        if self.heightfield_res < 4:
            raise ConfigError("heightfield_res must be >= 4", "heightfield_res")
        if self.views < 2 or not 0 <= self.holdout < self.views - 1:
            raise ConfigError("need views >= 2 and at least 2 views left for training", "holdout")
        if not 0.0 <= self.corrupted_fraction <= 1.0:
            raise ConfigError("corrupted_fraction must lie in [0, 1]", "corrupted_fraction")
        if self.image_format not in ("png", "f32"):
            raise ConfigError("image_format must be 'png' or 'f32'", "image_format")
        if self.altitude_range <= 0 or self.ground_extent <= 0:
            raise ConfigError("altitude_range and ground_extent must be positive", "altitude_range")
        self.sun_azimuth_range = tuple(self.sun_azimuth_range)
        self.sun_elevation_range = tuple(self.sun_elevation_range)

    @property
    def cell_size(self) -> float:
        return self.ground_extent / self.heightfield_res

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "SyntheticSceneSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown synthetic scene key '{unknown[0]}'", unknown[0])
        return cls(**d)

    def to_dict(self) -> Dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def load_scene_spec(path: Union[str, Path]) -> SyntheticSceneSpec:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"scene spec not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}")
    return SyntheticSceneSpec.from_dict(data)


# -------------------------- Terrain --------------------------

def value_noise(rng: np.random.Generator, res: int, cells: int, order: int = 3) -> np.ndarray:
    """Smooth (res, res) noise interpolated from a (cells+1)^2 lattice of uniform values."""
    lattice = rng.random((cells + 1, cells + 1))
    coords = np.linspace(0.0, cells, res)
    rr, cc = np.meshgrid(coords, coords, indexing="ij")
    return ndimage.map_coordinates(lattice, [rr, cc], order=order, mode="nearest")


def make_heights(spec: SyntheticSceneSpec, rng: np.random.Generator) -> np.ndarray:
    res = spec.heightfield_res
    h = value_noise(rng, res, spec.noise_cells) + 0.35 * value_noise(rng, res, 2 * spec.noise_cells)
    h = ndimage.gaussian_filter(h, sigma=1.0, mode="nearest")
    h = (h - h.min()) / max(h.max() - h.min(), 1e-12)
    for _ in range(spec.buildings):
        size = rng.integers(res // 16 + 1, res // 8 + 2, size=2)
        r0, c0 = rng.integers(0, res - size[0]), rng.integers(0, res - size[1])
        roof = rng.uniform(0.6, 0.95)
        block = h[r0:r0 + size[0], c0:c0 + size[1]]
        h[r0:r0 + size[0], c0:c0 + size[1]] = np.maximum(block, roof)
    return spec.base_altitude + spec.altitude_range * h


def make_albedo(spec: SyntheticSceneSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.albedo_seed)
    res = spec.heightfield_res
    channels = [value_noise(rng, res, 4 * spec.noise_cells, order=1) for _ in range(3)]
    tint = rng.uniform(0.7, 1.0, size=3)
    return np.stack([0.25 + 0.65 * c * t for c, t in zip(channels, tint)], axis=-1)


class Heightfield:
    """
    Bilinearly interpolated (res, res) raster, row 0 north, cell centres at
    origin + (j + 0.5) * cell_size east and top - (i + 0.5) * cell_size north.
    """

    def __init__(self, heights: np.ndarray, origin_easting: float, origin_northing: float,
                 cell_size: float, albedo: Optional[np.ndarray] = None):
        self.heights = np.asarray(heights, dtype=np.float64)
        self.origin_easting = origin_easting
        self.origin_northing = origin_northing
        self.cell_size = cell_size
        self.albedo = albedo

    @property
    def extent(self) -> Tuple[float, float]:
        return self.heights.shape[1] * self.cell_size, self.heights.shape[0] * self.cell_size

    def _grid_coords(self, e, n):
        col = (np.asarray(e) - self.origin_easting) / self.cell_size - 0.5
        row = (self.origin_northing + self.extent[1] - np.asarray(n)) / self.cell_size - 0.5
        return row, col

    def inside(self, e, n) -> np.ndarray:
        de = np.asarray(e) - self.origin_easting
        dn = np.asarray(n) - self.origin_northing
        return (de >= 0) & (de <= self.extent[0]) & (dn >= 0) & (dn <= self.extent[1])

    def height_at(self, e, n) -> np.ndarray:
        row, col = self._grid_coords(e, n)
        return ndimage.map_coordinates(self.heights, [np.ravel(row), np.ravel(col)], order=1,
                                       mode="nearest").reshape(np.shape(row))

    def albedo_at(self, e, n) -> np.ndarray:
        row, col = self._grid_coords(e, n)
        return np.stack([ndimage.map_coordinates(self.albedo[..., k], [np.ravel(row), np.ravel(col)], order=1,
                                                 mode="nearest") for k in range(3)], axis=-1)

    def surface_hit(self, origins: np.ndarray, directions: np.ndarray, t_max: np.ndarray,
                    step: float) -> np.ndarray:
        """First crossing below the surface along each ray, refined by bisection; (N, 3) points."""
        n = len(origins)
        steps = int(np.ceil(np.max(t_max) / step)) + 1
        t_lo = np.zeros(n)
        t_hi = np.asarray(t_max, dtype=np.float64).copy()
        found = np.zeros(n, dtype=bool)
        for k in range(1, steps + 1):
            t = np.minimum(k * step, t_max)
            active = ~found
            if not active.any():
                break
            p = origins[active] + t[active, None] * directions[active]
            below = p[:, 2] <= self.height_at(p[:, 0], p[:, 1])
            idx = np.flatnonzero(active)[below]
            t_hi[idx] = t[idx]
            t_lo[idx] = np.maximum(t[idx] - step, 0.0)
            found[idx] = True
        if not found.all():
            log.warning("%d synthetic rays never crossed the heightfield", int((~found).sum()))
        for _ in range(BISECTION_STEPS):
            mid = 0.5 * (t_lo + t_hi)
            p = origins + mid[:, None] * directions
            below = p[:, 2] <= self.height_at(p[:, 0], p[:, 1])
            t_hi = np.where(below, mid, t_hi)
            t_lo = np.where(below, t_lo, mid)
        return origins + t_hi[:, None] * directions

    def is_lit(self, points: np.ndarray, sun: SunDirection, step: float, top: float) -> np.ndarray:
        """True where the segment toward the sun stays above the surface until it leaves the raster or rises above top."""
        toward = -sun.vector
        rise = toward[2]
        diag = float(np.hypot(*self.extent))
        if rise > 1e-9:
            reach = np.minimum((top - points[:, 2]) / rise, diag / max(np.hypot(toward[0], toward[1]), 1e-12))
        else:
            reach = np.full(len(points), diag)
        lit = np.ones(len(points), dtype=bool)
        steps = int(np.ceil(np.max(reach, initial=0.0) / step))
        for k in range(1, steps + 1):
            t = k * step
            live = lit & (t <= reach)
            if not live.any():
                break
            q = points[live] + t * toward
            inside = self.inside(q[:, 0], q[:, 1])
            blocked = inside & (self.height_at(q[:, 0], q[:, 1]) > q[:, 2])
            lit[np.flatnonzero(live)[blocked]] = False
        return lit


def scene_bounds(spec: SyntheticSceneSpec) -> SceneBounds:
    lo = (spec.origin_easting, spec.origin_northing, spec.base_altitude - BOUNDS_MARGIN_M)
    hi = (spec.origin_easting + spec.ground_extent, spec.origin_northing + spec.ground_extent,
          spec.base_altitude + spec.altitude_range + BOUNDS_MARGIN_M)
    return SceneBounds(lo, hi, spec.utm_zone, "N")


def render_view(hf: Heightfield, camera: AffineCamera, sun: SunDirection,
                bounds: SceneBounds) -> Tuple[np.ndarray, np.ndarray]:
    """Clean (H, W, 3) image and (H, W) lit mask of one view."""
    rows, cols = pixel_grid(camera.height, camera.width)
    bottom, top = bounds.altitude_range
    e_t, n_t = camera.localize_utm(rows, cols, top)
    e_b, n_b = camera.localize_utm(rows, cols, bottom)
    origins = np.stack([e_t, n_t, np.full_like(e_t, top)], axis=-1)
    seg = np.stack([e_b, n_b, np.full_like(e_b, bottom)], axis=-1) - origins
    t_max = np.linalg.norm(seg, axis=-1)
    points = hf.surface_hit(origins, seg / t_max[:, None], t_max, hf.cell_size / 4.0)
    lit = hf.is_lit(points, sun, hf.cell_size / 2.0, top)
    s = lit.astype(np.float64)[:, None]
    rgb = hf.albedo_at(points[:, 0], points[:, 1]) * (s + (1.0 - s) * SKY_LIGHT)
    shape = (camera.height, camera.width)
    return np.clip(rgb, 0.0, 1.0).reshape(*shape, 3), lit.reshape(shape)


def paint_transients(img: np.ndarray, spec: SyntheticSceneSpec, rng: np.random.Generator):
    out = img.copy()
    mask = np.zeros(img.shape[:2], dtype=bool)
    h, w = mask.shape
    for _ in range(spec.transients):
        bh, bw = (int(v) for v in rng.integers(max(1, spec.transient_size // 2), spec.transient_size + 1, size=2))
        r0, c0 = int(rng.integers(0, max(1, h - bh))), int(rng.integers(0, max(1, w - bw)))
        out[r0:r0 + bh, c0:c0 + bw] = TRANSIENT_COLORS[int(rng.integers(len(TRANSIENT_COLORS)))]
        mask[r0:r0 + bh, c0:c0 + bw] = True
    return out, mask


# -------------------------- Generation --------------------------

def build_heightfield(spec: SyntheticSceneSpec) -> Heightfield:
    rng = np.random.default_rng(spec.seed)
    return Heightfield(make_heights(spec, rng), spec.origin_easting, spec.origin_northing, spec.cell_size,
                       make_albedo(spec))


def view_cameras(spec: SyntheticSceneSpec) -> List[Tuple[AffineCamera, SunDirection]]:
    rng = np.random.default_rng([spec.seed, 1])
    half = spec.ground_extent / 2.0
    out = []
    for v in range(spec.views):
        zenith = float(rng.uniform(0.0, spec.max_view_zenith))
        azimuth = float(rng.uniform(0.0, 360.0))
        if spec.sun_angles:
            az, el = spec.sun_angles[v % len(spec.sun_angles)]
        else:
            az = float(rng.uniform(*spec.sun_azimuth_range))
            el = float(rng.uniform(*spec.sun_elevation_range))
        cam = AffineCamera(spec.image_size, spec.image_size, spec.ground_extent / spec.image_size, zenith, azimuth,
                           spec.origin_easting + half, spec.origin_northing + half,
                           spec.base_altitude + spec.altitude_range / 2.0)
        out.append((cam, sun_vector(az, el)))
    return out


def generate_synthetic(spec: SyntheticSceneSpec, out_dir: Union[str, Path]) -> DatasetManifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hf = build_heightfield(spec)
    bounds = scene_bounds(spec)
    views = view_cameras(spec)
    holdout = list(range(spec.views - spec.holdout, spec.views))
    train = [v for v in range(spec.views) if v not in holdout]
    rng = np.random.default_rng([spec.seed, 2])
    n_corrupt = int(round(spec.corrupted_fraction * len(train)))
    corrupted = set(int(v) for v in rng.choice(train, size=n_corrupt, replace=False)) if n_corrupt else set()

    ext = "f32" if spec.image_format == "f32" else "png"
    base_date = datetime.date(2019, 1, 1)
    records = []
    for v, (cam, sun) in enumerate(views):
        rgb, lit = render_view(hf, cam, sun, bounds)
        img_path = out / "images" / f"view_{v:03d}.{ext}"
        clean_path = None
        transient = np.zeros(lit.shape, dtype=bool)
        if v in corrupted:
            clean_path = write_image(out / "clean" / f"view_{v:03d}.{ext}", rgb)
            rgb, transient = paint_transients(rgb, spec, rng)
        write_image(img_path, rgb)
        records.append(ImageRecord(
            name=img_path.stem, img=img_path, width=cam.width, height=cam.height, camera=cam,
            sun_azimuth=sun.azimuth_deg, sun_elevation=sun.elevation_deg,
            acquisition_date=(base_date + datetime.timedelta(days=20 * v)).isoformat(),
            split="test" if v in holdout else "train",
            shadow_mask=write_mask(out / "masks" / f"shadow_{v:03d}.png", lit),
            transient_mask=write_mask(out / "masks" / f"transient_{v:03d}.png", transient),
            clean_img=clean_path,
        ))
        log.debug("view %d: zenith %.1f, sun az %.1f el %.1f, %.1f%% lit%s", v, cam.view_zenith_deg,
                  sun.azimuth_deg, sun.elevation_deg, 100.0 * lit.mean(), ", transients" if v in corrupted else "")

    gt = write_dsm(DsmRaster(spec.origin_easting, spec.origin_northing, spec.cell_size, hf.heights), out / "dsm.asc")
    manifest = DatasetManifest(out, bounds, records, gt, holdout)
    write_manifest(manifest, out / "manifest.json")
    (out / "scene.json").write_text(json.dumps(spec.to_dict(), sort_keys=True, indent=2) + "\n")
    log.info("synthetic scene: %d views (%d held out, %d with transients) in %s",
             spec.views, len(holdout), len(corrupted), out)
    return manifest
