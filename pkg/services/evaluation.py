"""DSM extraction from a trained field and the image / surface metrics"""
import logging
import math
from typing import Optional, Tuple

import numpy as np
import torch

from services.dsm_io import DEFAULT_CELL_SIZE, NODATA, DsmRaster
from services.errors import DataMismatchError
from services.geometry import (Camera, RayBatch, SceneBounds, SunDirection, clip_to_unit_cube, normalize_point,
                               pixel_grid, rays_from_pixels)
from services.renderer import RenderedImage, model_dtype, render_batch, render_image
from services.sampler import OccupancyGrid

log = logging.getLogger(__name__)

NADIR_START = 1.1
SHADING_THRESHOLD = 0.5
_NADIR = np.array([0.0, 0.0, -1.0])


def raster_shape(bounds: SceneBounds, cell_size: float) -> Tuple[int, int]:
    ext = bounds.extent
    # the epsilon keeps exact multiples from gaining a column
    width = int(math.ceil(ext[0] / cell_size - 1e-9))
    height = int(math.ceil(ext[1] / cell_size - 1e-9))
    return height, width


def extract_dsm(model, grid: Optional[OccupancyGrid], bounds: SceneBounds,
                cell_size: float = DEFAULT_CELL_SIZE, chunk: int = 4096,
                max_samples: int = 256, min_samples: int = 4, like: Optional[DsmRaster] = None) -> DsmRaster:
    """
    Cast one nadir ray per cell centre from 10% above the scene top; the cell
    altitude is the composited expected altitude, NODATA below 1% opacity.
    `like` reuses the origin, cell size and shape of an existing raster.
    """
    if like is not None:
        cell_size = like.cell_size
        height, width = like.altitudes.shape
        raster = DsmRaster(like.origin_easting, like.origin_northing, cell_size, np.full((height, width), NODATA))
    else:
        if not cell_size > 0:
            raise DataMismatchError("cell size must be positive", (cell_size,))
        height, width = raster_shape(bounds, cell_size)
        raster = DsmRaster(bounds.utm_min[0], bounds.utm_min[1], cell_size, np.full((height, width), NODATA))
    e, n = raster.cell_centers()
    q = normalize_point(np.stack([e.ravel(), n.ravel(), np.full(e.size, bounds.utm_min[2])], axis=-1),
                        bounds, check=False)
    origins = np.column_stack([q[:, 0], q[:, 1], np.full(len(q), NADIR_START)])
    dirs = np.broadcast_to(_NADIR, origins.shape).copy()
    t_near, t_far, hit = clip_to_unit_cube(origins, dirs)
    rendered = render_batch(RayBatch(origins, dirs, t_near, t_far, hit), _NADIR, model, grid, bounds,
                            chunk, max_samples, min_samples)
    raster.altitudes = np.where(np.isfinite(rendered.altitude), rendered.altitude, NODATA).reshape(height, width)
    log.info("extracted %dx%d DSM at %.3f m, %.1f%% cells valid, %.1f samples/ray",
             height, width, cell_size, 100.0 * raster.valid.mean(), rendered.samples_per_ray)
    return raster


def mae(dsm: DsmRaster, gt: DsmRaster, align_median: bool = False) -> Tuple[float, int]:
    """Mean |delta altitude| over cells valid in both rasters, and the number of such cells."""
    if not dsm.same_grid(gt):
        raise DataMismatchError("DSM grids differ (origin, cell size or dimensions)",
                                (dsm.origin_easting, dsm.origin_northing, dsm.cell_size, *dsm.altitudes.shape),
                                (gt.origin_easting, gt.origin_northing, gt.cell_size, *gt.altitudes.shape))
    both = dsm.valid & gt.valid
    count = int(both.sum())
    if count == 0:
        raise DataMismatchError("DSMs share no valid cells", dsm.altitudes.shape, gt.altitudes.shape)
    diff = dsm.altitudes[both] - gt.altitudes[both]
    if align_median:
        diff = diff - np.median(diff)
    return float(np.abs(diff).mean()), count


def psnr(img: np.ndarray, ref: np.ndarray) -> float:
    img, ref = np.asarray(img, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise DataMismatchError("image shapes differ", img.shape, ref.shape)
    mse = float(np.mean((img - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


# -------------------------- Shading & transients --------------------------

def shading_accuracy(model, grid: Optional[OccupancyGrid], bounds: SceneBounds, camera: Camera,
                     sun: SunDirection, lit_mask: np.ndarray, chunk: int = 4096) -> float:
    """
    Fraction of pixels whose learned shading at the expected surface point,
    thresholded at 0.5, agrees with the lit (True) / shadowed mask.
    """
    height, width = lit_mask.shape
    rendered: RenderedImage = render_image(camera, sun, model, grid, bounds, height, width, chunk)
    rows, cols = pixel_grid(height, width)
    rays = rays_from_pixels(rows, cols, camera, bounds)
    t = rendered.expected_t.ravel()
    valid = np.isfinite(t)
    if not valid.any():
        log.warning("shading_accuracy: no pixel reached 1% opacity")
        return 0.0
    points = rays.origins[valid] + t[valid, None] * rays.directions[valid]
    dtype = model_dtype(model)
    pts = torch.as_tensor(points, dtype=dtype).clamp(0.0, 1.0)
    sun_d = torch.as_tensor(sun.vector, dtype=dtype).expand(len(pts), 3)
    with torch.no_grad():
        s = torch.cat([model(pts[i:i + chunk], sun_d[i:i + chunk]).shading for i in range(0, len(pts), chunk)])
    predicted = s.cpu().numpy() >= SHADING_THRESHOLD
    truth = np.asarray(lit_mask, dtype=bool).ravel()[valid]
    return float((predicted == truth).mean())


def transient_residue(rendered: np.ndarray, clean: np.ndarray, transient_mask: np.ndarray) -> float:
    """Mean absolute intensity difference inside the transient mask (0 for an empty mask)."""
    rendered, clean = np.asarray(rendered, dtype=np.float64), np.asarray(clean, dtype=np.float64)
    if rendered.shape != clean.shape or rendered.shape[:2] != np.shape(transient_mask):
        raise DataMismatchError("render, clean image and mask differ in shape", rendered.shape, clean.shape)
    m = np.asarray(transient_mask, dtype=bool)
    if not m.any():
        return 0.0
    return float(np.abs(rendered[m] - clean[m]).mean())
