"""Occupancy-grid cache and empty-space-skipping ray marching"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
import torch

from services.errors import ConfigError
from services.geometry import Ray, clip_to_unit_cube

log = logging.getLogger(__name__)


@dataclass
class GridConfig:
    resolution: int = 128
    decay: float = 0.95
    threshold: float = 0.01
    initial_density: float = 1.0
    warmup_steps: int = 256
    update_interval: int = 16
    partial_fraction: float = 0.5
    max_samples: int = 256
    min_samples: int = 4
    chunk: int = 2 ** 18

    def __post_init__(self):
        if self.resolution < 1:
            raise ConfigError("grid.resolution must be >= 1", "grid.resolution")
        if not 0.0 < self.decay <= 1.0:
            raise ConfigError("grid.decay must lie in (0, 1]", "grid.decay")
        if not 1 <= self.min_samples <= self.max_samples:
            raise ConfigError("need 1 <= grid.min_samples <= grid.max_samples", "grid.min_samples")
        if not 0.0 < self.partial_fraction <= 1.0:
            raise ConfigError("grid.partial_fraction must lie in (0, 1]", "grid.partial_fraction")


class OccupancyGrid:
    """resolution^3 density cache over the unit cube; voxel [i, j, k] spans x in [i, i+1)/resolution."""

    def __init__(self, cfg: GridConfig):
        self.cfg = cfg
        r = cfg.resolution
        self.density_cache = torch.full((r, r, r), float(cfg.initial_density), dtype=torch.float64)
        self.occupancy_bits = torch.empty((r, r, r), dtype=torch.bool)
        self.update_count = 0
        self.refresh_bits()

    @property
    def resolution(self) -> int:
        return self.cfg.resolution

    def refresh_bits(self) -> None:
        self.occupancy_bits = self.density_cache > self.cfg.threshold

    def occupied_fraction(self) -> float:
        return float(self.occupancy_bits.float().mean())

    def voxel_of(self, points: torch.Tensor) -> torch.Tensor:
        return torch.floor(points * self.resolution).clamp(0, self.resolution - 1).to(torch.int64)

    def lookup(self, points: torch.Tensor) -> torch.Tensor:
        v = self.voxel_of(points)
        return self.occupancy_bits[v[..., 0], v[..., 1], v[..., 2]]

    def load_cache(self, cache: torch.Tensor) -> None:
        r = self.resolution
        self.density_cache = cache.reshape(r, r, r).to(torch.float64).clone()
        self.refresh_bits()


def model_dtype(model) -> torch.dtype:
    p = next(iter(model.parameters()), None) if hasattr(model, "parameters") else None
    return p.dtype if p is not None else torch.get_default_dtype()


def update_grid(grid: OccupancyGrid, density_fn: Callable[[torch.Tensor], torch.Tensor],
                rng: torch.Generator, step: Optional[int] = None,
                fraction: Optional[float] = None, dtype: Optional[torch.dtype] = None) -> OccupancyGrid:
    """
    Decay every voxel and take the max with sigma at a jittered point of each
    selected voxel. The first update covers every voxel, later ones a random
    partial_fraction of them. Points reach density_fn in `dtype`, by default
    the dtype of the module owning a bound density_fn.
    """
    if dtype is None:
        dtype = model_dtype(getattr(density_fn, "__self__", None))
    cfg = grid.cfg
    r = grid.resolution
    n = r ** 3
    if fraction is None:
        fraction = 1.0 if grid.update_count == 0 else cfg.partial_fraction
    if fraction >= 1.0:
        flat = torch.arange(n, dtype=torch.int64)
    else:
        flat = torch.randperm(n, generator=rng)[: max(1, int(round(fraction * n)))]

    ijk = torch.stack([flat // (r * r), (flat // r) % r, flat % r], dim=-1)
    jitter = torch.rand(len(flat), 3, generator=rng, dtype=torch.float64)
    points = (ijk.to(torch.float64) + jitter) / r

    sigma = torch.empty(len(flat), dtype=torch.float64)
    with torch.no_grad():
        for s in range(0, len(flat), cfg.chunk):
            chunk = points[s:s + cfg.chunk].to(dtype)
            sigma[s:s + cfg.chunk] = density_fn(chunk).to(torch.float64)

    cache = grid.density_cache.view(-1)
    cache.mul_(cfg.decay)
    cache[flat] = torch.maximum(cache[flat], sigma.clamp_min(0.0))
    grid.refresh_bits()
    grid.update_count += 1
    log.debug("occupancy update %d (step %s): %.1f%% voxels refreshed, %.2f%% occupied",
              grid.update_count, step, 100.0 * fraction, 100.0 * grid.occupied_fraction())
    return grid


# -------------------------- Ray marching --------------------------

def aabb_intersect(ray: Ray) -> Optional[Tuple[float, float]]:
    t_near, t_far, hit = clip_to_unit_cube(ray.origin[None], ray.direction[None])
    if not hit[0]:
        return None
    return float(t_near[0]), float(t_far[0])


@dataclass
class RaySample:
    t: float
    x: np.ndarray
    delta: float


@dataclass
class RaySamples:
    """Padded per-ray samples; entries with mask False carry no density."""
    t: torch.Tensor          # (R, S)
    delta: torch.Tensor      # (R, S)
    positions: torch.Tensor  # (R, S, 3)
    mask: torch.Tensor       # (R, S) bool
    midpoint_occupied: torch.Tensor  # (R, S) bool, lookup result of the uniform steps
    fallback: torch.Tensor   # (R,) bool
    hit: torch.Tensor        # (R,) bool

    @property
    def counts(self) -> torch.Tensor:
        return self.mask.sum(dim=-1)


def ray_march_batch(origins: torch.Tensor, directions: torch.Tensor, t_near: torch.Tensor,
                    t_far: torch.Tensor, grid: Optional[OccupancyGrid], max_samples: int = 256,
                    min_samples: int = 4, rng: Optional[torch.Generator] = None,
                    hit: Optional[torch.Tensor] = None) -> RaySamples:
    """
    Uniform steps of (t_far - t_near) / max_samples with one jitter offset per
    ray (rng None -> step midpoints). Steps whose midpoint falls in an empty
    voxel are dropped; rays keeping fewer than min_samples get min_samples
    stratified samples over the whole interval instead. grid None marches densely.
    """
    n_rays = origins.shape[0]
    dtype = origins.dtype
    if hit is None:
        hit = t_far > t_near
    length = torch.where(hit, t_far - t_near, torch.zeros_like(t_far))

    def stratified(n: int, u: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        k = torch.arange(n, dtype=dtype)
        delta = (length / n).unsqueeze(-1).expand(n_rays, n)
        return t_near.unsqueeze(-1) + (k + u.unsqueeze(-1)) * delta, delta

    if rng is None:
        u = torch.full((n_rays,), 0.5, dtype=dtype)
    else:
        u = torch.rand(n_rays, generator=rng, dtype=torch.float64).to(dtype)

    t, delta = stratified(max_samples, u)
    mids = t_near.unsqueeze(-1) + (torch.arange(max_samples, dtype=dtype) + 0.5) * delta
    if grid is None:
        occupied = torch.ones(n_rays, max_samples, dtype=torch.bool)
    else:
        mid_pos = origins.unsqueeze(1) + mids.unsqueeze(-1) * directions.unsqueeze(1)
        occupied = grid.lookup(mid_pos)
    occupied = occupied & hit.unsqueeze(-1)
    mask = occupied.clone()

    fallback = (mask.sum(dim=-1) < min_samples) & hit
    if fallback.any():
        t_fb, d_fb = stratified(min_samples, u)
        pad = max_samples - min_samples
        t_fb = torch.cat([t_fb, t_fb.new_zeros(n_rays, pad)], dim=-1)
        d_fb = torch.cat([d_fb, d_fb.new_zeros(n_rays, pad)], dim=-1)
        m_fb = torch.zeros(n_rays, max_samples, dtype=torch.bool)
        m_fb[:, :min_samples] = True
        sel = fallback.unsqueeze(-1)
        t = torch.where(sel, t_fb, t)
        delta = torch.where(sel, d_fb, delta)
        mask = torch.where(sel, m_fb, mask)

    positions = (origins.unsqueeze(1) + t.unsqueeze(-1) * directions.unsqueeze(1)).clamp(0.0, 1.0)
    return RaySamples(t, delta, positions, mask, occupied, fallback, hit)


def ray_march(ray: Ray, grid: Optional[OccupancyGrid], max_samples: int = 256, min_samples: int = 4,
              rng: Optional[torch.Generator] = None) -> List[RaySample]:
    """Samples of a single ray; an empty list flags a ray that misses the cube."""
    interval = aabb_intersect(ray)
    if interval is None:
        return []
    o = torch.as_tensor(ray.origin, dtype=torch.float64).unsqueeze(0)
    d = torch.as_tensor(ray.direction, dtype=torch.float64).unsqueeze(0)
    tn = torch.tensor([interval[0]], dtype=torch.float64)
    tf = torch.tensor([interval[1]], dtype=torch.float64)
    s = ray_march_batch(o, d, tn, tf, grid, max_samples, min_samples, rng)
    keep = s.mask[0]
    return [RaySample(float(t), x.numpy(), float(dl))
            for t, x, dl in zip(s.t[0][keep], s.positions[0][keep], s.delta[0][keep])]
