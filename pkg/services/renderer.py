"""Volume rendering: alpha compositing of shaded field samples along rays"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch

import services
from services.geometry import (Camera, Ray, RayBatch, SceneBounds, SunDirection, clip_to_unit_cube,
                               pixel_grid, rays_from_pixels)
from services.sampler import OccupancyGrid, RaySamples, model_dtype, ray_march_batch

log = logging.getLogger(__name__)

OPACITY_VALID = 0.01


def alpha_from_sigma(sigma, delta):
    if isinstance(sigma, torch.Tensor) or isinstance(delta, torch.Tensor):
        return -torch.expm1(-sigma * delta)
    return float(-np.expm1(-float(sigma) * float(delta)))


def shaded_color(albedo: torch.Tensor, shading: torch.Tensor, sky: torch.Tensor) -> torch.Tensor:
    """c = a * (s + (1 - s) * l_sky); white direct light."""
    s = shading.unsqueeze(-1)
    return albedo * (s + (1.0 - s) * sky)


@dataclass
class CompositeResult:
    color: torch.Tensor            # (R, 3)
    alphas: torch.Tensor           # (R, S)
    transmittance: torch.Tensor    # (R, S)
    weights: torch.Tensor          # (R, S)
    opacity: torch.Tensor          # (R,)
    expected_t: torch.Tensor       # (R,)
    depth_valid: torch.Tensor      # (R,) bool, opacity >= 0.01
    expected_altitude: Optional[torch.Tensor] = None  # (R,) meters


def composite(sigmas: torch.Tensor, colors: torch.Tensor, deltas: torch.Tensor, ts: torch.Tensor,
              mask: Optional[torch.Tensor] = None) -> CompositeResult:
    """Front-to-back compositing; (S,) inputs are treated as a single ray."""
    single = sigmas.dim() == 1
    if single:
        sigmas, colors, deltas, ts = sigmas[None], colors[None], deltas[None], ts[None]
        mask = None if mask is None else mask[None]
    alphas = alpha_from_sigma(sigmas, deltas)
    if mask is not None:
        alphas = torch.where(mask, alphas, torch.zeros_like(alphas))
    ones = torch.ones_like(alphas[..., :1])
    trans = torch.cumprod(torch.cat([ones, 1.0 - alphas], dim=-1), dim=-1)[..., :-1]
    weights = trans * alphas
    color = (weights.unsqueeze(-1) * colors).sum(dim=-2)
    opacity = weights.sum(dim=-1)
    expected_t = (weights * ts).sum(dim=-1) / opacity.clamp_min(1e-10)
    valid = opacity >= OPACITY_VALID

    if services.DEBUG_CHECKS:
        assert torch.all(trans[..., 1:] <= trans[..., :-1] + 1e-12), "transmittance increased along a ray"
        assert torch.all(weights >= 0), "negative compositing weight"
        assert torch.all(opacity <= 1.0 + 1e-9), "opacity above 1"

    result = CompositeResult(color, alphas, trans, weights, opacity, expected_t, valid)
    if single:
        result = CompositeResult(*(getattr(result, f)[0] for f in
                                   ("color", "alphas", "transmittance", "weights", "opacity",
                                    "expected_t", "depth_valid")))
    return result


# -------------------------- Rendering --------------------------

@dataclass
class RenderOutput:
    rgb: torch.Tensor
    composite: CompositeResult
    samples: RaySamples


def render_rays(origins: torch.Tensor, directions: torch.Tensor, t_near: torch.Tensor,
                t_far: torch.Tensor, sun_dirs: torch.Tensor, model, grid: Optional[OccupancyGrid],
                bounds: SceneBounds, rng: Optional[torch.Generator] = None,
                max_samples: int = 256, min_samples: int = 4,
                hit: Optional[torch.Tensor] = None) -> RenderOutput:
    """
    March -> field -> shade -> composite for a batch of rays. sun_dirs are the
    metric (east/north/up) light directions of each ray's acquisition.
    """
    samples = ray_march_batch(origins, directions, t_near, t_far, grid, max_samples, min_samples, rng, hit)
    ray_idx = torch.nonzero(samples.mask, as_tuple=True)[0]
    out = model(samples.positions[samples.mask], sun_dirs[ray_idx])
    colors = shaded_color(out.albedo, out.shading, out.sky)

    n, s = samples.mask.shape
    sigma_p = torch.zeros(n, s, dtype=out.sigma.dtype).masked_scatter(samples.mask, out.sigma)
    color_p = torch.zeros(n, s, 3, dtype=colors.dtype).masked_scatter(samples.mask.unsqueeze(-1), colors)
    comp = composite(sigma_p, color_p, samples.delta.to(sigma_p.dtype), samples.t.to(sigma_p.dtype), samples.mask)

    z = origins[:, 2] + comp.expected_t.detach().to(origins.dtype) * directions[:, 2]
    lo, ext = bounds.utm_min[2], bounds.extent[2]
    comp.expected_altitude = z * ext + lo
    return RenderOutput(comp.color, comp, samples)


def _batch_tensors(rays: RayBatch, dtype: torch.dtype):
    return (torch.as_tensor(rays.origins, dtype=dtype), torch.as_tensor(rays.directions, dtype=dtype),
            torch.as_tensor(rays.t_near, dtype=dtype), torch.as_tensor(rays.t_far, dtype=dtype),
            torch.as_tensor(rays.hit))


def render_ray(ray: Ray, sun: SunDirection, model, grid: Optional[OccupancyGrid], bounds: SceneBounds,
               rng: Optional[torch.Generator] = None, max_samples: int = 256,
               min_samples: int = 4) -> Tuple[np.ndarray, CompositeResult]:
    t_near, t_far, hit = clip_to_unit_cube(ray.origin[None], ray.direction[None])
    batch = RayBatch(ray.origin[None], ray.direction[None], t_near, t_far, hit)
    dtype = model_dtype(model)
    o, d, tn, tf, h = _batch_tensors(batch, dtype)
    sun_d = torch.as_tensor(sun.vector, dtype=dtype).unsqueeze(0)
    with torch.no_grad():
        r = render_rays(o, d, tn, tf, sun_d, model, grid, bounds, rng, max_samples, min_samples, h)
    return r.rgb[0].cpu().numpy(), r.composite


@dataclass
class RenderedImage:
    rgb: np.ndarray        # (H, W, 3) in [0,1]
    opacity: np.ndarray    # (H, W)
    altitude: np.ndarray   # (H, W) meters, nan where opacity < 0.01
    samples_per_ray: float
    expected_t: Optional[np.ndarray] = None  # (H, W) ray parameter of the surface, nan like altitude


def render_batch(rays: RayBatch, sun_dirs: np.ndarray, model, grid: Optional[OccupancyGrid],
                 bounds: SceneBounds, chunk: int = 4096, max_samples: int = 256,
                 min_samples: int = 4, rng: Optional[torch.Generator] = None) -> RenderedImage:
    """Chunked no-grad rendering of a flat ray batch; the image fields come back flat (N, ...)."""
    dtype = model_dtype(model)
    o, d, tn, tf, h = _batch_tensors(rays, dtype)
    sun = torch.as_tensor(np.broadcast_to(sun_dirs, (len(rays), 3)).copy(), dtype=dtype)
    rgb, opa, alt, depth, counts = [], [], [], [], []
    with torch.no_grad():
        for s in range(0, len(rays), chunk):
            sl = slice(s, s + chunk)
            r = render_rays(o[sl], d[sl], tn[sl], tf[sl], sun[sl], model, grid, bounds, rng,
                            max_samples, min_samples, h[sl])
            rgb.append(r.rgb)
            opa.append(r.composite.opacity)
            alt.append(torch.where(r.composite.depth_valid, r.composite.expected_altitude.to(dtype),
                                   torch.full_like(r.composite.opacity, float("nan"))))
            depth.append(torch.where(r.composite.depth_valid, r.composite.expected_t,
                                     torch.full_like(r.composite.opacity, float("nan"))))
            counts.append(r.samples.counts[r.samples.hit])
    n = torch.cat(counts)
    return RenderedImage(
        torch.cat(rgb).clamp(0.0, 1.0).cpu().numpy().astype(np.float64),
        torch.cat(opa).cpu().numpy().astype(np.float64),
        torch.cat(alt).cpu().numpy().astype(np.float64),
        float(n.float().mean()) if n.numel() else 0.0,
        torch.cat(depth).cpu().numpy().astype(np.float64),
    )


def render_image(camera: Camera, sun: SunDirection, model, grid: Optional[OccupancyGrid],
                 bounds: SceneBounds, height: int, width: int, chunk: int = 4096,
                 max_samples: int = 256, min_samples: int = 4) -> RenderedImage:
    """Row-major render of every pixel centre; deterministic (midpoint samples)."""
    rows, cols = pixel_grid(height, width)
    rays = rays_from_pixels(rows, cols, camera, bounds)
    flat = render_batch(rays, sun.vector, model, grid, bounds, chunk, max_samples, min_samples)
    return RenderedImage(flat.rgb.reshape(height, width, 3), flat.opacity.reshape(height, width),
                         flat.altitude.reshape(height, width), flat.samples_per_ray,
                         flat.expected_t.reshape(height, width))


# -------------------------- Solar rays --------------------------

@dataclass
class SolarTerms:
    transmittance: torch.Tensor  # (R, N)
    alphas: torch.Tensor         # (R, N)
    shading: torch.Tensor        # (R, N)


def render_solar(origins: torch.Tensor, directions: torch.Tensor, t_near: torch.Tensor, t_far: torch.Tensor,
                 sun_dirs: torch.Tensor, model, n_samples: int = 64,
                 rng: Optional[torch.Generator] = None) -> SolarTerms:
    """Dense stratified samples along sun-direction rays with the field's shading at each sample."""
    samples = ray_march_batch(origins, directions, t_near, t_far, None, n_samples, n_samples, rng)
    ray_idx = torch.nonzero(samples.mask, as_tuple=True)[0]
    out = model(samples.positions[samples.mask], sun_dirs[ray_idx])
    n, s = samples.mask.shape
    sigma_p = torch.zeros(n, s, dtype=out.sigma.dtype).masked_scatter(samples.mask, out.sigma)
    shading_p = torch.zeros(n, s, dtype=out.shading.dtype).masked_scatter(samples.mask, out.shading)
    colors = torch.zeros(n, s, 3, dtype=sigma_p.dtype)
    comp = composite(sigma_p, colors, samples.delta.to(sigma_p.dtype), samples.t.to(sigma_p.dtype), samples.mask)
    return SolarTerms(comp.transmittance, comp.alphas, shading_p)
