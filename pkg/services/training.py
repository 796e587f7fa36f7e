"""
Training loop.

Per step: sample a ray batch, render it, weight the photometric residuals,
add the solar correction over fresh sun-direction rays, backpropagate and
take a RAdam step. The occupancy grid is refreshed every update_interval
steps once its warmup is over. Every epoch ends with a checkpoint, held-out
PSNR, DSM MAE (when a ground-truth raster is available) and a metrics row.
"""
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd
import torch

from services.checkpoint import save_checkpoint
from services.dataset import SceneDataset
from services.dsm_io import DsmRaster, read_dsm
from services.errors import DatasetError, GradientError, TrainingDivergedError
from services.evaluation import extract_dsm, mae, psnr
from services.field import SatNgpField, check_gradients
from services.geometry import solar_rays
from services.losses import (LossBreakdown, RobustState, loss_final, loss_rgb, loss_solar, robust_weights)
from services.optim import make_optimizer, make_scheduler
from services.renderer import render_batch, render_rays, render_solar
from services.run_config import RunConfig
from services.sampler import OccupancyGrid, update_grid

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["step", "epoch", "l_rgb", "l_robust", "l_solar", "l_final", "lr",
                  "psnr_val", "mae_dsm", "wall_seconds"]
CHECKPOINT_NAME = "model.satngp"
METRICS_NAME = "metrics.csv"


@dataclass
class TrainResult:
    checkpoint: Path
    metrics: pd.DataFrame
    model: SatNgpField
    grid: OccupancyGrid
    steps: int


def steps_per_epoch(dataset: SceneDataset, cfg: RunConfig) -> int:
    if cfg.train.steps_per_epoch:
        return cfg.train.steps_per_epoch
    return max(1, math.ceil(len(dataset.train_ray_ids()) / cfg.train.batch_rays))


def sample_batch(dataset: SceneDataset, pool: np.ndarray, cfg: RunConfig, gen: torch.Generator) -> np.ndarray:
    """Uniform ray ids over all training pixels, or whole p x p patches laid out patch by patch."""
    t = cfg.train
    if not t.patch_sampling:
        pick = torch.randint(len(pool), (t.batch_rays,), generator=gen).numpy()
        return pool[pick]
    p = t.patch_size
    views = [v for v in dataset.manifest.train_views
             if dataset.manifest.images[v].height >= p and dataset.manifest.images[v].width >= p]
    if not views:
        raise DatasetError(f"patch sampling needs a training view of at least {p}x{p} pixels")
    ids = []
    for _ in range(t.batch_rays // (p * p)):
        v = views[int(torch.randint(len(views), (1,), generator=gen))]
        rec = dataset.manifest.images[v]
        r0 = int(torch.randint(rec.height - p + 1, (1,), generator=gen))
        c0 = int(torch.randint(rec.width - p + 1, (1,), generator=gen))
        rows, cols = np.meshgrid(np.arange(r0, r0 + p), np.arange(c0, c0 + p), indexing="ij")
        ids.append(dataset.offsets[v] + (rows * rec.width + cols).ravel())
    return np.concatenate(ids)


def _tensor(a: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(a), dtype=dtype)


def solar_loss(model, dataset: SceneDataset, sun: torch.Tensor, cfg: RunConfig,
               gen: torch.Generator, dtype: torch.dtype) -> torch.Tensor:
    """Solar correction over rays through uniform cube points, each lit by the sun of a random batch ray."""
    n = cfg.train.solar_rays
    if n == 0:
        return torch.zeros((), dtype=dtype)
    pick = torch.randint(len(sun), (n,), generator=gen)
    sun_sc = sun[pick]
    points = torch.rand(n, 3, generator=gen, dtype=torch.float64).numpy()
    rays = solar_rays(points, sun_sc.detach().cpu().numpy().astype(np.float64), dataset.bounds)
    keep = np.flatnonzero(rays.hit)
    terms = render_solar(_tensor(rays.origins[keep], dtype), _tensor(rays.directions[keep], dtype),
                         _tensor(rays.t_near[keep], dtype), _tensor(rays.t_far[keep], dtype),
                         sun_sc[torch.as_tensor(keep)], model, cfg.train.solar_samples, gen)
    return loss_solar(terms.transmittance, terms.alphas, terms.shading)


def training_step(model, grid: OccupancyGrid, dataset: SceneDataset, ids: np.ndarray, robust: RobustState,
                  step: int, cfg: RunConfig, gen: torch.Generator, dtype: torch.dtype):
    r = dataset.rays
    sun = _tensor(dataset.sun_dirs[ids], dtype)
    out = render_rays(_tensor(r.origins[ids], dtype), _tensor(r.directions[ids], dtype),
                      _tensor(r.t_near[ids], dtype), _tensor(r.t_far[ids], dtype), sun, model, grid,
                      dataset.bounds, gen, cfg.grid.max_samples, cfg.grid.min_samples,
                      torch.as_tensor(r.hit[ids]))
    residuals, l_rgb = loss_rgb(out.rgb, _tensor(dataset.rgb[ids], dtype))
    if cfg.train.robust:
        robust.snapshot(residuals)
        weights = robust_weights(robust, step)
    else:
        weights = torch.ones_like(residuals)
    l_robust = (weights.detach() * residuals).sum()
    l_solar = solar_loss(model, dataset, sun, cfg, gen, dtype)
    l_final = loss_final(l_robust, l_solar, cfg.train.lambda_solar)
    losses = LossBreakdown(l_rgb, l_robust, l_solar, l_final, weights, cfg.train.lambda_solar)
    samples = out.samples.counts[out.samples.hit].to(torch.float64)
    return losses, float(samples.mean()) if samples.numel() else 0.0


# -------------------------- Validation --------------------------

def validation_psnr(model, grid: OccupancyGrid, dataset: SceneDataset, cfg: RunConfig) -> float:
    views = dataset.manifest.test_views
    if not views:
        return float("nan")
    scores = []
    for v in views:
        rec = dataset.manifest.images[v]
        rendered = render_batch(dataset.view_rays(v), rec.sun.vector, model, grid, dataset.bounds,
                                cfg.train.render_chunk, cfg.grid.max_samples, cfg.grid.min_samples)
        scores.append(psnr(rendered.rgb, dataset.rgb[dataset.view_slice(v)]))
    return float(np.mean(scores))


def validation_mae(model, grid: OccupancyGrid, dataset: SceneDataset, gt: Optional[DsmRaster],
                   cfg: RunConfig) -> float:
    if gt is None:
        return float("nan")
    dsm = extract_dsm(model, grid, dataset.bounds, chunk=cfg.train.render_chunk,
                      max_samples=cfg.grid.max_samples, min_samples=cfg.grid.min_samples, like=gt)
    if not dsm.valid.any():
        log.warning("validation DSM has no valid cells")
        return float("nan")
    return mae(dsm, gt)[0]


# -------------------------- Loop --------------------------

def _write_metrics(rows: List[Dict[str, float]], run_dir: Path) -> pd.DataFrame:
    frame = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    frame.to_csv(run_dir / METRICS_NAME, index=False)
    return frame


def train(dataset: SceneDataset, cfg: RunConfig, run_dir: Union[str, Path]) -> TrainResult:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    t = cfg.train
    torch.manual_seed(t.seed)
    gen = torch.Generator().manual_seed(t.seed)

    model = SatNgpField(cfg.hash, cfg.sh, cfg.field)
    dtype = next(model.parameters()).dtype
    grid = OccupancyGrid(cfg.grid)
    optimizer = make_optimizer(model, t.lr, t.betas, t.eps)
    n_steps = steps_per_epoch(dataset, cfg)
    scheduler = make_scheduler(optimizer, n_steps, t.lr_gamma)
    robust = RobustState(percentile=t.robust_percentile, warmup_steps=t.robust_warmup_steps,
                         patch_size=t.patch_size if t.patch_sampling else None)
    gt = read_dsm(dataset.manifest.gt_dsm) if dataset.manifest.gt_dsm else None
    pool = dataset.train_ray_ids()

    ckpt = run_dir / CHECKPOINT_NAME
    save_checkpoint(ckpt, cfg, dataset.bounds, model, grid, 0, 0, optimizer if t.save_optimizer else None)
    rows: List[Dict[str, float]] = []
    metrics = _write_metrics(rows, run_dir)
    log.info("training %d epochs x %d steps on %d rays (batch %d, robust=%s, patches=%s)",
             t.epochs, n_steps, len(pool), t.batch_rays, t.robust, t.patch_sampling)

    start = time.perf_counter()
    step = 0
    for epoch in range(1, t.epochs + 1):
        sums = dict(l_rgb=0.0, l_robust=0.0, l_solar=0.0, l_final=0.0)
        spr = 0.0
        for _ in range(n_steps):
            step += 1
            model.train()
            ids = sample_batch(dataset, pool, cfg, gen)
            losses, samples = training_step(model, grid, dataset, ids, robust, step, cfg, gen, dtype)
            if not torch.isfinite(losses.l_final):
                raise TrainingDivergedError(step, str(ckpt), f"l_final = {float(losses.l_final)}")
            optimizer.zero_grad(set_to_none=True)
            losses.l_final.backward()
            try:
                check_gradients(model)
            except GradientError:
                log.error("non-finite gradient at step %d; last good checkpoint %s", step, ckpt)
                raise
            optimizer.step()
            scheduler.step()

            if step >= cfg.grid.warmup_steps and (step - cfg.grid.warmup_steps) % cfg.grid.update_interval == 0:
                update_grid(grid, model.density, gen, step, dtype=dtype)

            values = losses.as_floats()
            for k in sums:
                sums[k] += values[k]
            spr += samples
            if t.log_every and step % t.log_every == 0:
                log.debug("step %d: l_final %.5f l_rgb %.5f l_solar %.5f kept %.2f samples/ray %.1f",
                          step, values["l_final"], values["l_rgb"], values["l_solar"],
                          float(losses.weights.mean()), samples)

        model.eval()
        save_checkpoint(ckpt, cfg, dataset.bounds, model, grid, step, epoch,
                        optimizer if t.save_optimizer else None)
        psnr_val = validation_psnr(model, grid, dataset, cfg)
        mae_dsm = validation_mae(model, grid, dataset, gt, cfg)
        row = {"step": step, "epoch": epoch, **{k: v / n_steps for k, v in sums.items()},
               "lr": optimizer.param_groups[0]["lr"], "psnr_val": psnr_val, "mae_dsm": mae_dsm,
               "wall_seconds": time.perf_counter() - start}
        rows.append(row)
        metrics = _write_metrics(rows, run_dir)
        log.info("epoch %d/%d step %d: l_final %.5f l_rgb %.5f l_solar %.5f lr %.5f psnr %.2f dB "
                 "mae %.3f m samples/ray %.1f occupied %.1f%%", epoch, t.epochs, step, row["l_final"],
                 row["l_rgb"], row["l_solar"], row["lr"], psnr_val, mae_dsm, spr / n_steps,
                 100.0 * grid.occupied_fraction())
    return TrainResult(ckpt, metrics, model, grid, step)
