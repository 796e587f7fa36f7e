"""
Training losses: photometric MSE, robust reweighting and solar correction.

    l_final  = l_robust + lambda * l_solar
    l_robust = sum_r w(r) * ||C(r) - C_gt(r)||^2, w from the previous residual snapshot
    l_solar  = sum_r [ sum_i (T_i - s_i)^2 + 1 - sum_i T_i a_i s_i ]
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn.functional as F

import services
from services.errors import DataMismatchError

log = logging.getLogger(__name__)

LAMBDA_SOLAR = 0.05
PATCH_SMOOTH_THRESHOLD = 0.5
PATCH_VOTE_THRESHOLD = 0.6


@dataclass
class LossBreakdown:
    l_rgb: torch.Tensor
    l_robust: torch.Tensor
    l_solar: torch.Tensor
    l_final: torch.Tensor
    weights: torch.Tensor
    lambda_solar: float = LAMBDA_SOLAR

    def as_floats(self):
        return {
            "l_rgb": float(self.l_rgb),
            "l_robust": float(self.l_robust),
            "l_solar": float(self.l_solar),
            "l_final": float(self.l_final),
        }


def loss_rgb(rendered: torch.Tensor, reference: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per-ray squared L2 over the 3 channels and their sum."""
    if rendered.shape != reference.shape:
        raise DataMismatchError("rendered and reference colours differ in shape", rendered.shape, reference.shape)
    residuals = ((rendered - reference) ** 2).sum(dim=-1)
    return residuals, residuals.sum()


@dataclass
class RobustState:
    residuals: Optional[torch.Tensor] = None
    percentile: float = 0.5
    warmup_steps: int = 1000
    patch_size: Optional[int] = None

    def snapshot(self, residuals: torch.Tensor) -> None:
        self.residuals = residuals.detach().clone()


def _patch_filter(inlier: torch.Tensor, patch: int) -> torch.Tensor:
    """3x3 box-smoothed inlier map OR a per-patch majority vote; rays are laid out patch by patch."""
    maps = inlier.to(torch.float64).reshape(-1, 1, patch, patch)
    smooth = F.avg_pool2d(maps, 3, stride=1, padding=1, count_include_pad=False) >= PATCH_SMOOTH_THRESHOLD
    vote = maps.mean(dim=(1, 2, 3), keepdim=True) >= PATCH_VOTE_THRESHOLD
    return (smooth | vote).reshape(-1)


def robust_weights(state: RobustState, step: int) -> torch.Tensor:
    """
    w(r) in {0, 1}: 1 during warmup, afterwards 1 iff the snapshot residual is
    at or below the configured percentile of the snapshot (higher order statistic).
    """
    r = state.residuals
    if r is None or r.numel() == 0:
        log.warning("robust_weights: empty residual set, using unit weights")
        return torch.ones(0 if r is None else r.shape[0])
    if step < state.warmup_steps:
        return torch.ones_like(r)
    tau = torch.quantile(r.to(torch.float64), state.percentile, interpolation="higher")
    inlier = r.to(torch.float64) <= tau
    if state.patch_size:
        inlier = _patch_filter(inlier, state.patch_size)
    return inlier.to(r.dtype)


def loss_solar_per_ray(trans: torch.Tensor, alphas: torch.Tensor, shading: torch.Tensor) -> torch.Tensor:
    """(R, N) transmittance / alpha / shading along sun rays -> (R,) solar correction terms."""
    absorbed = (trans * alphas * shading).sum(dim=-1)
    if services.DEBUG_CHECKS:
        assert torch.all(1.0 - absorbed >= -1e-9), "more direct light absorbed than emitted"
    return ((trans - shading) ** 2).sum(dim=-1) + 1.0 - absorbed


def loss_solar(trans: torch.Tensor, alphas: torch.Tensor, shading: torch.Tensor) -> torch.Tensor:
    return loss_solar_per_ray(trans, alphas, shading).sum()


def loss_final(l_robust, l_solar, lambda_solar: float = LAMBDA_SOLAR):
    return l_robust + lambda_solar * l_solar
