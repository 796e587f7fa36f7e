"""Multi-resolution hash encoding of positions and real SH encoding of sun directions"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import torch
import torch.nn as nn

from services.errors import ConfigError

log = logging.getLogger(__name__)

HASH_PRIMES = (1, 2654435761, 805459861)
FEATURE_INIT_RANGE = 1e-4

# 8 voxel corners as (dx, dy, dz) bit patterns
_CORNERS = torch.tensor([[(k >> 2) & 1, (k >> 1) & 1, k & 1] for k in range(8)], dtype=torch.int64)


@dataclass
class HashGridConfig:
    table_size: int = 2 ** 19
    levels: int = 8
    features_per_level: int = 2
    coarsest_res: int = 16
    finest_res: int = 512

    def __post_init__(self):
        t = int(self.table_size)
        if t < 1 or t & (t - 1):
            raise ConfigError(f"hash.table_size must be a power of two, got {t}", "hash.table_size")
        if self.levels < 1:
            raise ConfigError("hash.levels must be >= 1", "hash.levels")
        if self.features_per_level < 1:
            raise ConfigError("hash.features_per_level must be >= 1", "hash.features_per_level")
        if not 1 <= self.coarsest_res <= self.finest_res:
            raise ConfigError("hash.coarsest_res must lie in [1, finest_res]", "hash.coarsest_res")

    @property
    def growth(self) -> float:
        if self.levels == 1:
            return 1.0
        return math.exp((math.log(self.finest_res) - math.log(self.coarsest_res)) / (self.levels - 1))

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level


def level_resolution(level: int, cfg: HashGridConfig) -> int:
    if not 0 <= level < cfg.levels:
        raise IndexError(f"level {level} outside [0, {cfg.levels})")
    # the small epsilon keeps floor(N_min * b^(L-1)) from landing one below N_max
    res = int(math.floor(cfg.coarsest_res * cfg.growth ** level + 1e-6))
    return min(max(res, cfg.coarsest_res), cfg.finest_res)


def is_dense_level(level: int, cfg: HashGridConfig) -> bool:
    return (level_resolution(level, cfg) + 1) ** 3 <= cfg.table_size


def hash_index(c: Union[torch.Tensor, Sequence[int]], level: int, cfg: HashGridConfig):
    """Table index of integer grid vertices c (..., 3) on the given level."""
    scalar = not isinstance(c, torch.Tensor)
    c = torch.as_tensor(c, dtype=torch.int64)
    res = level_resolution(level, cfg)
    if is_dense_level(level, cfg):
        side = res + 1
        idx = (c[..., 0] * side + c[..., 1]) * side + c[..., 2]
    else:
        idx = (c[..., 0] * HASH_PRIMES[0]) ^ (c[..., 1] * HASH_PRIMES[1]) ^ (c[..., 2] * HASH_PRIMES[2])
        idx = idx % cfg.table_size
    return int(idx) if scalar else idx


class HashGrid(nn.Module):
    """Trainable (levels, table_size, features) feature table with trilinear lookup."""

    def __init__(self, cfg: HashGridConfig, generator: Optional[torch.Generator] = None,
                 dtype: Optional[torch.dtype] = None):
        super().__init__()
        self.cfg = cfg
        table = torch.empty(cfg.levels, cfg.table_size, cfg.features_per_level, dtype=dtype)
        table.uniform_(-FEATURE_INIT_RANGE, FEATURE_INIT_RANGE, generator=generator)
        self.table = nn.Parameter(table)

    def resolutions(self) -> List[int]:
        return [level_resolution(l, self.cfg) for l in range(self.cfg.levels)]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.numel() and (x.min() < -1e-6 or x.max() > 1.0 + 1e-6):
            log.warning("encode_position: %d coordinates outside [0,1]^3 clamped",
                        int(((x < 0) | (x > 1)).any(dim=-1).sum()))
        x = x.clamp(0.0, 1.0)
        corners = _CORNERS.to(x.device)
        out = []
        for level in range(self.cfg.levels):
            res = level_resolution(level, self.cfg)
            pos = x * res
            base = torch.floor(pos).clamp(0, res - 1)
            frac = pos - base
            verts = base.to(torch.int64).unsqueeze(-2) + corners          # (..., 8, 3)
            idx = hash_index(verts, level, self.cfg)                       # (..., 8)
            feats = self.table[level][idx]                                 # (..., 8, F)
            w = torch.where(corners.bool(), frac.unsqueeze(-2), 1.0 - frac.unsqueeze(-2)).prod(dim=-1)
            out.append((w.unsqueeze(-1) * feats).sum(dim=-2))
        return torch.cat(out, dim=-1)


def encode_position(x: torch.Tensor, table: HashGrid) -> torch.Tensor:
    return table(x)


# -------------------------- Spherical harmonics --------------------------

@dataclass
class ShConfig:
    degree: int = 4

    def __post_init__(self):
        if not 1 <= self.degree <= 5:
            raise ConfigError(f"sh.degree must lie in [1, 5], got {self.degree}", "sh.degree")

    @property
    def output_dim(self) -> int:
        return self.degree ** 2


SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)
SH_C4 = (2.5033429417967046, -1.7701307697799304, 0.9461746957575601, -0.6690465435572892,
         0.10578554691520431, -0.6690465435572892, 0.47308734787878004, -1.7701307697799304,
         0.6258357354491761)


def encode_sh(d: torch.Tensor, cfg: ShConfig) -> torch.Tensor:
    """Real SH basis (bands 0 .. degree-1, m = -l..l within a band) of unit directions (..., 3)."""
    norm = d.norm(dim=-1, keepdim=True)
    if d.numel() and (norm - 1.0).abs().max() > 1e-6:
        log.warning("encode_sh: non-unit directions renormalized")
        d = d / norm
    x, y, z = d.unbind(-1)
    out = [torch.full_like(x, SH_C0)]
    if cfg.degree > 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if cfg.degree > 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out += [
            SH_C2[0] * xy,
            SH_C2[1] * yz,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * xz,
            SH_C2[4] * (xx - yy),
        ]
    if cfg.degree > 3:
        out += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * xy * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3 * yy),
        ]
    if cfg.degree > 4:
        out += [
            SH_C4[0] * xy * (xx - yy),
            SH_C4[1] * yz * (3 * xx - yy),
            SH_C4[2] * xy * (7 * zz - 1),
            SH_C4[3] * yz * (7 * zz - 3),
            SH_C4[4] * (zz * (35 * zz - 30) + 3),
            SH_C4[5] * xz * (7 * zz - 3),
            SH_C4[6] * (xx - yy) * (7 * zz - 1),
            SH_C4[7] * xz * (xx - 3 * yy),
            SH_C4[8] * (xx * (xx - 3 * yy) - yy * (3 * xx - yy)),
        ]
    return torch.stack(out, dim=-1)
