"""
SAT-NGP radiance field.

Hash-encoded position -> 2x64 MISH trunk -> density (softplus) and albedo
(sigmoid). The shading head sees the trunk features together with the SH
encoding of the sun direction; the sky head sees the sun encoding only.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from services.encoding import HashGrid, HashGridConfig, ShConfig, encode_sh
from services.errors import ConfigError, GradientError

log = logging.getLogger(__name__)


@dataclass
class FieldConfig:
    hidden_width: int = 64
    hidden_layers: int = 2
    shading_width: int = 64
    hidden_gain: float = 1.0
    head_gain: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.hidden_width < 1 or self.hidden_layers < 1 or self.shading_width < 1:
            raise ConfigError("field widths and depth must be >= 1", "field.hidden_width")


@dataclass
class FieldOutput:
    sigma: torch.Tensor     # (N,)
    albedo: torch.Tensor    # (N, 3)
    shading: torch.Tensor   # (N,)
    sky: torch.Tensor       # (N, 3)


def mish(x):
    """x * tanh(softplus(x)); softplus switches to the identity above 20 so large inputs stay exact."""
    if isinstance(x, torch.Tensor):
        return x * torch.tanh(F.softplus(x))
    t = torch.as_tensor(x, dtype=torch.float64)
    return float(t * torch.tanh(F.softplus(t)))


def orthogonal_init(rows: int, cols: int, gain: float = 1.0, seed: int = 0,
                    dtype: Optional[torch.dtype] = None) -> torch.Tensor:
    """QR-based (semi-)orthogonal matrix of shape (rows, cols) scaled by gain, deterministic in seed."""
    if rows < 1 or cols < 1:
        raise ValueError("orthogonal_init needs rows, cols >= 1")
    g = torch.Generator().manual_seed(int(seed))
    a = torch.randn(max(rows, cols), min(rows, cols), generator=g, dtype=torch.float64)
    q, r = torch.linalg.qr(a)
    q = q * torch.sign(torch.diagonal(r)).unsqueeze(0)
    if rows < cols:
        q = q.T
    return (gain * q).to(dtype or torch.get_default_dtype())


# -------------------------- Model --------------------------

class SatNgpField(nn.Module):

    def __init__(self, hash_cfg: HashGridConfig, sh_cfg: ShConfig, cfg: FieldConfig,
                 dtype: Optional[torch.dtype] = None):
        super().__init__()
        self.hash_cfg, self.sh_cfg, self.cfg = hash_cfg, sh_cfg, cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        self.encoding = HashGrid(hash_cfg, generator=gen, dtype=dtype)

        w, sh = cfg.hidden_width, sh_cfg.output_dim
        dims = [hash_cfg.output_dim] + [w] * cfg.hidden_layers
        self.trunk = nn.ModuleList(nn.Linear(i, o, dtype=dtype) for i, o in zip(dims[:-1], dims[1:]))
        self.density_head = nn.Linear(w, 1, dtype=dtype)
        self.albedo_head = nn.Linear(w, 3, dtype=dtype)
        self.shading_hidden = nn.Linear(w + sh, cfg.shading_width, dtype=dtype)
        self.shading_head = nn.Linear(cfg.shading_width, 1, dtype=dtype)
        self.sky_head = nn.Linear(sh, 3, dtype=dtype)
        self._init_weights()

    def _init_weights(self):
        layers = list(self.trunk) + [self.shading_hidden]
        heads = [self.density_head, self.albedo_head, self.shading_head, self.sky_head]
        seed = self.cfg.seed * 1000
        with torch.no_grad():
            for k, layer in enumerate(layers + heads):
                gain = self.cfg.hidden_gain if layer in layers else self.cfg.head_gain
                out_f, in_f = layer.weight.shape
                layer.weight.copy_(orthogonal_init(out_f, in_f, gain, seed + k, dtype=layer.weight.dtype))
                layer.bias.zero_()

    # features -> hidden
    def trunk_features(self, pos_feat: torch.Tensor) -> torch.Tensor:
        h = pos_feat
        for layer in self.trunk:
            h = mish(layer(h))
        return h

    def density(self, x: torch.Tensor) -> torch.Tensor:
        h = self.trunk_features(self.encoding(x))
        return F.softplus(self.density_head(h)).squeeze(-1)

    def sky(self, sun_feat: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.sky_head(sun_feat))

    def forward(self, x: torch.Tensor, sun_dirs: torch.Tensor) -> FieldOutput:
        return field_forward(self.encoding(x), encode_sh(sun_dirs, self.sh_cfg), self)

    def parameter_groups(self) -> Dict[str, List[nn.Parameter]]:
        groups: Dict[str, List[nn.Parameter]] = {}
        for name, p in self.named_parameters():
            groups.setdefault(parameter_group(name), []).append(p)
        return groups


_GROUP_PREFIXES = (
    ("encoding.", "hash"),
    ("trunk.", "trunk"),
    ("density_head.", "density"),
    ("albedo_head.", "albedo"),
    ("shading_", "shading"),
    ("sky_head.", "sky"),
)


def parameter_group(name: str) -> str:
    for prefix, group in _GROUP_PREFIXES:
        if name.startswith(prefix):
            return group
    return name.split(".", 1)[0]


def field_forward(pos_feat: torch.Tensor, sun_feat: torch.Tensor, p: SatNgpField) -> FieldOutput:
    if pos_feat.shape[-1] != p.hash_cfg.output_dim:
        raise ConfigError(f"position features have length {pos_feat.shape[-1]}, "
                          f"expected {p.hash_cfg.output_dim}", "hash")
    if sun_feat.shape[-1] != p.sh_cfg.output_dim:
        raise ConfigError(f"sun features have length {sun_feat.shape[-1]}, "
                          f"expected {p.sh_cfg.output_dim}", "sh.degree")
    h = p.trunk_features(pos_feat)
    sigma = F.softplus(p.density_head(h)).squeeze(-1)
    albedo = torch.sigmoid(p.albedo_head(h))
    sun_feat = sun_feat.expand(*h.shape[:-1], sun_feat.shape[-1])
    hs = mish(p.shading_hidden(torch.cat([h, sun_feat], dim=-1)))
    shading = torch.sigmoid(p.shading_head(hs)).squeeze(-1)
    return FieldOutput(sigma, albedo, shading, p.sky(sun_feat))


# -------------------------- Gradients --------------------------

def check_gradients(model: nn.Module) -> None:
    """Raise GradientError naming the first parameter group holding a NaN/Inf gradient."""
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise GradientError(parameter_group(name))


def field_gradients(outputs: torch.Tensor, model: nn.Module,
                    upstream: Optional[torch.Tensor] = None) -> Dict[str, torch.Tensor]:
    """
    Exact reverse-mode gradients of `outputs` (weighted by `upstream`, the
    loss gradient w.r.t. outputs) for every trainable parameter, keyed by name.
    """
    names, params = zip(*[(n, p) for n, p in model.named_parameters() if p.requires_grad])
    if upstream is None and outputs.numel() != 1:
        raise ValueError("upstream gradient required for non-scalar outputs")
    grads = torch.autograd.grad(outputs, params, grad_outputs=upstream, allow_unused=True, retain_graph=True)
    out: Dict[str, torch.Tensor] = {}
    for name, p, g in zip(names, params, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise GradientError(parameter_group(name))
        out[name] = g
    return out
