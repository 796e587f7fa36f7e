"""RAdam optimizer and the per-epoch exponential learning-rate schedule"""
import math
from typing import Any, Dict, Iterable, Tuple

import torch
from torch.optim.lr_scheduler import LambdaLR
from torch.optim.optimizer import Optimizer

from services.errors import GradientError

RECTIFY_THRESHOLD = 4.0
LR_GAMMA = 0.9


def rectification(step: int, beta2: float) -> Tuple[float, float]:
    """(rho_t, r_t); r_t is 0 when rho_t <= 4 and the variance is not tractable yet."""
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    beta2_t = beta2 ** step
    rho_t = rho_inf - 2.0 * step * beta2_t / (1.0 - beta2_t)
    if rho_t <= RECTIFY_THRESHOLD:
        return rho_t, 0.0
    r = math.sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
    return rho_t, r


@torch.no_grad()
def radam_step(param: torch.Tensor, grad: torch.Tensor, state: Dict[str, Any], lr: float,
               betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               group: str = "params") -> None:
    """One in-place RAdam update of `param`; state holds step, exp_avg and exp_avg_sq."""
    if param.shape != grad.shape:
        raise ValueError(f"gradient shape {tuple(grad.shape)} does not match parameter {tuple(param.shape)}")
    if not torch.isfinite(grad).all():
        raise GradientError(group)
    beta1, beta2 = betas
    if not state:
        state["step"] = 0
        state["exp_avg"] = torch.zeros_like(param)
        state["exp_avg_sq"] = torch.zeros_like(param)
    exp_avg, exp_avg_sq = state["exp_avg"], state["exp_avg_sq"]

    exp_avg.mul_(beta1).add_(grad, alpha=1.0 - beta1)
    exp_avg_sq.mul_(beta2).addcmul_(grad, grad, value=1.0 - beta2)
    state["step"] += 1
    t = state["step"]

    bias1 = 1.0 - beta1 ** t
    _, r = rectification(t, beta2)
    if r > 0.0:
        denom = (exp_avg_sq / (1.0 - beta2 ** t)).sqrt().add_(eps)
        param.addcdiv_(exp_avg, denom, value=-lr * r / bias1)
    else:
        param.add_(exp_avg, alpha=-lr / bias1)


class RAdam(Optimizer):
    """
    Rectified Adam over named parameter groups; a group dict may carry a
    'name' used in GradientError diagnostics.
    """

    def __init__(self, params: Iterable, lr: float = 0.01, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        if lr < 0.0:
            raise ValueError(f"invalid learning rate {lr}")
        defaults = dict(lr=lr, betas=tuple(betas), eps=eps, name="params")
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                radam_step(p, p.grad, self.state[p], group["lr"], group["betas"], group["eps"], group["name"])
        return loss


def make_optimizer(model, lr: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8) -> RAdam:
    groups = [{"params": params, "name": name} for name, params in model.parameter_groups().items()]
    return RAdam(groups, lr=lr, betas=betas, eps=eps)


# -------------------------- Schedule --------------------------

def lr_multiplier(step: int, steps_per_epoch: int, gamma: float = LR_GAMMA) -> float:
    return gamma ** (step / max(1, steps_per_epoch))


def make_scheduler(optimizer: Optimizer, steps_per_epoch: int, gamma: float = LR_GAMMA) -> LambdaLR:
    return LambdaLR(optimizer, lambda step: lr_multiplier(step, steps_per_epoch, gamma))
