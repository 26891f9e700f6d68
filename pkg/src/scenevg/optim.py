"""AdamW parameter groups and learning-rate schedules."""

from __future__ import annotations

import math

import torch


class NonFiniteLossError(FloatingPointError):
    pass


def make_optimizer(groups, weight_decay: float = 1e-4) -> torch.optim.AdamW:
    """``groups`` is a list of ``(parameters, lr)`` pairs; empty groups are dropped."""
    param_groups = []
    for params, lr in groups:
        params = [p for p in params if p.requires_grad]
        if params:
            param_groups.append({"params": params, "lr": lr, "initial_lr": lr})
    return torch.optim.AdamW(param_groups, weight_decay=weight_decay)


def step_decay_factor(epoch: int, decay_epoch: int, gamma: float = 0.1) -> float:
    """Factor ``gamma`` from ``decay_epoch`` on (0-based epochs), 1 before."""
    return gamma if epoch >= decay_epoch else 1.0


def milestone_factor(step: int, total_steps: int, fractions=(0.67, 0.89), gamma: float = 0.1) -> float:
    """Multiply by ``gamma`` at each fraction of ``total_steps``."""
    passed = sum(step >= math.ceil(f * total_steps) for f in fractions)
    return gamma ** passed


def set_lr_factor(optimizer: torch.optim.Optimizer, factor: float):
    for g in optimizer.param_groups:
        g["lr"] = g["initial_lr"] * factor


def check_finite(loss: torch.Tensor, context: str = ""):
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss {float(loss.detach())} {context}".strip())
