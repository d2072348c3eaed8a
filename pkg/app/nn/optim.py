"""
Optimizer and learning-rate schedule.
AdamW (decoupled weight decay) and reduce-on-plateau with patience counted in epochs.
"""
from typing import Iterable, Sequence

import torch

from app.core.errors import TrainingError
from app.core.logger import logger


def make_optimizer(params: Iterable[torch.nn.Parameter], lr: float = 1e-4,
                   weight_decay: float = 1e-5) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=weight_decay)


def make_plateau_scheduler(optimizer: torch.optim.Optimizer, factor: float = 0.3, patience: int = 3,
                           min_lr: float = 1e-7) -> torch.optim.lr_scheduler.ReduceLROnPlateau:
    """Reduce lr once `patience` consecutive epochs fail to improve on the best loss."""
    return torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer, mode="min", factor=factor, patience=patience - 1, min_lr=min_lr)


def plateau_scheduler(history: Sequence[float], lr: float = 1e-4, factor: float = 0.3,
                      patience: int = 3, min_lr: float = 1e-7) -> float:
    """Learning rate after replaying a validation-loss history."""
    dummy = torch.zeros(1, requires_grad=True)
    optimizer = torch.optim.SGD([dummy], lr=lr)
    scheduler = make_plateau_scheduler(optimizer, factor, patience, min_lr)
    for value in history:
        scheduler.step(value)
    return optimizer.param_groups[0]["lr"]


def current_lr(optimizer: torch.optim.Optimizer) -> float:
    return optimizer.param_groups[0]["lr"]


def check_gradients(params: Iterable[torch.nn.Parameter]):
    for p in params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            bad = int((~torch.isfinite(p.grad)).sum())
            logger.error(f"Non-finite gradient: {bad} entries in a parameter of shape {tuple(p.shape)}")
            raise TrainingError(f"non-finite gradient ({bad} entries, parameter shape {tuple(p.shape)})")


def optimize_step(optimizer: torch.optim.Optimizer):
    """Validate gradients, then apply one AdamW step."""
    params = [p for group in optimizer.param_groups for p in group["params"]]
    check_gradients(params)
    optimizer.step()
