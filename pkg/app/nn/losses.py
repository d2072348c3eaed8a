import torch
import torch.nn.functional as F

from app.core.errors import ConfigError, ShapeError


def _check(pred: torch.Tensor, target: torch.Tensor):
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check(pred, target)
    return F.mse_loss(pred, target)


def mae_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _check(pred, target)
    return F.l1_loss(pred, target)


LOSSES = {"mse": mse_loss, "mae": mae_loss}


def get_loss(name: str):
    if name not in LOSSES:
        raise ConfigError(f"unknown loss '{name}', expected one of {sorted(LOSSES)}")
    return LOSSES[name]
