"""
Network layers on top of torch autograd.
Functional ops validate shapes and raise toolkit errors; modules wrap them with parameters.
"""
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from app.core.errors import ShapeError

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def _check_4d(x: torch.Tensor, what: str):
    if x.dim() != 4:
        raise ShapeError(f"{what} must be N x C x H x W, got shape {tuple(x.shape)}")


def conv2d(x: torch.Tensor, w: torch.Tensor, b: Optional[torch.Tensor] = None) -> torch.Tensor:
    """3x3 (pad 1) or 1x1 (pad 0) cross-correlation."""
    _check_4d(x, "conv input")
    _check_4d(w, "conv weight")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv weight expects {w.shape[1]} input channels, got {x.shape[1]}")
    k = w.shape[-1]
    if w.shape[-2] != k or k not in (1, 3):
        raise ShapeError(f"only 1x1 and 3x3 kernels are supported, got {tuple(w.shape[-2:])}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv bias shape {tuple(b.shape)} does not match {w.shape[0]} outputs")
    return F.conv2d(x, w, b, padding=k // 2)


def batchnorm2d(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor,
                running_mean: torch.Tensor, running_var: torch.Tensor, training: bool) -> torch.Tensor:
    _check_4d(x, "batchnorm input")
    if x.shape[2] * x.shape[3] == 0:
        raise ShapeError("batchnorm input has zero spatial extent")
    return F.batch_norm(x, running_mean, running_var, gamma, beta, training=training,
                        momentum=BN_MOMENTUM, eps=BN_EPS)


def relu(x: torch.Tensor) -> torch.Tensor:
    return F.relu(x)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def maxpool2x2(x: torch.Tensor) -> torch.Tensor:
    _check_4d(x, "maxpool input")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool 2x2 needs even spatial dims, got {tuple(x.shape[2:])}")
    return F.max_pool2d(x, 2)


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    _check_4d(x, "upsample input")
    return F.interpolate(x, scale_factor=2, mode="nearest")


def concat(*xs: torch.Tensor) -> torch.Tensor:
    shapes = {(t.shape[0], *t.shape[2:]) for t in xs}
    if len(shapes) != 1:
        raise ShapeError(f"cannot concatenate tensors with shapes {[tuple(t.shape) for t in xs]}")
    return torch.cat(xs, dim=1)


@dataclass
class AttentionGateParams:
    W_x: torch.Tensor
    W_g: torch.Tensor
    b_g: torch.Tensor
    psi: torch.Tensor
    b_psi: torch.Tensor


def attention_gate(x: torch.Tensor, g: torch.Tensor, p: AttentionGateParams) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    alpha = sigmoid(psi^T relu(W_x^T x + W_g^T g + b_g) + b_psi); returns (x * alpha, alpha).

    g is resampled (nearest) to x's spatial size first.
    """
    _check_4d(x, "gate skip input")
    _check_4d(g, "gate signal")
    if p.W_x.shape[1] != x.shape[1] or p.W_g.shape[1] != g.shape[1] or p.W_x.shape[0] != p.W_g.shape[0]:
        raise ShapeError("attention gate channel dimensions are inconsistent")
    if p.psi.shape[:2] != (1, p.W_x.shape[0]):
        raise ShapeError(f"psi must map {p.W_x.shape[0]} channels to 1, got {tuple(p.psi.shape)}")
    if g.shape[2:] != x.shape[2:]:
        g = F.interpolate(g, size=x.shape[2:], mode="nearest")
    q = relu(conv2d(x, p.W_x) + conv2d(g, p.W_g, p.b_g))
    alpha = sigmoid(conv2d(q, p.psi, p.b_psi))
    return x * alpha, alpha


class BatchNorm(nn.BatchNorm2d):
    def __init__(self, channels: int):
        super().__init__(channels, eps=BN_EPS, momentum=BN_MOMENTUM)

    def forward(self, x):
        return batchnorm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                           self.training or not self.track_running_stats)


class ConvBlock(nn.Module):
    """[Conv 3x3 + BN + ReLU] x 2."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1, bias=False)
        self.bn1 = BatchNorm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1, bias=False)
        self.bn2 = BatchNorm(out_ch)

    def forward(self, x):
        x = relu(self.bn1(conv2d(x, self.conv1.weight)))
        return relu(self.bn2(conv2d(x, self.conv2.weight)))


class AttentionGate(nn.Module):
    def __init__(self, F_g: int, F_l: int, F_int: int):
        super().__init__()
        self.W_x = nn.Conv2d(F_l, F_int, kernel_size=1, bias=False)
        self.W_g = nn.Conv2d(F_g, F_int, kernel_size=1, bias=True)
        self.psi = nn.Conv2d(F_int, 1, kernel_size=1, bias=True)

    def params(self) -> AttentionGateParams:
        return AttentionGateParams(self.W_x.weight, self.W_g.weight, self.W_g.bias,
                                   self.psi.weight, self.psi.bias)

    def forward(self, x, g):
        out, _ = attention_gate(x, g, self.params())
        return out

    def open_gate(self, bias: float = 1.0e4):
        """Saturate alpha to exactly 1 in floating point."""
        with torch.no_grad():
            self.psi.bias.fill_(bias)
