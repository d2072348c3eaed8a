"""
Finite-difference gradient check.

The output is reduced to L = sum(out * P) with a fixed random projection P (entries of
magnitude 0.5 to 1.5 with random sign), autograd gives dL/dtheta, and central differences
of L give the numeric gradient. Every element is compared on its own:

    err_k = |a_k - n_k| / max(|a_k|, |n_k|, floor)

and the check reports the largest err_k. The norm-wise ratio
max|a - n| / max(max|a|, max|n|, floor) is reported alongside.
"""
from dataclasses import dataclass
from typing import Callable, Sequence, Tuple, Union

import torch

from app.core.errors import ConfigError

Outputs = Union[torch.Tensor, Sequence[torch.Tensor]]
PointBuilder = Callable[[torch.Generator], Tuple[Callable[[], Outputs], Sequence[torch.Tensor]]]

# central-difference weights per offset multiple of h
_STENCILS = {
    2: ((1, 0.5), (-1, -0.5)),
    4: ((1, 8.0 / 12.0), (-1, -8.0 / 12.0), (2, -1.0 / 12.0), (-2, 1.0 / 12.0)),
}


@dataclass(frozen=True)
class GradcheckReport:
    elementwise: float
    normwise: float


def _as_tuple(out: Outputs):
    return (out,) if isinstance(out, torch.Tensor) else tuple(out)


def _projection(shape, dtype, gen: torch.Generator) -> torch.Tensor:
    magnitude = 0.5 + torch.rand(shape, generator=gen, dtype=dtype)
    sign = 2.0 * (torch.rand(shape, generator=gen, dtype=dtype) < 0.5).to(dtype) - 1.0
    return sign * magnitude


def gradcheck_report(fn: Callable[[], Outputs], tensors: Sequence[torch.Tensor], h: float = 1e-5,
                     seed: int = 0, floor: float = 1e-12, stencil: int = 2) -> GradcheckReport:
    """
    Args:
        fn: closure producing the output(s) from the current values of `tensors`.
        tensors: double-precision leaves (inputs or parameters) to check.
        h: central-difference step.
        floor: smallest denominator of the relative error.
        stencil: 2 (f(x+h) - f(x-h)) / 2h, or the 4-point fourth-order central formula.
    """
    if stencil not in _STENCILS:
        raise ConfigError(f"stencil must be one of {sorted(_STENCILS)}, got {stencil}")
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        outs = _as_tuple(fn())
    projections = [_projection(o.shape, o.dtype, gen) for o in outs]

    def objective():
        return sum((o * p).sum() for o, p in zip(_as_tuple(fn()), projections))

    leaves = list(tensors)
    for t in leaves:
        t.requires_grad_(True)
    analytic = torch.autograd.grad(objective(), leaves, allow_unused=True)

    elementwise, normwise = 0.0, 0.0
    with torch.no_grad():
        for t, a in zip(leaves, analytic):
            a = torch.zeros_like(t) if a is None else a
            numeric = torch.zeros_like(t)
            flat = t.view(-1)
            num_flat = numeric.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                total = 0.0
                for offset, weight in _STENCILS[stencil]:
                    flat[k] = orig + offset * h
                    total += weight * objective().item()
                flat[k] = orig
                num_flat[k] = total / h
            diff = (a - numeric).abs()
            denom = torch.clamp(torch.maximum(a.abs(), numeric.abs()), min=floor)
            if diff.numel():
                elementwise = max(elementwise, (diff / denom).max().item())
                scale = max(a.abs().max().item(), numeric.abs().max().item(), floor)
                normwise = max(normwise, diff.max().item() / scale)
    return GradcheckReport(elementwise=elementwise, normwise=normwise)


def gradcheck(fn: Callable[[], Outputs], tensors: Sequence[torch.Tensor], h: float = 1e-5,
              seed: int = 0, floor: float = 1e-12, stencil: int = 2) -> float:
    """Largest element-wise relative error over the checked tensors."""
    return gradcheck_report(fn, tensors, h=h, seed=seed, floor=floor, stencil=stencil).elementwise


def gradcheck_points(build: PointBuilder, n_points: int = 10, seed: int = 0, **kwargs) -> float:
    """
    Worst element-wise error over `n_points` random evaluation points.

    `build(gen)` draws one point from the generator and returns (fn, tensors).
    """
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for k in range(n_points):
        fn, tensors = build(gen)
        worst = max(worst, gradcheck(fn, tensors, seed=seed + k, **kwargs))
    return worst
