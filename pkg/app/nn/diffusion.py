"""
Diffusion machinery for residual refinement.
Linear beta schedule, closed-form forward noising, quality-adaptive DDIM step count,
deterministic DDIM sampling of the residual, and an EMA of the denoiser weights.
"""
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
import torch
from scipy.special import expit

from app.core.errors import BoundsError, ConfigError, DataError, ShapeError
from app.core.logger import logger
from app.nn.layers import concat


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """Arrays are indexed by t - 1 for t in [1, T]."""
    T: int
    beta_start: float
    beta_end: float
    beta_end_val: float
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray
    sqrt_alpha_bar: np.ndarray
    sqrt_one_minus_alpha_bar: np.ndarray

    def _index(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise BoundsError(f"timestep outside [1, {self.T}]")
        return t.astype(np.int64) - 1

    def ab(self, t: int) -> float:
        """alpha_bar_t, with alpha_bar_0 = 1."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[self._index(t)])


def build_schedule(T: int = 2000, beta_start: float = 1e-6, beta_end: float = 0.01,
                   beta_end_val: float = 0.5) -> DiffusionSchedule:
    if T < 1:
        raise ConfigError(f"diffusion needs T >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bar = np.cumprod(alphas)
    return DiffusionSchedule(
        T=T, beta_start=beta_start, beta_end=beta_end, beta_end_val=beta_end_val,
        betas=betas, alphas=alphas, alpha_bar=alpha_bar,
        sqrt_alpha_bar=np.sqrt(alpha_bar), sqrt_one_minus_alpha_bar=np.sqrt(1.0 - alpha_bar),
    )


def _coef(values: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    """Per-sample coefficients broadcast over C x H x W."""
    c = torch.as_tensor(np.atleast_1d(values), dtype=like.dtype, device=like.device)
    return c.reshape(-1, *([1] * (like.dim() - 1)))


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps."""
    if eps.shape != x0.shape:
        raise ShapeError(f"noise {tuple(eps.shape)} does not match x0 {tuple(x0.shape)}")
    idx = schedule._index(torch.as_tensor(t).cpu().numpy())
    return _coef(schedule.sqrt_alpha_bar[idx], x0) * x0 + _coef(schedule.sqrt_one_minus_alpha_bar[idx], x0) * eps


def predict_x0(x_t: torch.Tensor, t, eps_hat: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    idx = schedule._index(torch.as_tensor(t).cpu().numpy())
    return (x_t - _coef(schedule.sqrt_one_minus_alpha_bar[idx], x_t) * eps_hat) / _coef(schedule.sqrt_alpha_bar[idx], x_t)


@dataclass(frozen=True)
class AdaptiveStepConfig:
    t_min: int = 10
    t_max: int = 50
    alpha: float = 0.1
    beta: float = 30.0

    def __post_init__(self):
        if not 1 <= self.t_min < self.t_max:
            raise ConfigError(f"need 1 <= t_min < t_max, got {self.t_min}, {self.t_max}")


def adaptive_steps(Q: float, cfg: AdaptiveStepConfig = AdaptiveStepConfig()) -> int:
    """T_min + (T_max - T_min) * sigmoid(alpha * Q - beta), rounded half up and clamped."""
    if not np.isfinite(Q):
        raise DataError(f"quality score must be finite, got {Q}")
    raw = cfg.t_min + (cfg.t_max - cfg.t_min) * expit(cfg.alpha * Q - cfg.beta)
    return int(min(max(np.floor(raw + 0.5), cfg.t_min), cfg.t_max))


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Evenly spaced increasing sub-sequence of [1, T] that ends at T."""
    return np.round(np.linspace(0, T, steps + 1)[1:]).astype(np.int64)


@torch.no_grad()
def ddim_refine(nets, I_osem: torch.Tensor, schedule: DiffusionSchedule, steps: int,
                cfg: AdaptiveStepConfig = AdaptiveStepConfig(), seed: int = 0,
                eta: float = 0.0, return_parts: bool = False):
    """
    Deterministic reverse process on the residual r = I_gt - I_coarse.

    Returns:
        clamp(I_coarse + r_hat, 0, 1), or (refined, I_coarse, r_hat) when return_parts is set.
    """
    if not cfg.t_min <= steps <= cfg.t_max:
        raise ConfigError(f"DDIM steps must be in [{cfg.t_min}, {cfg.t_max}], got {steps}")
    if eta != 0.0:
        raise ConfigError("only deterministic sampling (eta = 0) is supported")

    I_coarse = nets.coarse(I_osem)
    gen = torch.Generator(device="cpu").manual_seed(seed)
    x = torch.randn(I_coarse.shape, generator=gen, dtype=I_coarse.dtype).to(I_coarse.device)

    ts = ddim_timesteps(schedule.T, steps)[::-1]
    for k, t in enumerate(ts):
        t_prev = int(ts[k + 1]) if k + 1 < len(ts) else 0
        t_batch = torch.full((x.shape[0],), int(t), dtype=torch.long)
        eps_hat = nets.denoiser(concat(x, I_coarse), t_batch)
        x0_hat = predict_x0(x, int(t), eps_hat, schedule)
        ab_prev = schedule.ab(t_prev)
        x = np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat
    refined = torch.clamp(I_coarse + x, 0.0, 1.0)
    logger.debug(f"DDIM refinement finished in {steps} steps")
    if return_parts:
        return refined, I_coarse, x
    return refined


class EmaState:
    """Exponential moving average of trainable parameters (shadow copies)."""

    def __init__(self, model: torch.nn.Module, decay: float = 0.9999, warmup: bool = False):
        self.model = model
        self.decay = decay
        self.warmup = warmup
        self.shadow: Dict[str, torch.Tensor] = {}
        self.backup: Dict[str, torch.Tensor] = {}
        self.register()

    def register(self):
        for name, param in self.model.named_parameters():
            if param.requires_grad:
                self.shadow[name] = param.detach().clone()

    def effective_decay(self, global_step: Optional[int]) -> float:
        if self.warmup and global_step is not None:
            return min(self.decay, (1 + global_step) / (10 + global_step))
        return self.decay

    def update(self, global_step: Optional[int] = None):
        """shadow <- decay * shadow + (1 - decay) * live."""
        decay = self.effective_decay(global_step)
        with torch.no_grad():
            for name, param in self.model.named_parameters():
                if not param.requires_grad:
                    continue
                if name not in self.shadow or self.shadow[name].shape != param.shape:
                    raise ShapeError(f"EMA shadow for '{name}' does not match the live parameter")
                self.shadow[name].mul_(decay).add_(param.detach(), alpha=1.0 - decay)

    def apply_shadow(self):
        for name, param in self.model.named_parameters():
            if param.requires_grad:
                self.backup[name] = param.data
                param.data = self.shadow[name].clone()

    def restore(self):
        for name, param in self.model.named_parameters():
            if param.requires_grad:
                param.data = self.backup[name]
        self.backup = {}


def ema_update(state: EmaState, global_step: Optional[int] = None) -> EmaState:
    state.update(global_step)
    return state
