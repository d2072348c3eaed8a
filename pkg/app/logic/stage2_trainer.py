"""
Stage-2 Trainer - image refinement by residual diffusion.
A coarse U-Net maps the OSEM image to I_coarse; a timestep-conditioned denoiser learns the noise
added to the residual I_gt - I_coarse. Refinement picks the DDIM step count from the quality score
of I_coarse and runs with the EMA weights.
"""
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from tqdm import trange

from app.core.config import Stage2Block, settings
from app.core.errors import ShapeError, TrainingError
from app.core.logger import logger
from app.nn.checkpoint import save_checkpoint
from app.nn.diffusion import (AdaptiveStepConfig, DiffusionSchedule, EmaState, adaptive_steps,
                              build_schedule, ddim_refine, q_sample)
from app.nn.layers import concat
from app.nn.networks import Stage2Config, Stage2Nets
from app.nn.optim import optimize_step
from app.services.quality_service import QualityModel, quality_score

HISTORY_COLUMNS = ["step", "loss", "coarse_loss", "denoise_loss"]


@dataclass(eq=False)
class Stage2Pairs:
    osem: np.ndarray    # (N, 1, H, W) float32 in [0, ~1]
    gt: np.ndarray
    scales: np.ndarray  # per-pair max(I_osem)

    def __len__(self):
        return self.osem.shape[0]


def image_scale(image: np.ndarray) -> float:
    peak = float(np.max(image))
    return peak if peak > 0 else 1.0


def build_stage2_pairs(osem_images: Sequence[np.ndarray], gt_images: Sequence[np.ndarray]) -> Stage2Pairs:
    """Normalize each (I_osem, I_gt) pair by max(I_osem)."""
    osem, gt, scales = [], [], []
    for x, y in zip(osem_images, gt_images):
        if x.shape != y.shape:
            raise ShapeError(f"OSEM image {x.shape} and ground truth {y.shape} differ")
        s = image_scale(x)
        osem.append(x / s)
        gt.append(y / s)
        scales.append(s)
    return Stage2Pairs(
        osem=np.stack(osem)[:, None].astype(np.float32),
        gt=np.stack(gt)[:, None].astype(np.float32),
        scales=np.asarray(scales),
    )


def stage2_config(block: Stage2Block) -> Stage2Config:
    return Stage2Config(coarse_inner=block.coarse_inner, denoiser_inner=block.denoiser_inner,
                        res_blocks=block.res_blocks, channel_mults=tuple(block.channel_mults))


def schedule_from_block(block: Stage2Block) -> DiffusionSchedule:
    return build_schedule(block.t_train, block.beta_start, block.beta_end, block.beta_end_val)


def step_config_from_block(block: Stage2Block) -> AdaptiveStepConfig:
    return AdaptiveStepConfig(block.t_min, block.t_max, block.adaptive_alpha, block.adaptive_beta)


def stage2_train_step(nets: Stage2Nets, batch: Tuple[torch.Tensor, torch.Tensor], schedule: DiffusionSchedule,
                      optimizer: torch.optim.Optimizer, ema: Optional[EmaState] = None,
                      global_step: Optional[int] = None, generator: Optional[torch.Generator] = None,
                      noise: Optional[torch.Tensor] = None,
                      timesteps: Optional[torch.Tensor] = None) -> Dict[str, float]:
    """
    One optimizer step on a batch of (I_osem, I_gt).

    The residual r = I_gt - I_coarse is noised to x_t and the denoiser, conditioned on I_coarse,
    predicts the noise. Loss = L1(I_coarse, I_gt) + L1(eps_hat, eps); the residual target and the
    condition are detached so the denoiser term only trains the denoiser.
    """
    I_osem, I_gt = batch
    if I_osem.shape != I_gt.shape:
        raise ShapeError(f"I_osem {tuple(I_osem.shape)} and I_gt {tuple(I_gt.shape)} differ")
    n = I_osem.shape[0]
    if timesteps is None:
        timesteps = torch.randint(1, schedule.T + 1, (n,), generator=generator)
    if noise is None:
        noise = torch.randn(I_gt.shape, generator=generator, dtype=I_gt.dtype)

    nets.train()
    I_coarse = nets.coarse(I_osem)
    condition = I_coarse.detach()
    x_t = q_sample(I_gt - condition, timesteps, noise, schedule)
    eps_hat = nets.denoiser(concat(x_t, condition), timesteps)

    coarse_loss = F.l1_loss(I_coarse, I_gt)
    denoise_loss = F.l1_loss(eps_hat, noise)
    loss = coarse_loss + denoise_loss
    if not torch.isfinite(loss):
        logger.error(f"Non-finite stage-2 loss at step {global_step}")
        raise TrainingError(f"non-finite stage-2 loss at step {global_step}")

    optimizer.zero_grad()
    loss.backward()
    optimize_step(optimizer)
    if ema is not None:
        ema.update(global_step)
    return {"loss": float(loss), "coarse_loss": float(coarse_loss), "denoise_loss": float(denoise_loss)}


@dataclass(eq=False)
class Stage2Result:
    nets: Stage2Nets
    ema: EmaState
    history: pd.DataFrame


class Stage2Trainer:
    def __init__(self, block: Stage2Block, show_progress: bool = settings.SHOW_PROGRESS):
        self.block = block
        self.show_progress = show_progress
        self.schedule = schedule_from_block(block)

    def fit(self, pairs: Stage2Pairs, n_iter: Optional[int] = None, checkpoint_path=None) -> Stage2Result:
        b = self.block
        n_iter = n_iter or b.n_iter
        torch.manual_seed(b.seed)
        gen = torch.Generator().manual_seed(b.seed)
        nets = Stage2Nets(stage2_config(b))
        optimizer = torch.optim.Adam(nets.parameters(), lr=b.lr)
        ema = EmaState(nets, decay=b.ema_decay, warmup=b.ema_warmup)
        osem, gt = torch.from_numpy(pairs.osem), torch.from_numpy(pairs.gt)
        batch = min(b.batch, len(pairs))
        logger.info(f"Stage-2 training on {len(pairs)} image pairs for {n_iter} steps (batch {batch})")

        rows = []
        for step in trange(n_iter, desc="stage2", disable=not self.show_progress):
            idx = torch.randperm(len(pairs), generator=gen)[:batch]
            losses = stage2_train_step(nets, (osem[idx], gt[idx]), self.schedule, optimizer,
                                       ema=ema, global_step=step, generator=gen)
            rows.append({"step": step + 1, **losses})

        nets.eval()
        if checkpoint_path is not None:
            ema.apply_shadow()
            save_checkpoint(checkpoint_path, nets)
            ema.restore()
        logger.info(f"Stage-2 finished: last loss {rows[-1]['loss']:.4e}")
        return Stage2Result(nets=nets, ema=ema, history=pd.DataFrame(rows, columns=HISTORY_COLUMNS))


@dataclass(frozen=True)
class RefinedImage:
    image: np.ndarray
    coarse: np.ndarray
    steps: int
    quality: float


def refine_image(nets: Stage2Nets, I_osem: np.ndarray, block: Stage2Block, quality_model: QualityModel,
                 ema: Optional[EmaState] = None, seed: Optional[int] = None,
                 schedule: Optional[DiffusionSchedule] = None) -> RefinedImage:
    """Refine one OSEM image; returned arrays are in the input's units."""
    schedule = schedule or schedule_from_block(block)
    step_cfg = step_config_from_block(block)
    scale = image_scale(I_osem)
    x = torch.from_numpy((I_osem / scale)[None, None].astype(np.float32))

    if ema is not None:
        ema.apply_shadow()
    try:
        nets.eval()
        with torch.no_grad():
            coarse = nets.coarse(x)[0, 0].numpy().astype(np.float64)
        Q = quality_score(coarse, quality_model)
        steps = adaptive_steps(Q, step_cfg)
        refined = ddim_refine(nets, x, schedule, steps, step_cfg, seed=block.seed if seed is None else seed)
    finally:
        if ema is not None:
            ema.restore()
    logger.debug(f"Refined image with Q={Q:.2f} in {steps} DDIM steps")
    return RefinedImage(image=refined[0, 0].numpy().astype(np.float64) * scale,
                        coarse=coarse * scale, steps=steps, quality=Q)
