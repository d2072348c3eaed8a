"""
Stage-1 Trainer - sinogram completion.
Builds the five-channel dataset from masked/complete sinogram volumes, trains the Attention U-Net
with AdamW and a validation-driven plateau schedule, and pastes predictions back into the gaps.
"""
import copy
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np
import pandas as pd
import torch
from tqdm import trange

from app.core.config import Stage1Block, settings
from app.core.errors import ShapeError, TrainingError
from app.core.logger import logger
from app.nn.checkpoint import save_checkpoint
from app.nn.losses import get_loss
from app.nn.networks import AttentionUNet, AttentionUNetConfig
from app.nn.optim import current_lr, make_optimizer, make_plateau_scheduler, optimize_step
from app.services.stack_service import stack_volume

HISTORY_COLUMNS = ["step", "loss", "lr", "val_loss"]


@dataclass(eq=False)
class Stage1Dataset:
    inputs: np.ndarray   # (N, C, D, 2D+1) float32, per-volume normalized
    targets: np.ndarray
    volume_ids: np.ndarray
    slice_ids: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]


def normalization_scale(masked_volume: np.ndarray) -> float:
    peak = float(np.max(masked_volume))
    return peak if peak > 0 else 1.0


def build_stage1_dataset(masked: Dict[int, np.ndarray], complete: Dict[int, np.ndarray],
                         ids: Sequence[int], context: str = "five") -> Stage1Dataset:
    """Stack every slice of the given volumes; input and target share the masked volume's scale."""
    xs, ys, vids, sids = [], [], [], []
    for vid in ids:
        if masked[vid].shape != complete[vid].shape:
            raise ShapeError(f"volume {vid}: masked {masked[vid].shape} and complete {complete[vid].shape} differ")
        scale = normalization_scale(masked[vid])
        xs.append(stack_volume(masked[vid] / scale, context))
        ys.append(stack_volume(complete[vid] / scale, context))
        n = masked[vid].shape[0]
        vids.append(np.full(n, vid))
        sids.append(np.arange(n))
    return Stage1Dataset(
        inputs=np.concatenate(xs).astype(np.float32),
        targets=np.concatenate(ys).astype(np.float32),
        volume_ids=np.concatenate(vids),
        slice_ids=np.concatenate(sids),
    )


def stage1_network(block: Stage1Block) -> AttentionUNet:
    channels = 5 if block.context == "five" else 1
    cfg = AttentionUNetConfig(
        in_channels=channels,
        out_channels=channels,
        widths=tuple(64 * 2 ** k for k in range(block.depth)),
        bottleneck=64 * 2 ** block.depth,
        width_scale=block.width_scale,
    )
    return AttentionUNet(cfg, gated=block.attention)


@dataclass(eq=False)
class Stage1Result:
    model: AttentionUNet
    history: pd.DataFrame
    best_val_loss: float


class Stage1Trainer:
    """Fits one stage-1 network; all randomness comes from `block.seed`."""

    def __init__(self, block: Stage1Block, show_progress: bool = settings.SHOW_PROGRESS):
        self.block = block
        self.show_progress = show_progress
        self.loss_fn = get_loss(block.loss)

    def _batches(self, data: Stage1Dataset, order: np.ndarray):
        for start in range(0, len(order), self.block.batch):
            idx = order[start:start + self.block.batch]
            yield torch.from_numpy(data.inputs[idx]), torch.from_numpy(data.targets[idx])

    @torch.no_grad()
    def evaluate(self, model: torch.nn.Module, data: Stage1Dataset) -> float:
        model.eval()
        total = 0.0
        for x, y in self._batches(data, np.arange(len(data))):
            total += float(self.loss_fn(model(x), y)) * x.shape[0]
        return total / len(data)

    def fit(self, train: Stage1Dataset, val: Optional[Stage1Dataset] = None,
            max_steps: Optional[int] = None, checkpoint_path=None) -> Stage1Result:
        """
        Train for `block.epochs` epochs (or until `max_steps` optimizer steps).

        The plateau scheduler and best-weight selection watch the validation loss, or the
        training-set loss when no validation group exists. On a non-finite loss the best
        weights so far are written to `checkpoint_path` before TrainingError is raised.
        """
        b = self.block
        torch.manual_seed(b.seed)
        rng = np.random.default_rng(b.seed)
        model = stage1_network(b)
        optimizer = make_optimizer(model.parameters(), lr=b.lr, weight_decay=b.weight_decay)
        scheduler = make_plateau_scheduler(optimizer, b.plateau_factor, b.plateau_patience, b.min_lr)
        monitor = val if val is not None and len(val) else train

        rows = []
        step = 0
        best_val, best_state = math.inf, copy.deepcopy(model.state_dict())
        logger.info(f"Stage-1 training on {len(train)} samples "
                    f"({'attention' if b.attention else 'plain'} U-Net, context={b.context}, loss={b.loss})")

        for epoch in trange(b.epochs, desc="stage1", disable=not self.show_progress):
            model.train()
            for x, y in self._batches(train, rng.permutation(len(train))):
                optimizer.zero_grad()
                loss = self.loss_fn(model(x), y)
                if not torch.isfinite(loss):
                    self._abort(model, best_state, checkpoint_path, step)
                loss.backward()
                optimize_step(optimizer)
                step += 1
                rows.append({"step": step, "loss": float(loss), "lr": current_lr(optimizer), "val_loss": np.nan})
                if max_steps and step >= max_steps:
                    break

            val_loss = self.evaluate(model, monitor)
            rows[-1]["val_loss"] = val_loss
            scheduler.step(val_loss)
            if val_loss < best_val:
                best_val, best_state = val_loss, copy.deepcopy(model.state_dict())
            logger.debug(f"epoch {epoch}: train {rows[-1]['loss']:.4e}, val {val_loss:.4e}, lr {current_lr(optimizer):.2e}")
            if max_steps and step >= max_steps:
                break

        model.load_state_dict(best_state)
        model.eval()
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, model)
        logger.info(f"Stage-1 finished after {step} steps, best monitored loss {best_val:.4e}")
        return Stage1Result(model=model, history=pd.DataFrame(rows, columns=HISTORY_COLUMNS), best_val_loss=best_val)

    @staticmethod
    def _abort(model, best_state, checkpoint_path, step):
        logger.error(f"Non-finite stage-1 loss at step {step}")
        if checkpoint_path is not None:
            model.load_state_dict(best_state)
            save_checkpoint(checkpoint_path, model)
        raise TrainingError(f"non-finite stage-1 loss at step {step}")


@torch.no_grad()
def complete_volume(model: AttentionUNet, masked_volume: np.ndarray, bin_mask: np.ndarray,
                    reachable: np.ndarray, context: str = "five", batch: int = 8) -> np.ndarray:
    """
    Completed sinogram volume: measured valid bins kept, invalid bins from the central output
    channel (rescaled, clipped at zero), unreachable bins zero.
    """
    if masked_volume.shape != bin_mask.shape:
        raise ShapeError(f"volume {masked_volume.shape} and mask {bin_mask.shape} differ")
    model.eval()
    scale = normalization_scale(masked_volume)
    stacked = stack_volume(masked_volume / scale, context).astype(np.float32)
    center = stacked.shape[1] // 2
    pred = np.concatenate([
        model(torch.from_numpy(stacked[k:k + batch]))[:, center].numpy()
        for k in range(0, stacked.shape[0], batch)
    ]).astype(np.float64) * scale
    out = np.where(bin_mask, masked_volume, np.maximum(pred, 0.0))
    out[:, ~reachable] = 0.0
    return out
