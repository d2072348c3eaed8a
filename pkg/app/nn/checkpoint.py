from typing import Dict

import numpy as np
import torch

from app.core.errors import FormatError
from app.core.logger import logger
from app.services import storage_service


def state_blocks(module: torch.nn.Module) -> Dict[str, np.ndarray]:
    return {name: t.detach().cpu().numpy().astype(np.float32) for name, t in module.state_dict().items()}


def save_checkpoint(path, module: torch.nn.Module) -> str:
    """Persist every state entry (parameters and buffers) as named float32 blocks."""
    storage_service.write_checkpoint(path, state_blocks(module))
    logger.info(f"Saved checkpoint: {path}")
    return str(path)


def load_checkpoint(path, module: torch.nn.Module) -> torch.nn.Module:
    blocks = storage_service.read_checkpoint(path)
    current = module.state_dict()
    missing = sorted(set(current) - set(blocks))
    unexpected = sorted(set(blocks) - set(current))
    if missing or unexpected:
        raise FormatError(f"{path}: checkpoint does not match model (missing={missing[:3]}, unexpected={unexpected[:3]})")
    restored = {}
    for name, ref in current.items():
        value = torch.from_numpy(blocks[name]).to(dtype=ref.dtype)
        if value.shape != ref.shape:
            raise FormatError(f"{path}: block '{name}' has shape {tuple(value.shape)}, model has {tuple(ref.shape)}")
        restored[name] = value
    module.load_state_dict(restored)
    return module
