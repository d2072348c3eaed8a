"""
Network assemblies.
Stage 1: five-channel Attention U-Net for sinogram completion.
Stage 2: residual U-Nets for the coarse image estimate and the timestep-conditioned denoiser.
"""
import math
from dataclasses import dataclass, field
from typing import List, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from app.core.errors import ShapeError
from app.nn.layers import AttentionGate, ConvBlock, concat, conv2d, maxpool2x2, upsample2x


@dataclass(frozen=True)
class AttentionUNetConfig:
    in_channels: int = 5
    out_channels: int = 5
    widths: Tuple[int, ...] = (64, 128, 256, 512)
    bottleneck: int = 1024
    width_scale: float = 0.125
    pad_inputs: bool = True

    @property
    def depth(self) -> int:
        return len(self.widths)

    def scaled(self, width: int) -> int:
        return max(1, int(round(width * self.width_scale)))


def _pad_to_multiple(x: torch.Tensor, multiple: int, allow: bool):
    H, W = x.shape[-2:]
    ph, pw = (-H) % multiple, (-W) % multiple
    if (ph or pw) and not allow:
        raise ShapeError(f"spatial dims {H}x{W} are not divisible by {multiple}")
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph))
    return x, (H, W)


class AttentionUNet(nn.Module):
    """Encoder/decoder with attention-gated skips; `gated=False` gives the plain U-Net."""

    def __init__(self, cfg: AttentionUNetConfig = AttentionUNetConfig(), gated: bool = True):
        super().__init__()
        self.cfg = cfg
        self.gated = gated
        widths = [cfg.scaled(w) for w in cfg.widths]
        bottom = cfg.scaled(cfg.bottleneck)

        self.encoders = nn.ModuleList()
        in_ch = cfg.in_channels
        for w in widths:
            self.encoders.append(ConvBlock(in_ch, w))
            in_ch = w
        self.bottleneck = ConvBlock(in_ch, bottom)

        self.gates = nn.ModuleList()
        self.decoders = nn.ModuleList()
        below = bottom
        for w in reversed(widths):
            if gated:
                self.gates.append(AttentionGate(F_g=below, F_l=w, F_int=max(1, w // 2)))
            self.decoders.append(ConvBlock(below + w, w))
            below = w
        self.head = nn.Conv2d(widths[0], cfg.out_channels, kernel_size=1, bias=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected N x {self.cfg.in_channels} x H x W input, got {tuple(x.shape)}")
        x, (H, W) = _pad_to_multiple(x, 2 ** self.cfg.depth, self.cfg.pad_inputs)

        skips = []
        h = x
        for enc in self.encoders:
            h = enc(h)
            skips.append(h)
            h = maxpool2x2(h)
        h = self.bottleneck(h)

        for k, dec in enumerate(self.decoders):
            skip = skips[-(k + 1)]
            h = upsample2x(h)
            if self.gated:
                skip = self.gates[k](skip, h)
            h = dec(concat(h, skip))
        out = conv2d(h, self.head.weight, self.head.bias)
        return out[..., :H, :W]

    def open_gates(self):
        for gate in self.gates:
            gate.open_gate()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# Stage 2
# ---------------------------------------------------------------------------

def norm_groups(channels: int) -> int:
    return math.gcd(32, channels)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of (possibly fractional) timesteps, shape (N, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64).reshape(-1, 1) * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int = 0):
        super().__init__()
        self.norm1 = nn.GroupNorm(norm_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch) if temb_dim else None
        self.norm2 = nn.GroupNorm(norm_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, kernel_size=1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temb is not None:
            h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Downsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, kernel_size=3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, kernel_size=3, padding=1)

    def forward(self, x):
        return self.conv(upsample2x(x))


class ResUNet(nn.Module):
    """Residual U-Net with optional sinusoidal timestep conditioning."""

    def __init__(self, in_channels: int, out_channels: int, inner_channel: int = 32,
                 channel_mults: Tuple[int, ...] = (1, 2, 3, 4), res_blocks: int = 3,
                 time_conditioned: bool = False):
        super().__init__()
        self.inner = inner_channel
        self.levels = len(channel_mults)
        self.time_conditioned = time_conditioned
        temb_dim = 4 * inner_channel if time_conditioned else 0
        if time_conditioned:
            self.time_mlp = nn.Sequential(
                nn.Linear(inner_channel, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))

        chans = [inner_channel * m for m in channel_mults]
        self.stem = nn.Conv2d(in_channels, inner_channel, kernel_size=3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        ch = inner_channel
        for level, c in enumerate(chans):
            blocks = nn.ModuleList()
            for _ in range(res_blocks):
                blocks.append(ResBlock(ch, c, temb_dim))
                ch = c
            self.down_blocks.append(blocks)
            self.downs.append(Downsample(ch) if level < self.levels - 1 else nn.Identity())

        self.mid = nn.ModuleList([ResBlock(ch, ch, temb_dim), ResBlock(ch, ch, temb_dim)])

        self.up_blocks = nn.ModuleList()
        self.ups = nn.ModuleList()
        for level in reversed(range(self.levels)):
            c = chans[level]
            blocks = nn.ModuleList([ResBlock(ch + c, c, temb_dim)])
            blocks.extend(ResBlock(c, c, temb_dim) for _ in range(res_blocks - 1))
            ch = c
            self.up_blocks.append(blocks)
            self.ups.append(Upsample(ch) if level > 0 else nn.Identity())

        self.out_norm = nn.GroupNorm(norm_groups(ch), ch)
        self.out_conv = nn.Conv2d(ch, out_channels, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor = None) -> torch.Tensor:
        x, (H, W) = _pad_to_multiple(x, 2 ** (self.levels - 1), allow=True)
        temb = None
        if self.time_conditioned:
            if t is None:
                raise ShapeError("time-conditioned network needs timesteps")
            t = torch.as_tensor(t).reshape(-1)
            if t.numel() == 1:
                t = t.expand(x.shape[0])
            temb = self.time_mlp(timestep_embedding(t, self.inner).to(x.dtype))

        h = self.stem(x)
        skips: List[torch.Tensor] = []
        for blocks, down in zip(self.down_blocks, self.downs):
            for block in blocks:
                h = block(h, temb)
            skips.append(h)
            h = down(h)
        for block in self.mid:
            h = block(h, temb)
        for blocks, up in zip(self.up_blocks, self.ups):
            h = concat(h, skips.pop())
            for block in blocks:
                h = block(h, temb)
            h = up(h)
        out = self.out_conv(F.silu(self.out_norm(h)))
        return out[..., :H, :W]


class CoarseNet(nn.Module):
    """Coarse image estimate: I_osem plus a learned correction."""

    def __init__(self, inner_channel: int = 64, channel_mults=(1, 2, 3, 4), res_blocks: int = 3):
        super().__init__()
        self.body = ResUNet(1, 1, inner_channel, channel_mults, res_blocks, time_conditioned=False)

    def forward(self, x):
        return x + self.body(x)


@dataclass(frozen=True)
class Stage2Config:
    coarse_inner: int = 64
    denoiser_inner: int = 32
    res_blocks: int = 3
    channel_mults: Tuple[int, ...] = (1, 2, 3, 4)


class Stage2Nets(nn.Module):
    def __init__(self, cfg: Stage2Config = Stage2Config()):
        super().__init__()
        self.coarse = CoarseNet(cfg.coarse_inner, cfg.channel_mults, cfg.res_blocks)
        self.denoiser = ResUNet(2, 1, cfg.denoiser_inner, cfg.channel_mults, cfg.res_blocks,
                                time_conditioned=True)


def stage2_forward(nets: Stage2Nets, I_osem: torch.Tensor, t, x_t: torch.Tensor):
    """Return (I_coarse, eps_hat) with the denoiser conditioned on I_coarse."""
    if I_osem.dim() != 4 or I_osem.shape[1] != 1:
        raise ShapeError(f"I_osem must be N x 1 x H x W, got {tuple(I_osem.shape)}")
    if x_t.shape != I_osem.shape:
        raise ShapeError(f"x_t {tuple(x_t.shape)} does not match I_osem {tuple(I_osem.shape)}")
    I_coarse = nets.coarse(I_osem)
    eps_hat = nets.denoiser(concat(x_t, I_coarse), t)
    return I_coarse, eps_hat
