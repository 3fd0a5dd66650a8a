"""UNet over the 96 x 14 time-frequency plane with CSIF channel attention."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .grid import N_FREQ, N_TIME, ChannelGrid, CsifFeatures
from .denoiser import N_STATS, csif_inputs
from .ops import (
    ChannelAttention,
    ShapeError,
    bilinear_upsample2d,
    concat,
    conv2d,
    max_pool2d,
    pointwise_conv,
    relu,
)


@dataclass(frozen=True)
class RefineConfig:
    ch: int = 32
    levels: int = 3
    time_pad: int = 16
    n_freq: int = N_FREQ
    n_time: int = N_TIME

    def __post_init__(self):
        if self.time_pad < self.n_time:
            raise ValueError(f"time_pad {self.time_pad} is smaller than {self.n_time} slots")
        step = 2**self.levels
        if self.n_freq % step or self.time_pad % step:
            raise ValueError(f"padded plane {self.n_freq}x{self.time_pad} is not divisible by {step}")

    def channels(self):
        return [self.ch * 2**i for i in range(self.levels + 1)]


class RFBlock(nn.Module):
    """Two 3x3 conv + ReLU layers followed by CSIF-aware channel attention."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.ca = ChannelAttention(c_out, N_STATS)

    def forward(self, x, csif):
        h = relu(conv2d(x, self.conv1.weight, self.conv1.bias))
        h = relu(conv2d(h, self.conv2.weight, self.conv2.bias))
        return self.ca(h, csif)


class Refiner(nn.Module):
    def __init__(self, config: RefineConfig = RefineConfig()):
        super().__init__()
        self.config = config
        chans = config.channels()
        self.encoder = nn.ModuleList(RFBlock(c_in, c_out) for c_in, c_out in zip([2] + chans[:-2], chans[:-1]))
        self.bottleneck = RFBlock(chans[-2], chans[-1])
        self.decoder = nn.ModuleList(
            RFBlock(chans[i + 1] + chans[i], chans[i]) for i in reversed(range(config.levels))
        )
        self.final = nn.Conv2d(chans[0], 2, 1)
        self.trace = None

    def _pad(self, x):
        extra = self.config.time_pad - x.shape[-1]
        left = extra // 2
        return F.pad(x, (left, extra - left, 0, 0), mode="replicate"), left

    def forward(self, coarse: torch.Tensor, csif: torch.Tensor) -> torch.Tensor:
        """``coarse`` ``(B, 96, 14, 2)`` -> refined ``(B, 96, 14, 2)`` (coarse + residual)."""
        if coarse.shape[1:] != (self.config.n_freq, self.config.n_time, 2):
            raise ShapeError("refine_forward", f"expected (B, {self.config.n_freq}, {self.config.n_time}, 2), got {tuple(coarse.shape)}")
        x, left = self._pad(coarse.permute(0, 3, 1, 2))
        trace = [tuple(x.shape[-2:])]
        skips = []
        for block in self.encoder:
            x = block(x, csif)
            skips.append(x)
            x = max_pool2d(x)
            trace.append(tuple(x.shape[-2:]))
        x = self.bottleneck(x, csif)
        for block, skip in zip(self.decoder, reversed(skips)):
            x = bilinear_upsample2d(x)
            trace.append(tuple(x.shape[-2:]))
            x = block(concat([x, skip], dim=1), csif)
        self.trace = trace
        out = pointwise_conv(x, self.final.weight, self.final.bias)
        out = out[..., left : left + self.config.n_time].permute(0, 2, 3, 1)
        return coarse + out


def refine_forward(coarse: ChannelGrid, csif: CsifFeatures, model: Refiner) -> ChannelGrid:
    x = torch.as_tensor(coarse.to_array()[None], dtype=torch.float32)
    with torch.no_grad():
        y = model(x, csif_inputs(csif).float())
    return ChannelGrid.from_array(y[0].double().numpy())
