"""U-shaped 1D window-attention network that cleans the noisy pilot sub-grid.

The 2 (re/im) x 48 (freq) x 2 (time) input is folded into 4 features per
frequency token, so attention windows slide along frequency only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .grid import N_PILOT_FREQ, CsifFeatures, DmrsGrid
from .ops import DSCBlock, SEBlock, ShapeError, WindowAttention, layer_norm, pointwise_conv

SNR_SCALE = 20.0
VAR_FLOOR = 1e-12
N_STATS = 3


@dataclass(frozen=True)
class DenoiseConfig:
    dim: int = 32
    windows: tuple[int, ...] = (8, 4, 2, 2)
    heads: tuple[int, ...] = (4, 4, 4, 4)
    blocks_per_stage: int = 2
    width: int = N_PILOT_FREQ
    se_reduction: int = 4

    def __post_init__(self):
        if len(self.windows) != 4 or len(self.heads) != 4:
            raise ValueError("denoiser needs exactly four stages")
        for w, win, d, h in zip(self.stage_widths(), self.windows, self.stage_dims(), self.heads):
            if w % win:
                raise ValueError(f"stage width {w} is not divisible by window {win}")
            if d % h:
                raise ValueError(f"stage dim {d} is not divisible by {h} heads")

    def stage_widths(self):
        w = self.width
        return (w, w // 2, w // 4, w // 2)

    def stage_dims(self):
        d = self.dim
        return (d, 2 * d, 4 * d, 2 * d)


def csif_inputs(csif) -> torch.Tensor:
    """Network-facing CSIF vector from raw ``[mean, variance, snr_db]``.

    Raw statistics span many decades under shadowing, so the networks see
    ``[mean / rms, log10(variance), snr_db / 20]`` where ``rms`` is the root
    mean square of the scalars. Absolute scale survives in the log-variance.
    Accepts :class:`CsifFeatures` or an array/tensor ``(..., 3)``.
    """
    if isinstance(csif, CsifFeatures):
        csif = csif.as_array()[None]
    t = csif if torch.is_tensor(csif) else torch.as_tensor(np.asarray(csif))
    t = t.to(torch.float32) if not t.is_floating_point() else t
    mean, var, snr = t[..., 0], t[..., 1], t[..., 2]
    rms = torch.sqrt(var + mean * mean + VAR_FLOOR)
    return torch.stack([mean / rms, torch.log10(var + VAR_FLOOR), snr / SNR_SCALE], dim=-1)


def tokenize(dmrs: torch.Tensor, csif: torch.Tensor) -> torch.Tensor:
    """``(B, 48, 2, 2)`` pilots + ``(B, 3)`` scaled CSIF -> ``(B, 7, 48)`` tokens.

    Feature ``2 * plane + time`` carries the pilots; features 4..6 repeat the
    CSIF scalars along every token.
    """
    b, w = dmrs.shape[0], dmrs.shape[1]
    feats = dmrs.permute(0, 3, 2, 1).reshape(b, 4, w)
    stats = csif[:, :, None].expand(b, csif.shape[1], w)
    return torch.cat([feats, stats.to(feats.dtype)], dim=1)


def untokenize(tokens: torch.Tensor) -> torch.Tensor:
    """Inverse of the pilot part of :func:`tokenize`: ``(B, 4, W) -> (B, W, 2, 2)``."""
    b, _, w = tokens.shape
    return tokens.reshape(b, 2, 2, w).permute(0, 3, 2, 1)


def window_partition(x: torch.Tensor, win: int) -> torch.Tensor:
    """``(B, dim, W) -> (B * W / win, win, dim)``, windows contiguous along W."""
    b, dim, w = x.shape
    if w % win:
        raise ShapeError("window_partition", f"width {w} is not divisible by window {win}")
    return x.transpose(1, 2).reshape(b * (w // win), win, dim)


def window_merge(windows: torch.Tensor, batch: int) -> torch.Tensor:
    n, win, dim = windows.shape
    return windows.reshape(batch, (n // batch) * win, dim).transpose(1, 2)


class DNBlock(nn.Module):
    """Window attention (pre-norm, residual), then SE recalibration, then DSC."""

    def __init__(self, dim: int, win: int, heads: int, se_reduction: int = 4):
        super().__init__()
        self.win = win
        self.norm = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads)
        self.se = SEBlock(dim, se_reduction)
        self.dsc = DSCBlock(dim)

    def wsa(self, x):
        windows = window_partition(x, self.win)
        h = layer_norm(windows, self.norm.weight, self.norm.bias, self.norm.eps)
        return window_merge(windows + self.attn(h), x.shape[0])

    def forward(self, x):
        return self.dsc(self.se(self.wsa(x)))


class DownExpand(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.conv = nn.Conv1d(dim, 2 * dim, kernel_size=4, stride=2, padding=1)

    def forward(self, x):
        if x.shape[-1] % 2:
            raise ShapeError("down_expand", f"width {x.shape[-1]} is odd")
        return self.conv(x)


class UpSqueeze(nn.Module):
    def __init__(self, dim):
        super().__init__()
        if dim % 2:
            raise ShapeError("up_squeeze", f"dim {dim} is odd")
        self.conv = nn.ConvTranspose1d(dim, dim // 2, kernel_size=2, stride=2)

    def forward(self, x):
        return self.conv(x)


class Denoiser(nn.Module):
    """Four-stage U: two encoder stages, a bottleneck and one decoder stage.

    Skips are additive after each up-sampling step; the network predicts a
    correction that is added to its (normalized) input.
    """

    def __init__(self, config: DenoiseConfig = DenoiseConfig()):
        super().__init__()
        self.config = config
        dims, wins, heads = config.stage_dims(), config.windows, config.heads
        self.embed = nn.Conv1d(4 + N_STATS, config.dim, 1)
        self.stages = nn.ModuleList(
            nn.Sequential(*[DNBlock(d, w, h, config.se_reduction) for _ in range(config.blocks_per_stage)])
            for d, w, h in zip(dims, wins, heads)
        )
        self.down1 = DownExpand(dims[0])
        self.down2 = DownExpand(dims[1])
        self.up1 = UpSqueeze(dims[2])
        self.up2 = UpSqueeze(dims[3])
        self.out_proj = nn.Conv1d(config.dim, 4, 1)

    def forward(self, dmrs: torch.Tensor, csif: torch.Tensor) -> torch.Tensor:
        """``dmrs`` ``(B, 48, 2, 2)`` and scaled ``csif`` ``(B, 3)`` -> denoised ``(B, 48, 2, 2)``."""
        x = self.embed(tokenize(dmrs, csif))
        s1 = self.stages[0](x)
        s2 = self.stages[1](self.down1(s1))
        s3 = self.stages[2](self.down2(s2))
        s4 = self.stages[3](self.up1(s3) + s2)
        y = self.up2(s4) + s1
        correction = pointwise_conv(y, self.out_proj.weight, self.out_proj.bias)
        return dmrs + untokenize(correction)

    def attention_modules(self):
        """``[(stage_index, WindowAttention), ...]`` in forward order."""
        return [(i, blk.attn) for i, stage in enumerate(self.stages) for blk in stage]

    def reset_counters(self):
        for _, attn in self.attention_modules():
            attn.score_count = 0

    def stage_score_counts(self):
        counts = [0] * len(self.stages)
        for i, attn in self.attention_modules():
            counts[i] += attn.score_count
        return counts


def denoise_forward(dmrs_noisy: DmrsGrid, csif: CsifFeatures, model: Denoiser) -> DmrsGrid:
    x = torch.as_tensor(dmrs_noisy.to_array()[None], dtype=torch.float32)
    with torch.no_grad():
        y = model(x, csif_inputs(csif).float())
    return DmrsGrid.from_array(y[0].double().numpy())
