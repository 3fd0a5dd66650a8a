"""Differentiable building blocks shared by the denoiser and the refiner.

Gradients come from torch autograd; the test suite checks every op against
central finite differences. Layouts are batch-first: ``(B, C, W)`` for 1D
feature maps and ``(B, C, H, W)`` for 2D maps.
"""

from __future__ import annotations

import math
from collections import OrderedDict

import torch
import torch.nn as nn
import torch.nn.functional as F

ParameterTree = "OrderedDict[str, torch.Tensor]"


class ShapeError(ValueError):
    def __init__(self, op: str, msg: str):
        super().__init__(f"{op}: {msg}")
        self.op = op


def _need_rank(op, x, rank):
    if x.dim() != rank:
        raise ShapeError(op, f"expected rank-{rank} input, got shape {tuple(x.shape)}")


def _need_channels(op, x, weight, groups=1):
    if x.shape[1] != weight.shape[1] * groups:
        raise ShapeError(op, f"input has {x.shape[1]} channels, weight expects {weight.shape[1] * groups}")


# --- primitive set --------------------------------------------------------


def conv1d(x, weight, bias=None, stride=1, padding=0, groups=1):
    _need_rank("conv1d", x, 3)
    _need_channels("conv1d", x, weight, groups)
    k = weight.shape[-1]
    if x.shape[-1] + 2 * padding < k:
        raise ShapeError("conv1d", f"length {x.shape[-1]} with padding {padding} is shorter than kernel {k}")
    return F.conv1d(x, weight, bias, stride=stride, padding=padding, groups=groups)


def conv1d_out_len(width: int, kernel: int, stride: int, padding: int) -> int:
    return (width + 2 * padding - kernel) // stride + 1


def transposed_conv1d(x, weight, bias=None, stride=2):
    _need_rank("transposed_conv1d", x, 3)
    if x.shape[1] != weight.shape[0]:
        raise ShapeError("transposed_conv1d", f"input has {x.shape[1]} channels, weight expects {weight.shape[0]}")
    return F.conv_transpose1d(x, weight, bias, stride=stride)


def conv2d(x, weight, bias=None, padding=1):
    _need_rank("conv2d", x, 4)
    _need_channels("conv2d", x, weight)
    return F.conv2d(x, weight, bias, padding=padding)


def pointwise_conv(x, weight, bias=None):
    """1x1 convolution over the channel axis of a 1D or 2D map."""
    if x.dim() == 3:
        _need_channels("pointwise_conv", x, weight)
        return F.conv1d(x, weight, bias)
    _need_rank("pointwise_conv", x, 4)
    _need_channels("pointwise_conv", x, weight)
    return F.conv2d(x, weight, bias)


def depthwise_conv(x, weight, bias=None, padding=1):
    _need_rank("depthwise_conv", x, 3)
    if weight.shape[0] != x.shape[1] or weight.shape[1] != 1:
        raise ShapeError("depthwise_conv", f"weight {tuple(weight.shape)} does not match {x.shape[1]} channels")
    return F.conv1d(x, weight, bias, padding=padding, groups=x.shape[1])


def linear(x, weight, bias=None):
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError("linear", f"input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    return F.linear(x, weight, bias)


def layer_norm(x, weight, bias, eps=1e-5):
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError("layer_norm", f"last dim {x.shape[-1]} != normalized size {weight.shape[0]}")
    return F.layer_norm(x, (x.shape[-1],), weight, bias, eps)


relu = F.relu
gelu = F.gelu
sigmoid = torch.sigmoid


def softmax(x, dim=-1):
    return torch.softmax(x, dim=dim)


def max_pool2d(x):
    _need_rank("max_pool2d", x, 4)
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError("max_pool2d", f"spatial dims {h}x{w} are not divisible by 2")
    return F.max_pool2d(x, 2)


def bilinear_upsample2d(x):
    _need_rank("bilinear_upsample2d", x, 4)
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def concat(tensors, dim=1):
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.dim() != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, t.shape)) if i != dim % len(ref)):
            raise ShapeError("concat", f"shapes {tuple(ref)} and {tuple(t.shape)} differ off axis {dim}")
    return torch.cat(tensors, dim=dim)


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError("add", f"shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
    return a + b


def global_avg_pool(x):
    """Mean over every axis after the channel axis: ``(B, C, ...) -> (B, C)``."""
    return x.flatten(2).mean(dim=-1)


def global_max_pool(x):
    return x.flatten(2).amax(dim=-1)


# --- composite blocks -----------------------------------------------------


class WindowAttention(nn.Module):
    """Multi-head scaled dot-product attention inside one window of tokens.

    Input and output are ``(N, win, dim)``. ``score_count`` accumulates the
    number of query-key scores evaluated, for cost accounting.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ShapeError("mhsa_window", f"dim {dim} is not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.score_count = 0

    def forward(self, x):
        if x.dim() != 3 or x.shape[-1] != self.dim:
            raise ShapeError("mhsa_window", f"expected (N, win, {self.dim}), got {tuple(x.shape)}")
        n, win, _ = x.shape
        hd = self.dim // self.heads

        def split(t):
            return t.reshape(n, win, self.heads, hd).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(hd)
        self.score_count += n * self.heads * win * win
        out = softmax(scores) @ v
        return self.proj(out.transpose(1, 2).reshape(n, win, self.dim))


def mhsa_window(x, attn: WindowAttention):
    """Attention over a single ``(win, dim)`` window."""
    return attn(x.unsqueeze(0)).squeeze(0)


class SEBlock(nn.Module):
    """Squeeze-and-excitation gate over ``(B, dim, W)`` maps."""

    def __init__(self, dim: int, reduction: int = 4):
        super().__init__()
        if dim % reduction:
            raise ShapeError("se_block", f"dim {dim} is not divisible by reduction {reduction}")
        self.fc1 = nn.Linear(dim, dim // reduction)
        self.fc2 = nn.Linear(dim // reduction, dim)

    def forward(self, x):
        gate = sigmoid(self.fc2(gelu(self.fc1(global_avg_pool(x)))))
        return x * gate.unsqueeze(-1)


class DSCBlock(nn.Module):
    """Depthwise (k=3) then pointwise convolution, added back onto the input."""

    def __init__(self, dim: int):
        super().__init__()
        self.dw = nn.Conv1d(dim, dim, 3, padding=1, groups=dim)
        self.pw = nn.Conv1d(dim, dim, 1)

    def forward(self, x):
        if x.shape[-1] < 3:
            raise ShapeError("dsc_block", f"width {x.shape[-1]} is below the kernel size 3")
        h = depthwise_conv(x, self.dw.weight, self.dw.bias)
        return x + pointwise_conv(relu(h), self.pw.weight, self.pw.bias)


class ChannelAttention(nn.Module):
    """Per-channel gates from pooled descriptors fused with CSIF statistics."""

    def __init__(self, channels: int, n_stats: int = 3, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 4)
        self.channels = channels
        self.fc1 = nn.Linear(2 * channels + n_stats, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x, csif):
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ShapeError("channel_attention", f"expected (B, {self.channels}, H, W), got {tuple(x.shape)}")
        if csif.dim() != 2 or csif.shape[0] != x.shape[0] or csif.shape[1] != self.fc1.in_features - 2 * self.channels:
            raise ShapeError("channel_attention", f"csif shape {tuple(csif.shape)} does not match batch {x.shape[0]}")
        desc = concat([global_avg_pool(x), global_max_pool(x), csif], dim=1)
        gate = sigmoid(self.fc2(gelu(self.fc1(desc))))
        return x * gate[:, :, None, None]


# --- parameters -----------------------------------------------------------


def init_parameters(module: nn.Module, seed: int) -> "OrderedDict[str, torch.Tensor]":
    """Fan-in scaled uniform weights, zero biases, unit norm scales.

    Weights are drawn from U(-b, b) with ``b = sqrt(3 / fan_in)`` so their
    variance is ``1 / fan_in``.
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for mod in module.modules():
            if isinstance(mod, (nn.Linear, nn.Conv1d, nn.Conv2d, nn.ConvTranspose1d)):
                w = mod.weight
                if isinstance(mod, nn.ConvTranspose1d):
                    fan_in = w.shape[0] * w.shape[-1] // mod.stride[0]
                else:
                    fan_in = w[0].numel()
                bound = math.sqrt(3.0 / fan_in)
                w.copy_(torch.rand(w.shape, generator=gen, dtype=w.dtype) * 2 * bound - bound)
                if mod.bias is not None:
                    mod.bias.zero_()
            elif isinstance(mod, nn.LayerNorm):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
    return parameter_tree(module)


def parameter_tree(module: nn.Module) -> "OrderedDict[str, torch.Tensor]":
    return OrderedDict((name, p) for name, p in module.named_parameters())
