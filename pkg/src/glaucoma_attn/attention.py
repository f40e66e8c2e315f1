"""Channel/spatial attention (CBAM) and edge-statistics channel recalibration (CRM).

Feature maps follow the torch convention ``(B, C, H, W)``.
"""
from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ValidationError

__all__ = [
    "ChannelStats",
    "ChannelAttention",
    "SpatialAttention",
    "CBAM",
    "ChannelRecalibration",
    "edge_map",
    "channel_stats",
    "build_composite",
    "SOBEL_X",
    "SOBEL_Y",
]

SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.t().contiguous()

# floor inside sqrt(var) on the differentiable CRM path
STD_EPS = 1e-12


class ChannelStats(NamedTuple):
    mean: torch.Tensor  # (B, C)
    std: torch.Tensor  # (B, C)


def check_feature_map(f: torch.Tensor, channels: int | None = None) -> None:
    if f.dim() != 4:
        raise ValidationError(f"expected a (B, C, H, W) feature map, got shape {tuple(f.shape)}")
    if min(f.shape) < 1:
        raise ValidationError(f"feature map has an empty axis: {tuple(f.shape)}")
    if channels is not None and f.shape[1] != channels:
        raise ConfigurationError(
            f"feature map has {f.shape[1]} channels but the block was built for {channels}"
        )
    if not torch.isfinite(f).all():
        raise ValidationError("feature map contains NaN or Inf")


def _safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    # sqrt with value and gradient 0 at x == 0 (plain sqrt has an infinite slope there)
    positive = x > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, x, torch.ones_like(x))), torch.zeros_like(x))


def edge_map(f: torch.Tensor) -> torch.Tensor:
    """Per-channel Sobel gradient magnitude with replicate padding.

    The kernels are fixed; the result has the shape of ``f`` and is >= 0.
    """
    check_feature_map(f)
    c = f.shape[1]
    kx = SOBEL_X.to(dtype=f.dtype, device=f.device).expand(c, 1, 3, 3)
    ky = SOBEL_Y.to(dtype=f.dtype, device=f.device).expand(c, 1, 3, 3)
    padded = F.pad(f, (1, 1, 1, 1), mode="replicate")
    gx = F.conv2d(padded, kx, groups=c)
    gy = F.conv2d(padded, ky, groups=c)
    return _safe_sqrt(gx * gx + gy * gy)


def channel_stats(f: torch.Tensor, eps: float = 0.0) -> ChannelStats:
    """Mean and population std of every channel over its spatial positions.

    ``eps`` is added to the variance before the square root; the CRM block
    passes a tiny floor so the gradient stays finite on constant channels.
    """
    if f.dim() != 4 or f.shape[2] * f.shape[3] < 1:
        raise ValidationError(f"expected a (B, C, H, W) tensor with H*W >= 1, got {tuple(f.shape)}")
    flat = f.flatten(2)
    mean = flat.mean(dim=2)
    var = ((flat - mean.unsqueeze(2)) ** 2).mean(dim=2)
    std = torch.sqrt(var + eps) if eps > 0 else torch.sqrt(var)
    return ChannelStats(mean, std)


def build_composite(stats_f: ChannelStats, stats_edge: ChannelStats) -> torch.Tensor:
    """Pack statistics into a ``(B, C, 4)`` tensor ordered [mean_f, std_f, mean_edge, std_edge]."""
    shapes = {tuple(t.shape) for t in (*stats_f, *stats_edge)}
    if len(shapes) != 1 or len(next(iter(shapes))) != 2:
        raise ValidationError(f"statistics must all share one (B, C) shape, got {sorted(shapes)}")
    return torch.stack([stats_f.mean, stats_f.std, stats_edge.mean, stats_edge.std], dim=-1)


class _DenseStack(nn.Sequential):
    def __init__(self, channels: int, hidden: int):
        super().__init__(nn.Linear(channels, hidden), nn.ReLU(), nn.Linear(hidden, channels))


class ChannelAttention(nn.Module):
    """CBAM channel attention with separate dense stacks for the GAP and GMP descriptors."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        if channels < 1 or reduction < 1:
            raise ConfigurationError(f"invalid channels={channels} / reduction={reduction}")
        self.channels = channels
        self.reduction = reduction
        hidden = max(channels // reduction, 1)
        self.avg_mlp = _DenseStack(channels, hidden)
        self.max_mlp = _DenseStack(channels, hidden)

    def weights(self, f: torch.Tensor) -> torch.Tensor:
        check_feature_map(f, self.channels)
        gap = f.mean(dim=(2, 3))
        gmp = f.amax(dim=(2, 3))
        return torch.sigmoid(self.avg_mlp(gap) + self.max_mlp(gmp))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return f * self.weights(f)[:, :, None, None]


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size: int = 7):
        super().__init__()
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ConfigurationError(f"spatial kernel size must be odd and positive, got {kernel_size}")
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def weights(self, f: torch.Tensor) -> torch.Tensor:
        check_feature_map(f)
        pooled = torch.cat([f.mean(dim=1, keepdim=True), f.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return f * self.weights(f)


class CBAM(nn.Module):
    def __init__(self, channels: int, reduction: int = 16, kernel_size: int = 7):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention(kernel_size)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return self.spatial(self.channel(f))


class ChannelRecalibration(nn.Module):
    """Gate each channel by a function of its own and its edge map's mean/std.

    The four statistics of every channel form a length-C sequence of 4-vectors.
    A kernel-2 Conv1d slides along the channel index (one zero vector padded at
    the end so the gate keeps C entries), followed by BatchNorm over the single
    output feature and a sigmoid. The input is multiplied by the gate.
    """

    kernel_size = 2

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv1d(4, 1, kernel_size=self.kernel_size)
        self.bn = nn.BatchNorm1d(1)

    def composite(self, f: torch.Tensor) -> torch.Tensor:
        check_feature_map(f)
        return build_composite(channel_stats(f, STD_EPS), channel_stats(edge_map(f), STD_EPS))

    def gate(self, t: torch.Tensor) -> torch.Tensor:
        if t.dim() != 3 or t.shape[-1] != 4:
            raise ValidationError(f"composite tensor must be (B, C, 4), got {tuple(t.shape)}")
        if t.shape[1] < 1:
            raise ValidationError("composite tensor needs at least one channel")
        seq = F.pad(t.transpose(1, 2), (0, self.kernel_size - 1))  # (B, 4, C + 1)
        return torch.sigmoid(self.bn(self.conv(seq))).squeeze(1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return f * self.gate(self.composite(f))[:, :, None, None]
