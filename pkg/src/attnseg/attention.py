"""Spatial, channel and scale attention blocks.

Each block returns its output together with the coefficients it computed so
the model can expose them for explanation.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .layers import BatchNorm2d, Conv2d, Linear, Module, bilinear_resize, global_avg_pool, global_max_pool
from .tensor import (
    Tensor,
    concat_channels,
    matmul,
    relu,
    reshape,
    sigmoid,
    softmax_rows,
    transpose2d,
)

MAX_NONLOCAL_PIXELS = 4096


class NonLocalBlock(Module):
    """Self-attention over all pixels of a low-resolution feature map.

    Three 1×1 projections reduce ``channels`` to ``channels // 4``; the
    row-stochastic affinity between the first two mixes the third, which is
    expanded back by a bias-free 1×1 conv + batch norm and added to the input.
    Only the first projection carries a bias: a bias on the second shifts each
    affinity row by a constant (absorbed by the softmax) and a bias on the
    third becomes a per-channel constant that the batch norm removes.
    """

    def __init__(self, channels: int = 256, inter: int | None = None, rng=None):
        inter = inter or channels // 4
        self.channels, self.inter = channels, inter
        self.theta = Conv2d(channels, inter, 1, rng=rng)
        self.phi = Conv2d(channels, inter, 1, bias=False, rng=rng)
        self.g = Conv2d(channels, inter, 1, bias=False, rng=rng)
        self.expand = Conv2d(inter, channels, 1, bias=False, rng=rng)
        self.expand_bn = BatchNorm2d(channels)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        n, c, h, w = x.shape
        if c != self.channels:
            raise ContractError(f"non-local block expects {self.channels} channels, got {c}")
        if h * w > MAX_NONLOCAL_PIXELS:
            raise ContractError(f"non-local block limited to {MAX_NONLOCAL_PIXELS} pixels, got {h}×{w}")
        m = self.inter
        key = reshape(self.theta(x), (n, m, h * w))
        query = reshape(self.phi(x), (n, m, h * w))
        value = reshape(self.g(x), (n, m, h * w))
        alpha = softmax_rows(matmul(transpose2d(key), query))  # N×HW×HW
        mixed = matmul(alpha, transpose2d(value))  # N×HW×m
        mixed = reshape(transpose2d(mixed), (n, m, h, w))
        y = self.expand_bn(self.expand(mixed)) + x
        return y, alpha


def nonlocal_forward(x, block: NonLocalBlock):
    return block(x)


class _GatePath(Module):
    def __init__(self, c_low: int, c_high: int, inter: int, rng=None):
        self.w_low = Conv2d(c_low, inter, 1, bias=False, rng=rng)
        self.w_high = Conv2d(c_high, inter, 1, rng=rng)
        self.psi = Conv2d(inter, 1, 1, rng=rng)

    def forward(self, x_low, x_high) -> Tensor:
        return sigmoid(self.psi(relu(self.w_low(x_low) + self.w_high(x_high))))


class DualPathGate(Module):
    """Attention gate with one or two independently parameterised pathways.

    Each pathway yields a per-pixel coefficient map in (0, 1) that scales the
    low-level (skip) feature; the gated copies are concatenated and fused by a
    bias-free 1×1 conv + batch norm + ReLU to ``out_channels`` channels.
    """

    def __init__(self, c_low: int, c_high: int, out_channels: int, pathways: int = 2, rng=None):
        if pathways not in (1, 2):
            raise ConfigError("pathways must be 1 or 2")
        self.out_channels = out_channels
        self.paths = [_GatePath(c_low, c_high, out_channels, rng=rng) for _ in range(pathways)]
        self.merge = Conv2d(pathways * c_low, out_channels, 1, bias=False, rng=rng)
        self.merge_bn = BatchNorm2d(out_channels)

    def forward(self, x_low: Tensor, x_high: Tensor) -> tuple[Tensor, list[Tensor]]:
        if x_low.shape[0] != x_high.shape[0] or x_low.shape[2:] != x_high.shape[2:]:
            raise DimensionError(f"gate inputs disagree spatially: {x_low.shape} vs {x_high.shape}")
        alphas = [p(x_low, x_high) for p in self.paths]
        gated = [x_low * a for a in alphas]
        fused = gated[0] if len(gated) == 1 else concat_channels(gated)
        return relu(self.merge_bn(self.merge(fused))), alphas


def dual_gate_forward(x_l, x_h, gate: DualPathGate):
    y, alphas = gate(x_l, x_h)
    return (y, *alphas)


class _SharedMLP(Module):
    def __init__(self, fin: int, hidden: int, fout: int, rng=None):
        self.fc1 = Linear(fin, hidden, rng=rng)
        self.fc2 = Linear(hidden, fout, rng=rng)

    def forward(self, v: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(v)))


def _pooled_logits(x: Tensor, mlp: _SharedMLP) -> Tensor:
    n, c = x.shape[:2]
    avg = reshape(global_avg_pool(x), (n, c))
    mx = reshape(global_max_pool(x), (n, c))
    return mlp(avg) + mlp(mx)


class ChannelAttention(Module):
    """y = x·β + x with β = sigmoid(M(avgpool x) + M(maxpool x)), M shared."""

    def __init__(self, channels: int, ratio: int = 2, use_max: bool = True, rng=None):
        if channels % ratio:
            raise ContractError(f"channel attention needs channels divisible by {ratio}, got {channels}")
        self.channels, self.use_max = channels, use_max
        self.mlp = _SharedMLP(channels, channels // ratio, channels, rng=rng)

    def coefficients(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        if c != self.channels:
            raise ContractError(f"channel attention expects {self.channels} channels, got {c}")
        if self.use_max:
            logits = _pooled_logits(x, self.mlp)
        else:
            logits = self.mlp(reshape(global_avg_pool(x), (n, c)))
        return reshape(sigmoid(logits), (n, c, 1, 1))

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        beta = self.coefficients(x)
        return x * beta + x, beta


def channel_attention_forward(x, block: ChannelAttention):
    return block(x)


class ScaleAttention(Module):
    """Fuse decoder features from several scales with learned scale weights.

    Every scale is compressed to ``per_scale`` channels by a 1×1 conv and
    resampled to the output resolution; the concatenation F is weighted per
    scale by γ (dual-pooled shared MLP, one output per scale) and refined
    pixel-wise by γ* from a 3×3 conv + ReLU, 1×1 conv + sigmoid head.
    Output: F·γ·γ* + F·γ + F.

    ``gamma_star_per_scale=False`` gives a single γ* map shared by all scales.
    """

    def __init__(self, in_channels: list[int], per_scale: int = 4, ratio: int = 2,
                 gamma_star_per_scale: bool = True, rng=None):
        self.k = len(in_channels)
        self.per_scale = per_scale
        width = per_scale * self.k
        if width % ratio:
            raise ContractError("scale attention width must be divisible by the compression ratio")
        self.compress = [Conv2d(c, per_scale, 1, rng=rng) for c in in_channels]
        self.mlp = _SharedMLP(width, width // ratio, self.k, rng=rng)
        self.refine = Conv2d(width, per_scale, 3, rng=rng)
        self.refine_out = Conv2d(per_scale, self.k if gamma_star_per_scale else 1, 1, rng=rng)

    @property
    def out_channels(self) -> int:
        return self.per_scale * self.k

    def forward(self, features: list[Tensor], size: tuple[int, int]) -> tuple[Tensor, Tensor, Tensor]:
        if len(features) != self.k:
            raise ContractError(f"scale attention built for {self.k} scales, got {len(features)}")
        h, w = size
        # 1×1 conv and bilinear resampling commute; compressing first is cheaper
        parts = []
        for f, conv in zip(features, self.compress):
            c = conv(f)
            parts.append(c if c.shape[2:] == (h, w) else bilinear_resize(c, h, w))
        fused = concat_channels(parts)
        n = fused.shape[0]
        gamma = sigmoid(_pooled_logits(fused, self.mlp))  # N×K
        grouped = reshape(fused, (n, self.k, self.per_scale, h, w))
        weighted = grouped * reshape(gamma, (n, self.k, 1, 1, 1))
        gamma_star = sigmoid(self.refine_out(relu(self.refine(reshape(weighted, (n, self.out_channels, h, w))))))
        gs = reshape(gamma_star, (n, gamma_star.shape[1], 1, h, w))
        y = weighted * gs + weighted + grouped
        return reshape(y, (n, self.out_channels, h, w)), reshape(gamma, (n, self.k, 1, 1)), gamma_star


def scale_attention_forward(features, block: ScaleAttention, size):
    return block(features, size)


def zero_parameters(module: Module) -> None:
    """Set every learnable tensor of ``module`` to zero (used for identity checks)."""
    for p in module.parameters():
        p.data = np.zeros_like(p.data)
