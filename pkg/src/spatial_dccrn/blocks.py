"""Complex-valued convolution blocks, dilated dense blocks and the CFE/CFD pair.

Complex feature maps are stored as real tensors of shape ``(B, 2C, F, T)`` with
the ``C`` real planes first and the ``C`` imaginary planes after them. Every
time axis convolution pads on the left only when ``causal`` is set, and can run
frame by frame through a ``cache`` dict that carries the left context between
calls (see :func:`pad_time`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ShapeError


def pad_time(owner: nn.Module, x: torch.Tensor, left: int, right: int, cache: dict | None) -> torch.Tensor:
    """Pad the last (time) axis; in streaming mode the left context comes from ``cache``."""
    if cache is None:
        return F.pad(x, (left, right)) if left or right else x
    if right:
        raise ConfigurationError("streaming needs causal (left-only) time padding")
    if not left:
        return x
    key = id(owner)
    prev = cache.get(key)
    if prev is None:
        prev = x.new_zeros(*x.shape[:-1], left)
    full = torch.cat([prev, x], dim=-1)
    cache[key] = full[..., -left:].detach()
    return full


def split_complex(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    c = x.shape[1] // 2
    return x[:, :c], x[:, c:]


def to_stacked(z: torch.Tensor) -> torch.Tensor:
    """Complex (B, C, F, T) -> stacked real (B, 2C, F, T)."""
    return torch.cat([z.real, z.imag], dim=1)


def to_complex(x: torch.Tensor) -> torch.Tensor:
    re, im = split_complex(x)
    return torch.complex(re, im)


def time_padding(kernel_t: int, dilation_t: int, causal: bool) -> tuple[int, int]:
    span = dilation_t * (kernel_t - 1)
    if causal:
        return span, 0
    return span - span // 2, span // 2


def complex_conv2d(x, w_real, w_imag, bias=None, stride=1, padding=0, dilation=1, groups=1):
    """Complex convolution on stacked tensors.

    ``(W_r + iW_i) * (x_r + ix_i) = (W_r*x_r - W_i*x_i) + i(W_r*x_i + W_i*x_r)``. Both
    sub-convolutions use the same group structure. ``bias`` is ``(2, C_out)``.
    """
    re, im = split_complex(x)
    if re.shape[1] % groups:
        raise ConfigurationError(f"{re.shape[1]} complex input channels not divisible by groups={groups}")
    b = re.shape[0]
    both = torch.cat([re, im], dim=0)
    yr = F.conv2d(both, w_real, None, stride, padding, dilation, groups)
    yi = F.conv2d(both, w_imag, None, stride, padding, dilation, groups)
    out_r = yr[:b] - yi[b:]
    out_i = yr[b:] + yi[:b]
    if bias is not None:
        out_r = out_r + bias[0].view(1, -1, 1, 1)
        out_i = out_i + bias[1].view(1, -1, 1, 1)
    return torch.cat([out_r, out_i], dim=1)


def complex_conv_transpose2d(x, w_real, w_imag, bias=None, stride=1, padding=0, output_padding=0, groups=1):
    re, im = split_complex(x)
    b = re.shape[0]
    both = torch.cat([re, im], dim=0)
    yr = F.conv_transpose2d(both, w_real, None, stride, padding, output_padding, groups)
    yi = F.conv_transpose2d(both, w_imag, None, stride, padding, output_padding, groups)
    out_r = yr[:b] - yi[b:]
    out_i = yr[b:] + yi[:b]
    if bias is not None:
        out_r = out_r + bias[0].view(1, -1, 1, 1)
        out_i = out_i + bias[1].view(1, -1, 1, 1)
    return torch.cat([out_r, out_i], dim=1)


@dataclass(frozen=True)
class BlockConfig:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (1, 1)  # (freq, time)
    stride: tuple[int, int] = (1, 1)
    groups: int = 1
    dilation: int = 1  # time axis
    freq_padding: int | None = None  # None -> kernel_f // 2
    causal_time_pad: bool = True

    def __post_init__(self):
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigurationError(
                f"channels {self.in_channels}->{self.out_channels} not divisible by groups={self.groups}"
            )
        if min(self.kernel) < 1 or min(self.stride) < 1 or self.dilation < 1:
            raise ConfigurationError("kernel, stride and dilation must be positive")
        if self.stride[1] != 1:
            raise ConfigurationError("time stride must be 1 so frames stay aligned")

    @property
    def fpad(self) -> int:
        return self.kernel[0] // 2 if self.freq_padding is None else self.freq_padding


def _fan_in_init(w_real: nn.Parameter, w_imag: nn.Parameter, bias, fan_in: int):
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    nn.init.uniform_(w_real, -bound, bound)
    nn.init.uniform_(w_imag, -bound, bound)
    if bias is not None:
        nn.init.uniform_(bias, -bound, bound)


class ComplexConv2d(nn.Module):
    """Group complex convolution; channel counts are complex channels."""

    def __init__(self, cfg: BlockConfig, bias: bool = True):
        super().__init__()
        self.cfg = cfg
        kf, kt = cfg.kernel
        shape = (cfg.out_channels, cfg.in_channels // cfg.groups, kf, kt)
        self.weight_real = nn.Parameter(torch.empty(shape))
        self.weight_imag = nn.Parameter(torch.empty(shape))
        self.bias = nn.Parameter(torch.empty(2, cfg.out_channels)) if bias else None
        _fan_in_init(self.weight_real, self.weight_imag, self.bias, 2 * shape[1] * kf * kt)

    def forward(self, x: torch.Tensor, cache: dict | None = None) -> torch.Tensor:
        cfg = self.cfg
        if x.shape[1] != 2 * cfg.in_channels:
            raise ShapeError(f"expected {2 * cfg.in_channels} stacked planes, got {x.shape[1]}")
        left, right = time_padding(cfg.kernel[1], cfg.dilation, cfg.causal_time_pad)
        x = pad_time(self, x, left, right, cache)
        return complex_conv2d(
            x, self.weight_real, self.weight_imag, self.bias,
            stride=cfg.stride, padding=(cfg.fpad, 0), dilation=(1, cfg.dilation), groups=cfg.groups,
        )


class ComplexConvTranspose2d(nn.Module):
    """Group complex transposed convolution, upsampling the frequency axis only."""

    def __init__(self, cfg: BlockConfig, bias: bool = True):
        super().__init__()
        if cfg.dilation != 1:
            raise ConfigurationError("transposed convolution supports time dilation 1 only")
        self.cfg = cfg
        kf, kt = cfg.kernel
        shape = (cfg.in_channels, cfg.out_channels // cfg.groups, kf, kt)
        self.weight_real = nn.Parameter(torch.empty(shape))
        self.weight_imag = nn.Parameter(torch.empty(shape))
        self.bias = nn.Parameter(torch.empty(2, cfg.out_channels)) if bias else None
        _fan_in_init(self.weight_real, self.weight_imag, self.bias, 2 * (cfg.in_channels // cfg.groups) * kf * kt)

    def output_freqs(self, n_in: int, output_padding: int = 0) -> int:
        kf, sf = self.cfg.kernel[0], self.cfg.stride[0]
        return (n_in - 1) * sf - 2 * self.cfg.fpad + kf + output_padding

    def forward(self, x: torch.Tensor, out_freqs: int | None = None, cache: dict | None = None) -> torch.Tensor:
        cfg = self.cfg
        kt = cfg.kernel[1]
        op = 0 if out_freqs is None else out_freqs - self.output_freqs(x.shape[2])
        if not 0 <= op < cfg.stride[0]:
            raise ShapeError(f"cannot reach {out_freqs} bins from {x.shape[2]} with stride {cfg.stride[0]}")
        left, right = time_padding(kt, 1, cfg.causal_time_pad)
        x = pad_time(self, x, left, right, cache)
        # time padding kt-1 on the transposed op undoes the explicit padding above
        return complex_conv_transpose2d(
            x, self.weight_real, self.weight_imag, self.bias,
            stride=cfg.stride, padding=(cfg.fpad, kt - 1), output_padding=(op, 0), groups=cfg.groups,
        )


class FrameLayerNorm(nn.Module):
    """Normalise every frame jointly over channels and frequency.

    With ``complex_pairs`` the input is stacked real/imag and the gain is shared by
    the real and imaginary plane of each complex channel. ``groups > 1`` computes
    the statistics separately inside each channel group, so grouped layers stay
    independent across groups.
    """

    def __init__(self, channels: int, complex_pairs: bool = False, eps: float = 1e-5, groups: int = 1):
        super().__init__()
        if channels % groups:
            raise ConfigurationError(f"{channels} channels not divisible by groups={groups}")
        self.complex_pairs = complex_pairs
        self.groups = groups
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(channels))
        self.shift = nn.Parameter(torch.zeros(2 * channels if complex_pairs else channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, f, t = x.shape
        parts = 2 if self.complex_pairs else 1
        # (B, real/imag, group, channels in group, F, T)
        v = x.reshape(b, parts, self.groups, c // (parts * self.groups), f, t)
        mean = v.mean(dim=(1, 3, 4), keepdim=True)
        var = v.var(dim=(1, 3, 4), keepdim=True, unbiased=False)
        y = ((v - mean) / torch.sqrt(var + self.eps)).reshape(b, c, f, t)
        gain = self.gain.repeat(2) if self.complex_pairs else self.gain
        return y * gain.view(1, -1, 1, 1) + self.shift.view(1, -1, 1, 1)


class ComplexPReLU(nn.Module):
    """PReLU on real and imaginary planes with one slope per complex channel."""

    def __init__(self, channels: int, init: float = 0.25):
        super().__init__()
        self.weight = nn.Parameter(torch.full((channels,), init))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.prelu(x, self.weight.repeat(2))


class DenseBlock(nn.Module):
    """Dilated dense block on real planes.

    Layer ``k`` sees the concatenation of the block input and all earlier layer
    outputs, and convolves along time with dilation ``dilations[k]``.
    """

    def __init__(self, channels: int, depth: int, kernel=(3, 2), dilations=None, causal: bool = True):
        super().__init__()
        if depth < 1:
            raise ConfigurationError("dense block depth must be >= 1")
        dilations = list(dilations) if dilations is not None else [2 ** k for k in range(depth)]
        if len(dilations) != depth:
            raise ConfigurationError("need one dilation per dense layer")
        self.kernel = tuple(kernel)
        self.dilations = dilations
        self.causal = causal
        self.convs = nn.ModuleList(
            nn.Conv2d(channels * (k + 1), channels, self.kernel, padding=(self.kernel[0] // 2, 0), dilation=(1, d))
            for k, d in enumerate(dilations)
        )
        self.norms = nn.ModuleList(FrameLayerNorm(channels) for _ in dilations)
        self.acts = nn.ModuleList(nn.PReLU(channels) for _ in dilations)

    @property
    def receptive_field(self) -> int:
        return 1 + sum(d * (self.kernel[1] - 1) for d in self.dilations)

    def forward(self, x: torch.Tensor, cache: dict | None = None) -> torch.Tensor:
        feats = x
        out = x
        for conv, norm, act, d in zip(self.convs, self.norms, self.acts, self.dilations):
            left, right = time_padding(self.kernel[1], d, self.causal)
            out = act(norm(conv(pad_time(conv, feats, left, right, cache))))
            feats = torch.cat([feats, out], dim=1)
        return out


class ComplexFeatureEncoder(nn.Module):
    """CFE: 1x1 complex conv -> dilated dense block -> complex conv, each normalised."""

    def __init__(self, in_channels: int, channels: int = 32, depth: int = 5,
                 kernel=(3, 2), dense_kernel=(3, 2), causal: bool = True):
        super().__init__()
        self.inp = ComplexConv2d(BlockConfig(in_channels, channels, causal_time_pad=causal))
        self.inp_norm = FrameLayerNorm(channels, complex_pairs=True)
        self.inp_act = ComplexPReLU(channels)
        self.dense = DenseBlock(2 * channels, depth, dense_kernel, causal=causal)
        self.out = ComplexConv2d(BlockConfig(channels, channels, kernel, causal_time_pad=causal))
        self.out_norm = FrameLayerNorm(channels, complex_pairs=True)
        self.out_act = ComplexPReLU(channels)

    def forward(self, x: torch.Tensor, cache: dict | None = None) -> torch.Tensor:
        x = self.inp_act(self.inp_norm(self.inp(x, cache)))
        x = self.dense(x, cache)
        return self.out_act(self.out_norm(self.out(x, cache)))


class ComplexFeatureDecoder(nn.Module):
    """CFD: mirror of the encoder; the final 1x1 projection is left linear."""

    def __init__(self, out_channels: int, channels: int = 32, depth: int = 5,
                 kernel=(3, 2), dense_kernel=(3, 2), causal: bool = True):
        super().__init__()
        self.inp = ComplexConv2d(BlockConfig(channels, channels, kernel, causal_time_pad=causal))
        self.inp_norm = FrameLayerNorm(channels, complex_pairs=True)
        self.inp_act = ComplexPReLU(channels)
        self.dense = DenseBlock(2 * channels, depth, dense_kernel, causal=causal)
        self.out = ComplexConv2d(BlockConfig(channels, out_channels, causal_time_pad=causal))

    def forward(self, x: torch.Tensor, cache: dict | None = None) -> torch.Tensor:
        x = self.inp_act(self.inp_norm(self.inp(x, cache)))
        x = self.dense(x, cache)
        return self.out(x, cache)
