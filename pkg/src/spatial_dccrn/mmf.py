"""Masking-and-mapping filtering head.

The enhanced reference-channel spectrum is ``S = M' * X_ref + M''`` where the
real mask ``M'`` scales the noisy magnitude (keeping the noisy phase) and the
complex map ``M''`` adds a residual correction.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .blocks import pad_time, time_padding
from .errors import ConfigurationError, ShapeError


@dataclass
class MmfConfig:
    conv1_kernel: tuple[int, int, int] = (2, 5, 3)  # (pair depth, freq, time)
    conv1_channels: int = 8
    conv1_stride: tuple[int, int, int] = (2, 1, 1)
    conv2_kernel: tuple[int, int, int] = (1, 5, 3)
    conv2_channels: int = 1
    conv2_stride: tuple[int, int, int] = (1, 1, 1)
    mask_max: float = 5.0
    reference_channel: int = 0

    def __post_init__(self):
        self.conv1_kernel, self.conv1_stride = tuple(self.conv1_kernel), tuple(self.conv1_stride)
        self.conv2_kernel, self.conv2_stride = tuple(self.conv2_kernel), tuple(self.conv2_stride)
        if self.conv1_stride[0] != 2 or self.conv1_kernel[0] != 2:
            raise ConfigurationError("first conv3d must pair real/imag planes (depth kernel 2, stride 2)")
        if self.conv1_stride[1:] != (1, 1) or self.conv2_stride != (1, 1, 1):
            raise ConfigurationError("frequency/time strides inside the mask estimator must be 1")
        if self.conv2_channels != 1:
            raise ConfigurationError("mask estimator must end in a single channel")
        if self.mask_max <= 0:
            raise ConfigurationError("mask_max must be positive")


@dataclass
class FilterPair:
    masking: torch.Tensor  # real (..., F, T), M'
    mapping: torch.Tensor  # complex (..., F, T), M''

    def __post_init__(self):
        if self.masking.is_complex() or not self.mapping.is_complex():
            raise ShapeError("masking must be real and mapping complex")
        if self.masking.shape != self.mapping.shape:
            raise ShapeError(f"filter shapes differ: {tuple(self.masking.shape)} vs {tuple(self.mapping.shape)}")


def rearrange_real_imag(z: torch.Tensor) -> torch.Tensor:
    """Complex (..., P, F, T) -> real (..., 2P, F, T) ordered r0, i0, r1, i1, ..."""
    planes = torch.stack([z.real, z.imag], dim=-3)  # (..., P, 2, F, T)
    return planes.flatten(-4, -3)


def restore_real_imag(x: torch.Tensor) -> torch.Tensor:
    if x.shape[-3] % 2:
        raise ShapeError("interleaved planes must come in real/imag pairs")
    pairs = x.unflatten(-3, (x.shape[-3] // 2, 2))
    return torch.complex(pairs[..., 0, :, :], pairs[..., 1, :, :])


class MaskEstimator(nn.Module):
    """Two 3-D convolutions over (pair depth, freq, time) producing M' in (0, mask_max)."""

    def __init__(self, cfg: MmfConfig | None = None, causal: bool = True):
        super().__init__()
        cfg = cfg or MmfConfig()
        self.cfg = cfg
        self.causal = causal
        self.conv1 = nn.Conv3d(1, cfg.conv1_channels, cfg.conv1_kernel, cfg.conv1_stride,
                               padding=(0, cfg.conv1_kernel[1] // 2, 0))
        self.act = nn.PReLU(cfg.conv1_channels)
        self.conv2 = nn.Conv3d(cfg.conv1_channels, cfg.conv2_channels, cfg.conv2_kernel, cfg.conv2_stride,
                               padding=(0, cfg.conv2_kernel[1] // 2, 0))

    def stack(self, noisy: torch.Tensor, mapping: torch.Tensor) -> torch.Tensor:
        """Interleaved noisy planes followed by (real, imag) of M'' -> (B, 1, 2P+2, F, T)."""
        both = torch.cat([noisy, mapping.unsqueeze(-3)], dim=-3)
        return rearrange_real_imag(both).unsqueeze(1)

    def forward(self, noisy: torch.Tensor, mapping: torch.Tensor, cache: dict | None = None) -> torch.Tensor:
        x = self.stack(noisy, mapping)
        if x.shape[2] % 2:
            raise ShapeError("stack arity must be even")
        b, _, depth, f, t = x.shape
        # depth kernels (2, stride 2) and (1) only ever see one real/imag pair, so both
        # 3-D convolutions run as 2-D convolutions with the pair folded into the batch
        x = x.reshape(b * depth // 2, 2, f, t)
        for conv in (self.conv1, self.conv2):
            left, right = time_padding(conv.kernel_size[2], 1, self.causal)
            w = conv.weight.flatten(1, 2)
            x = nn.functional.conv2d(pad_time(conv, x, left, right, cache), w, conv.bias,
                                     padding=(conv.padding[1], 0))
            if conv is self.conv1:
                x = self.act(x)
        x = x.reshape(b, depth // 2, f, t)
        return self.cfg.mask_max * torch.sigmoid(x.mean(dim=1))


def estimate_masking_filter(noisy: torch.Tensor, mapping: torch.Tensor, module: MaskEstimator) -> torch.Tensor:
    """M' (B, F, T) from noisy (B, P, F, T) and single-channel M'' (B, F, T), both complex."""
    return module(noisy, mapping)


def apply_mmf(noisy: torch.Tensor, pair: FilterPair, reference_channel: int = 0) -> torch.Tensor:
    """Masked reference magnitude with noisy phase, plus the complex residual map.

    ``noisy`` is complex (..., P, F, T); the result is (..., 1, F, T).
    """
    ref = noisy[..., reference_channel, :, :]
    if ref.shape != pair.mapping.shape:
        raise ShapeError(f"noisy reference {tuple(ref.shape)} vs filters {tuple(pair.mapping.shape)}")
    # (M'|X|) e^{j arg X} == M' X for real M' >= 0
    coarse = pair.masking * ref
    return (coarse + pair.mapping).unsqueeze(-3)
