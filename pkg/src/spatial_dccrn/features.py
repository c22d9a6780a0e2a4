"""Inter-channel phase features and the angle feature extractor (AFE)."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .blocks import DenseBlock, FrameLayerNorm, pad_time, time_padding
from .errors import ConfigurationError, ShapeError


def default_pairs(n_channels: int) -> list[tuple[int, int]]:
    """Reference-channel pairs (0, k) for k = 1..P-1."""
    if n_channels < 2:
        raise ConfigurationError("phase-difference features need at least two microphones")
    return [(0, k) for k in range(1, n_channels)]


@dataclass
class CosIpdFeature:
    values: torch.Tensor  # (..., Q, F, T)
    pair_list: list[tuple[int, int]]

    def __post_init__(self):
        if len(self.pair_list) < 1:
            raise ShapeError("need at least one channel pair")
        if self.values.shape[-3] != len(self.pair_list):
            raise ShapeError("feature planes do not match the pair list")


@dataclass
class AngleEmbedding:
    values: torch.Tensor  # (..., T, D)

    def __post_init__(self):
        if not torch.isfinite(self.values).all():
            raise ValueError("angle embedding is not finite")


def cos_ipd_tensor(spec: torch.Tensor, pairs) -> torch.Tensor:
    """cos(arg X_a - arg X_b) for complex ``spec`` (..., P, F, T); bins with a zero side give 1."""
    n_ch = spec.shape[-3]
    for a, b in pairs:
        if not (0 <= a < n_ch and 0 <= b < n_ch):
            raise IndexError(f"channel pair ({a}, {b}) out of range for {n_ch} channels")
    idx_a = torch.tensor([a for a, _ in pairs])
    idx_b = torch.tensor([b for _, b in pairs])
    xa = spec.index_select(-3, idx_a)
    xb = spec.index_select(-3, idx_b)
    denom = xa.abs() * xb.abs()
    valid = denom > 0
    cross = (xa * xb.conj()).real
    cos = cross / torch.where(valid, denom, torch.ones_like(denom))
    return torch.where(valid, cos.clamp(-1.0, 1.0), torch.ones_like(cos))


def cos_ipd(spec, pairs=None) -> CosIpdFeature:
    values = spec.values if hasattr(spec, "values") else spec
    pairs = list(pairs) if pairs is not None else default_pairs(values.shape[-3])
    return CosIpdFeature(cos_ipd_tensor(values, pairs), pairs)


@dataclass
class AfeConfig:
    hidden_channels: int = 16
    dense_depth: int = 2
    pair_list: list[tuple[int, int]] | None = None
    out_channels: int = 1
    kernel: tuple[int, int] = (3, 2)  # (freq, time)
    freq_stride: int = 2

    def __post_init__(self):
        if self.hidden_channels < 1 or self.dense_depth < 1 or self.out_channels < 1:
            raise ConfigurationError("AFE channel counts and depth must be >= 1")
        if self.pair_list is not None:
            self.pair_list = [tuple(p) for p in self.pair_list]
        self.kernel = tuple(self.kernel)

    def pairs(self, n_channels: int) -> list[tuple[int, int]]:
        return self.pair_list if self.pair_list is not None else default_pairs(n_channels)

    def reduced_freqs(self, n_freqs: int) -> int:
        kf = self.kernel[0]
        return (n_freqs + 2 * (kf // 2) - kf) // self.freq_stride + 1

    def embedding_dim(self, n_freqs: int) -> int:
        return self.out_channels * self.reduced_freqs(n_freqs)


class AngleFeatureExtractor(nn.Module):
    """1x1 conv -> dilated dense block -> strided conv; LayerNorm + PReLU after each conv.

    Maps cosIPD planes (B, Q, F, T) to a frame-level embedding (B, T, D).
    """

    def __init__(self, n_pairs: int, cfg: AfeConfig | None = None, causal: bool = True):
        super().__init__()
        cfg = cfg or AfeConfig()
        self.cfg = cfg
        self.causal = causal
        h = cfg.hidden_channels
        self.inp = nn.Conv2d(n_pairs, h, 1)
        self.inp_norm = FrameLayerNorm(h)
        self.inp_act = nn.PReLU(h)
        self.dense = DenseBlock(h, cfg.dense_depth, cfg.kernel, dilations=[2 ** k for k in range(cfg.dense_depth)],
                                causal=causal)
        self.out = nn.Conv2d(h, cfg.out_channels, cfg.kernel, stride=(cfg.freq_stride, 1),
                             padding=(cfg.kernel[0] // 2, 0))
        self.out_norm = FrameLayerNorm(cfg.out_channels)
        self.out_act = nn.PReLU(cfg.out_channels)

    def forward(self, feat: torch.Tensor, cache: dict | None = None) -> torch.Tensor:
        if feat.shape[1] != self.inp.in_channels:
            raise ShapeError(f"AFE expects {self.inp.in_channels} pair planes, got {feat.shape[1]}")
        x = self.inp_act(self.inp_norm(self.inp(feat)))
        x = self.dense(x, cache)
        left, right = time_padding(self.cfg.kernel[1], 1, self.causal)
        x = self.out_act(self.out_norm(self.out(pad_time(self.out, x, left, right, cache))))
        b, c, f, t = x.shape
        return x.permute(0, 3, 1, 2).reshape(b, t, c * f)


def afe_forward(feat: CosIpdFeature, module: AngleFeatureExtractor) -> AngleEmbedding:
    values = feat.values
    batched = values.ndim == 4
    out = module(values if batched else values.unsqueeze(0))
    return AngleEmbedding(out if batched else out.squeeze(0))
