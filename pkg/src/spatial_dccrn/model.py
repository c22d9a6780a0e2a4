"""Sub-/full-channel DCCRN cascade and the complete Spatial-DCCRN network.

Signal flow for a noisy P-channel spectrum ``X``:

    LSC compress -> CFE -> sub-channel DCCRN -> full-channel DCCRN -> CFD
    -> 1x1 reduction to M'' -> mask estimator (M') -> M' X_ref + M'' -> LSC decompress

The angle embedding computed from cosIPD(X) joins the LSTM input of both DCCRNs.
The causal network consumes one frame of lookahead: the filters applied to frame
``t`` come from the network step that has already seen frame ``t + 1``.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
from safetensors.torch import load_file, save_file
from safetensors import safe_open

from .audio import ComplexSpectrogram, LearnableSpectrumCompression
from .blocks import (
    BlockConfig, ComplexConv2d, ComplexConvTranspose2d, ComplexFeatureDecoder,
    ComplexFeatureEncoder, ComplexPReLU, FrameLayerNorm, to_complex, to_stacked,
)
from .config import NetworkConfig
from .errors import ConfigurationError, ShapeError
from .features import AngleFeatureExtractor, cos_ipd_tensor
from .mmf import FilterPair, MaskEstimator, apply_mmf

CHECKPOINT_VERSION = "1"


class DCCRN(nn.Module):
    """Complex U-Net with an LSTM bottleneck fused with the angle embedding.

    ``groups > 1`` gives the sub-channel variant: every encoder and decoder
    convolution is split into ``groups`` independent channel groups, one per mic.
    """

    def __init__(self, cfg: NetworkConfig, channels: list[int], groups: int, angle_dim: int):
        super().__init__()
        self.groups = groups
        self.angle_dim = angle_dim
        self.causal = cfg.causal
        self.freqs = cfg.encoder_freqs()
        widths = [cfg.cfe_channels] + [c // 2 for c in channels]
        kernel = (cfg.kernel[0], cfg.time_kernel)

        self.encoder = nn.ModuleList()
        self.pathways = nn.ModuleList()
        for c_in, c_out in zip(widths[:-1], widths[1:]):
            conv = ComplexConv2d(BlockConfig(c_in, c_out, kernel, cfg.stride, groups,
                                             freq_padding=cfg.freq_padding, causal_time_pad=cfg.causal))
            norm = FrameLayerNorm(c_out, True, groups=groups)
            self.encoder.append(nn.ModuleList([conv, norm, ComplexPReLU(c_out)]))
            self.pathways.append(ComplexConv2d(BlockConfig(c_out, c_out, groups=groups)))

        self.bottleneck_width = 2 * widths[-1] * self.freqs[-1]
        directions = 1 if cfg.causal else 2
        self.lstm = nn.LSTM(self.bottleneck_width + angle_dim, cfg.lstm_nodes, batch_first=True,
                            bidirectional=not cfg.causal)
        self.fc = nn.Linear(directions * cfg.lstm_nodes, cfg.fc_dim)
        self.proj = nn.Linear(cfg.fc_dim, self.bottleneck_width)

        self.decoder = nn.ModuleList()
        for k in range(6, 0, -1):
            conv = ComplexConvTranspose2d(BlockConfig(widths[k], widths[k - 1], kernel, cfg.stride, groups,
                                                      freq_padding=cfg.freq_padding, causal_time_pad=cfg.causal))
            if k > 1:
                self.decoder.append(nn.ModuleList([conv, FrameLayerNorm(widths[k - 1], True, groups=groups),
                                                   ComplexPReLU(widths[k - 1])]))
            else:
                self.decoder.append(nn.ModuleList([conv]))
        self._init_recurrent()

    def _init_recurrent(self):
        for name, p in self.lstm.named_parameters():
            if name.startswith("weight"):
                for chunk in p.data.chunk(4, dim=0):
                    nn.init.orthogonal_(chunk)
            else:
                nn.init.zeros_(p)

    def encode(self, x: torch.Tensor, cache: dict | None = None) -> list[torch.Tensor]:
        skips = []
        for conv, norm, act in self.encoder:
            x = act(norm(conv(x, cache)))
            skips.append(x)
        return skips

    def forward(self, x: torch.Tensor, angle: torch.Tensor | None = None, cache: dict | None = None) -> torch.Tensor:
        if x.shape[2] != self.freqs[0]:
            raise ShapeError(f"expected {self.freqs[0]} bins, got {x.shape[2]}")
        skips = self.encode(x, cache)
        h = skips[-1]
        b, c, f, t = h.shape
        seq = h.permute(0, 3, 1, 2).reshape(b, t, c * f)
        if self.angle_dim:
            if angle is None or angle.shape[:2] != (b, t) or angle.shape[2] != self.angle_dim:
                got = None if angle is None else tuple(angle.shape)
                raise ShapeError(f"angle embedding {got} misaligned with {t} frames of width {self.angle_dim}")
            seq = torch.cat([seq, angle], dim=-1)
        if cache is None:
            seq, _ = self.lstm(seq)
        else:
            seq, cache[id(self.lstm)] = self.lstm(seq, cache.get(id(self.lstm)))
        seq = self.proj(self.fc(seq))
        h = seq.reshape(b, t, c, f).permute(0, 2, 3, 1)
        for level, layer in zip(range(5, -1, -1), self.decoder):
            h = h + self.pathways[level](skips[level], cache)
            h = layer[0](h, out_freqs=self.freqs[level], cache=cache)
            for mod in layer[1:]:
                h = mod(h)
        return h


class SpatialDCCRN(nn.Module):
    def __init__(self, cfg: NetworkConfig | None = None):
        super().__init__()
        cfg = cfg or NetworkConfig()
        self.cfg = cfg
        P, F = cfg.n_mics, cfg.n_freqs
        self.pairs = cfg.afe.pairs(P)
        self.lsc = LearnableSpectrumCompression(F, cfg.lsc_bands, cfg.lsc_init)
        angle_dim = 0
        if cfg.use_afe:
            self.afe = AngleFeatureExtractor(len(self.pairs), cfg.afe, causal=cfg.causal)
            angle_dim = cfg.afe.embedding_dim(F)
        self.angle_dim = angle_dim
        self.cfe = ComplexFeatureEncoder(P, cfg.cfe_channels, cfg.cfe_depth, cfg.cfe_kernel,
                                         cfg.dense_kernel, causal=cfg.causal)
        self.sub = DCCRN(cfg, cfg.sub_channels, groups=P, angle_dim=angle_dim)
        self.full = DCCRN(cfg, cfg.full_channels, groups=1, angle_dim=angle_dim if cfg.afe_in_full else 0)
        self.cfd = ComplexFeatureDecoder(P, cfg.cfe_channels, cfg.cfe_depth, cfg.cfe_kernel,
                                         cfg.dense_kernel, causal=cfg.causal)
        self.reduce = ComplexConv2d(BlockConfig(P, 1))
        if cfg.use_mmf:
            self.mask = MaskEstimator(cfg.mmf, causal=cfg.causal)

    @property
    def lookahead(self) -> int:
        return self.cfg.stft.lookahead_frames

    def filters(self, noisy: torch.Tensor, cache: dict | None = None):
        """Run the network on complex noisy (B, P, F, T) -> compressed input, M', M'' (unshifted)."""
        xc = self.lsc.compress(noisy)
        angle = None
        if self.cfg.use_afe:
            angle = self.afe(cos_ipd_tensor(noisy, self.pairs), cache)
        h = self.cfe(to_stacked(xc), cache)
        h = self.sub(h, angle, cache)
        h = self.full(h, angle if self.cfg.afe_in_full else None, cache)
        h = self.cfd(h, cache)
        mapping = to_complex(self.reduce(h, cache))[:, 0]
        masking = self.mask(xc, mapping, cache) if self.cfg.use_mmf else None
        return xc, masking, mapping

    def reconstruct(self, xc: torch.Tensor, masking, mapping) -> torch.Tensor:
        ref = self.cfg.mmf.reference_channel
        if masking is None:
            # ablation without MMF: complex ratio mask on the reference channel
            enhanced = (mapping * xc[:, ref]).unsqueeze(1)
        else:
            enhanced = apply_mmf(xc, FilterPair(masking, mapping), ref)
        return self.lsc.decompress(enhanced)

    def forward(self, noisy: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Offline enhancement of complex (B, P, F, T) -> (M'' path (B, F, T), enhanced (B, 1, F, T))."""
        self._check_input(noisy)
        T, L = noisy.shape[-1], self.lookahead if self.cfg.causal else 0
        padded = nn.functional.pad(noisy, (0, L)) if L else noisy
        xc, masking, mapping = self.filters(padded)
        mapping = mapping[..., L:L + T]
        if masking is not None:
            masking = masking[..., L:L + T]
        return mapping, self.reconstruct(xc[..., :T], masking, mapping)

    def _check_input(self, noisy: torch.Tensor):
        if not noisy.is_complex() or noisy.ndim != 4:
            raise ShapeError("expected complex noisy spectrum shaped (B, P, F, T)")
        if noisy.shape[1] != self.cfg.n_mics:
            raise ConfigurationError(f"model built for {self.cfg.n_mics} mics, got {noisy.shape[1]}")
        if noisy.shape[2] != self.cfg.n_freqs:
            raise ShapeError(f"model built for {self.cfg.n_freqs} bins, got {noisy.shape[2]}")


def model_forward(noisy: ComplexSpectrogram, model: SpatialDCCRN):
    mapping, enhanced = model(noisy.values.unsqueeze(0))
    return mapping[0], ComplexSpectrogram(enhanced[0], noisy.num_samples)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# -- streaming ------------------------------------------------------------------------------


@dataclass
class ModelState:
    """Left-context caches of every causal layer, LSTM (h, c), and the lookahead buffer."""

    cache: dict = field(default_factory=dict)
    pending: deque = field(default_factory=deque)
    frames_in: int = 0

    def reset(self):
        self.cache.clear()
        self.pending.clear()
        self.frames_in = 0


def init_state(model: SpatialDCCRN, batch: int = 1) -> ModelState:
    """All-zero state with every cache allocated at its final shape."""
    if not model.cfg.causal:
        raise ConfigurationError("streaming requires a causal model")
    probe = {}
    p = next(model.parameters())
    frame = torch.zeros(batch, model.cfg.n_mics, model.cfg.n_freqs, 1,
                        dtype=torch.complex128 if p.dtype == torch.float64 else torch.complex64)
    with torch.no_grad():
        model.filters(frame, probe)
    cache = {}
    for key, value in probe.items():
        if isinstance(value, tuple):
            cache[key] = tuple(torch.zeros_like(v) for v in value)
        else:
            cache[key] = torch.zeros_like(value)
    return ModelState(cache=cache)


def state_shapes(state: ModelState) -> list[tuple[int, ...]]:
    shapes = []
    for value in state.cache.values():
        shapes.extend(tuple(v.shape) for v in (value if isinstance(value, tuple) else (value,)))
    return shapes


def streaming_step(frame: torch.Tensor, state: ModelState, model: SpatialDCCRN):
    """Feed one noisy frame (B, P, F) or (B, P, F, 1); returns (enhanced (B, 1, F) or None, state).

    Output lags the input by the model's lookahead: the first ``lookahead`` calls
    return ``None``. Call :func:`flush` at end of stream to drain the buffer.
    """
    if not model.cfg.causal:
        raise ConfigurationError("streaming_step needs a causal model")
    if frame.ndim == 3:
        frame = frame.unsqueeze(-1)
    model._check_input(frame)
    if frame.shape[-1] != 1:
        raise ShapeError("streaming_step consumes exactly one frame")
    xc, masking, mapping = model.filters(frame, state.cache)
    state.pending.append(xc)
    state.frames_in += 1
    if len(state.pending) <= model.lookahead:
        return None, state
    past = state.pending.popleft()
    return model.reconstruct(past, masking, mapping)[..., 0], state


def flush(state: ModelState, model: SpatialDCCRN, batch: int = 1) -> list[torch.Tensor]:
    """Push zero frames through so the buffered lookahead frames are emitted."""
    out = []
    p = next(model.parameters())
    dtype = torch.complex128 if p.dtype == torch.float64 else torch.complex64
    for _ in range(min(model.lookahead, state.frames_in)):
        zero = torch.zeros(batch, model.cfg.n_mics, model.cfg.n_freqs, 1, dtype=dtype)
        frames_in = state.frames_in
        y, state = streaming_step(zero, state, model)
        state.frames_in = frames_in
        out.append(y)
    return out


@torch.no_grad()
def stream_enhance(model: SpatialDCCRN, noisy: torch.Tensor) -> torch.Tensor:
    """Frame-by-frame enhancement of complex (B, P, F, T); returns (B, 1, F, T)."""
    state = init_state(model, noisy.shape[0])
    frames = []
    for t in range(noisy.shape[-1]):
        y, state = streaming_step(noisy[..., t], state, model)
        if y is not None:
            frames.append(y)
    frames.extend(flush(state, model, noisy.shape[0]))
    return torch.stack(frames, dim=-1)


# -- checkpoints ------------------------------------------------------------------------------


def save_checkpoint(path: str | Path, model: SpatialDCCRN, extra: dict | None = None) -> Path:
    """safetensors file: parameter name -> little-endian array, config snapshot in the metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().contiguous().cpu() for k, v in model.state_dict().items()}
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "network_config": json.dumps(model.cfg.to_dict()),
        "extra": json.dumps(extra or {}),
    }
    save_file(tensors, str(path), metadata=meta)
    return path


def load_checkpoint(path: str | Path) -> tuple[SpatialDCCRN, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: checkpoint not found")
    with safe_open(str(path), framework="pt") as fh:
        meta = fh.metadata() or {}
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {meta.get('format_version')!r}")
    cfg = NetworkConfig.from_dict(json.loads(meta["network_config"]))
    tensors = load_file(str(path))
    model = SpatialDCCRN(cfg)
    dtype = next(iter(tensors.values())).dtype
    model.to(dtype)
    model.load_state_dict(tensors)
    model.eval()
    return model, json.loads(meta.get("extra", "{}"))
