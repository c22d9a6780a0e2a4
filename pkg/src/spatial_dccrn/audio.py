"""Waveform <-> spectrogram front end and learnable spectrum compression.

Framing: 25 ms square-root Hann window, 6.25 ms hop, 512-point FFT at 16 kHz.
Frames are laid out so that frame ``t`` is centred on sample ``t * hop``: the
signal is reflect-padded by half a window at the start and zero-padded at the
end, which gives ``T = 1 + ceil(N / hop)`` frames for ``N`` samples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import soundfile as sf
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ShapeError

_WINDOWS = ("sqrt_hann", "hann", "rect")


@dataclass(frozen=True)
class StftConfig:
    window_ms: float = 25.0
    hop_ms: float = 6.25
    fft_size: int = 512
    lookahead_frames: int = 1
    window_fn: str = "sqrt_hann"
    sample_rate: int = 16000

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ConfigurationError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.window_fn not in _WINDOWS:
            raise ConfigurationError(f"unknown window {self.window_fn!r}; choose from {_WINDOWS}")
        win, hop = self.win_length, self.hop_length
        if win <= 0 or hop <= 0:
            raise ConfigurationError("window and hop must span at least one sample")
        if not math.isclose(win, self.window_ms * self.sample_rate / 1000.0) or not math.isclose(
            hop, self.hop_ms * self.sample_rate / 1000.0
        ):
            raise ConfigurationError("window and hop must be whole numbers of samples")
        if win % hop:
            raise ConfigurationError(f"hop ({hop}) must divide the window length ({win})")
        if self.fft_size < win:
            raise ConfigurationError(f"fft_size {self.fft_size} shorter than window {win}")
        if self.lookahead_frames < 0:
            raise ConfigurationError("lookahead_frames must be >= 0")
        if self.window_fn == "sqrt_hann" and (win // hop) < 2:
            raise ConfigurationError("square-root Hann needs at least 50% overlap for COLA")

    @property
    def win_length(self) -> int:
        return int(round(self.window_ms * self.sample_rate / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000.0))

    @property
    def n_freqs(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def latency_ms(self) -> float:
        """Algorithmic latency: one window plus one hop of output plus the lookahead."""
        return self.window_ms + self.hop_ms * (1 + self.lookahead_frames)

    def num_frames(self, num_samples: int) -> int:
        return 1 + -(-num_samples // self.hop_length)

    def window(self, dtype=torch.float32, device=None) -> torch.Tensor:
        n = self.win_length
        if self.window_fn == "rect":
            return torch.ones(n, dtype=dtype, device=device)
        w = torch.hann_window(n, periodic=True, dtype=torch.float64)
        if self.window_fn == "sqrt_hann":
            w = w.sqrt()
        return w.to(dtype=dtype, device=device)


@dataclass
class MultiChannelWaveform:
    samples: torch.Tensor  # (P, N)
    sample_rate: int

    def __post_init__(self):
        if not torch.is_tensor(self.samples):
            self.samples = torch.as_tensor(np.asarray(self.samples))
        if self.samples.ndim == 1:
            self.samples = self.samples.unsqueeze(0)
        if self.samples.ndim != 2:
            raise ShapeError(f"expected (channels, time) samples, got shape {tuple(self.samples.shape)}")
        if self.samples.shape[0] < 1 or self.samples.shape[1] < 1:
            raise ShapeError("waveform needs at least one channel and one sample")
        if self.sample_rate <= 0:
            raise ConfigurationError("sample_rate must be positive")
        if not torch.isfinite(self.samples).all():
            raise ValueError("waveform contains non-finite samples")

    @property
    def num_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]


@dataclass
class ComplexSpectrogram:
    values: torch.Tensor  # complex (P, F, T)
    num_samples: int | None = None

    def __post_init__(self):
        if not torch.is_tensor(self.values):
            self.values = torch.as_tensor(np.asarray(self.values))
        if not self.values.is_complex():
            raise ShapeError("spectrogram values must be complex")
        if self.values.ndim != 3:
            raise ShapeError(f"expected (channels, freqs, frames), got {tuple(self.values.shape)}")

    @property
    def shape(self):
        return tuple(self.values.shape)


def frame_signal(x: torch.Tensor, cfg: StftConfig) -> torch.Tensor:
    """Pad and cut ``x`` (..., N) into frames (..., T, win)."""
    win, hop = cfg.win_length, cfg.hop_length
    n = x.shape[-1]
    half = win // 2
    lead = x.reshape(-1, 1, n)
    mode = "reflect" if n > half else "constant"
    lead = F.pad(lead, (half, 0), mode=mode)
    n_frames = cfg.num_frames(n)
    total = (n_frames - 1) * hop + win
    lead = F.pad(lead, (0, total - lead.shape[-1]))
    frames = lead.squeeze(1).unfold(-1, win, hop)
    return frames.reshape(*x.shape[:-1], n_frames, win)


def stft_tensor(x: torch.Tensor, cfg: StftConfig) -> torch.Tensor:
    """Complex STFT of a real tensor (..., N) -> (..., F, T)."""
    frames = frame_signal(x, cfg) * cfg.window(x.dtype, x.device)
    spec = torch.fft.rfft(frames, n=cfg.fft_size, dim=-1)
    return spec.transpose(-1, -2)


def overlap_add(frames: torch.Tensor, cfg: StftConfig) -> torch.Tensor:
    """Overlap-add time frames (..., T, win) into a padded signal (..., (T-1)*hop + win)."""
    *lead, n_frames, win = frames.shape
    hop = cfg.hop_length
    flat = frames.reshape(-1, n_frames, win).transpose(1, 2)
    total = (n_frames - 1) * hop + win
    out = F.fold(flat, output_size=(1, total), kernel_size=(1, win), stride=(1, hop))
    return out.reshape(*lead, total)


def istft_tensor(spec: torch.Tensor, cfg: StftConfig, length: int | None = None) -> torch.Tensor:
    """Inverse of :func:`stft_tensor`; ``spec`` is complex (..., F, T)."""
    if spec.shape[-2] != cfg.n_freqs:
        raise ShapeError(f"expected {cfg.n_freqs} frequency bins, got {spec.shape[-2]}")
    win, hop = cfg.win_length, cfg.hop_length
    n_frames = spec.shape[-1]
    real_dtype = spec.real.dtype
    w = cfg.window(real_dtype, spec.device)
    frames = torch.fft.irfft(spec.transpose(-1, -2), n=cfg.fft_size, dim=-1)[..., :win] * w
    signal = overlap_add(frames, cfg)
    env = overlap_add((w * w).expand(n_frames, win), cfg)
    signal = signal / torch.where(env > 1e-10, env, torch.ones_like(env))
    half = win // 2
    if length is None:
        length = (n_frames - 1) * hop
    return signal[..., half : half + length]


def stft(wave: MultiChannelWaveform, cfg: StftConfig) -> ComplexSpectrogram:
    if wave.sample_rate != cfg.sample_rate:
        raise ConfigurationError(
            f"waveform sampled at {wave.sample_rate} Hz but STFT configured for {cfg.sample_rate} Hz"
        )
    return ComplexSpectrogram(stft_tensor(wave.samples, cfg), wave.num_samples)


def istft(spec: ComplexSpectrogram, cfg: StftConfig, length: int | None = None) -> MultiChannelWaveform:
    length = length if length is not None else spec.num_samples
    return MultiChannelWaveform(istft_tensor(spec.values, cfg, length), cfg.sample_rate)


# -- learnable spectrum compression ---------------------------------------------------


@dataclass
class CompressionProfile:
    ratios: np.ndarray
    band_edges: np.ndarray

    def __post_init__(self):
        self.ratios = np.asarray(self.ratios, dtype=np.float64).reshape(-1)
        self.band_edges = np.asarray(self.band_edges, dtype=np.int64).reshape(-1)
        if len(self.band_edges) != len(self.ratios) + 1:
            raise ConfigurationError("need exactly one more band edge than ratios")
        if self.band_edges[0] != 0 or np.any(np.diff(self.band_edges) <= 0):
            raise ConfigurationError("band edges must start at 0 and increase strictly")
        if np.any(self.ratios <= 0) or np.any(self.ratios > 1):
            raise ConfigurationError(f"compression ratios must lie in (0, 1], got {self.ratios}")

    @classmethod
    def uniform(cls, n_freqs: int = 257, n_bands: int = 8, ratio: float = 0.5) -> "CompressionProfile":
        return cls(np.full(n_bands, ratio), band_edges(n_freqs, n_bands))

    @property
    def n_freqs(self) -> int:
        return int(self.band_edges[-1])

    def per_bin(self) -> np.ndarray:
        return np.repeat(self.ratios, np.diff(self.band_edges))


def band_edges(n_freqs: int, n_bands: int) -> np.ndarray:
    if not 1 <= n_bands <= n_freqs:
        raise ConfigurationError(f"cannot split {n_freqs} bins into {n_bands} bands")
    return np.round(np.linspace(0, n_freqs, n_bands + 1)).astype(np.int64)


def power_law(values: torch.Tensor, exponent: torch.Tensor) -> torch.Tensor:
    """Raise magnitudes of complex ``values`` to ``exponent`` keeping the phase; 0 maps to 0."""
    mag = values.abs()
    nonzero = mag > 0
    safe = torch.where(nonzero, mag, torch.ones_like(mag))
    scaled = values * (safe ** (exponent - 1))
    return torch.where(nonzero, scaled, torch.zeros_like(values))


def _exponents(spec: ComplexSpectrogram, profile: CompressionProfile) -> torch.Tensor:
    if profile.n_freqs != spec.values.shape[-2]:
        raise ConfigurationError(
            f"profile spans {profile.n_freqs} bins, spectrogram has {spec.values.shape[-2]}"
        )
    r = torch.as_tensor(profile.per_bin(), dtype=spec.values.real.dtype)
    return r.unsqueeze(-1)


def compress_spectrum(spec: ComplexSpectrogram, profile: CompressionProfile) -> ComplexSpectrogram:
    out = power_law(spec.values, _exponents(spec, profile))
    return ComplexSpectrogram(out, spec.num_samples)


def decompress_spectrum(spec: ComplexSpectrogram, profile: CompressionProfile) -> ComplexSpectrogram:
    out = power_law(spec.values, 1.0 / _exponents(spec, profile))
    return ComplexSpectrogram(out, spec.num_samples)


class LearnableSpectrumCompression(nn.Module):
    """Per-band trainable power-law compression; ratios stay in (0, 1) through a sigmoid."""

    def __init__(self, n_freqs: int = 257, n_bands: int = 8, init_ratio: float = 0.5):
        super().__init__()
        if not 0 < init_ratio < 1:
            raise ConfigurationError("init_ratio must lie strictly inside (0, 1)")
        self.register_buffer("bin_to_band", torch.as_tensor(
            np.repeat(np.arange(n_bands), np.diff(band_edges(n_freqs, n_bands)))), persistent=False)
        self.edges = band_edges(n_freqs, n_bands)
        self.logit = nn.Parameter(torch.full((n_bands,), math.log(init_ratio / (1 - init_ratio))))

    def ratios(self) -> torch.Tensor:
        return torch.sigmoid(self.logit)

    def profile(self) -> CompressionProfile:
        return CompressionProfile(self.ratios().detach().double().numpy(), self.edges)

    def _per_bin(self, dtype) -> torch.Tensor:
        return self.ratios()[self.bin_to_band].to(dtype).unsqueeze(-1)

    def compress(self, spec: torch.Tensor) -> torch.Tensor:
        return power_law(spec, self._per_bin(spec.real.dtype))

    def decompress(self, spec: torch.Tensor) -> torch.Tensor:
        return power_law(spec, 1.0 / self._per_bin(spec.real.dtype))


# -- WAV io -----------------------------------------------------------------------------

_SUBTYPES = {"int16": "PCM_16", "float32": "FLOAT"}


def read_wav(path: str | Path, expected_rate: int | None = 16000) -> MultiChannelWaveform:
    path = Path(path)
    try:
        data, rate = sf.read(str(path), dtype="float32", always_2d=True)
    except (RuntimeError, sf.LibsndfileError) as exc:
        raise ValueError(f"{path}: unreadable WAV file ({exc})") from exc
    if expected_rate is not None and rate != expected_rate:
        raise ConfigurationError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    if not 1 <= data.shape[1] <= 8:
        raise ConfigurationError(f"{path}: {data.shape[1]} channels, supported range is 1-8")
    return MultiChannelWaveform(torch.from_numpy(np.ascontiguousarray(data.T)), rate)


def write_wav(path: str | Path, wave: MultiChannelWaveform, subtype: str = "float32") -> Path:
    if subtype not in _SUBTYPES:
        raise ConfigurationError(f"unsupported WAV subtype {subtype!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = wave.samples.detach().cpu().double().numpy().T
    if subtype == "int16":
        data = np.clip(data, -1.0, 1.0 - 1.0 / 32768)
    sf.write(str(path), data, wave.sample_rate, subtype=_SUBTYPES[subtype])
    return path
