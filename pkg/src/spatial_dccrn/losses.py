"""Training losses and evaluation metrics.

STOI and E-STOI follow the standard algorithm: resample to 10 kHz, drop frames
more than 40 dB below the loudest clean frame, 256-sample Hann frames with 50%
overlap, 15 one-third octave bands from 150 Hz, and 30-frame (384 ms) segments.
The same torch code path also provides the relaxed, differentiable STOI used as
a loss (no silent-frame removal, no clipping).
"""
from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy.signal import firwin

from .audio import power_law
from .errors import ConfigurationError, DomainError

STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30
STOI_BETA_DB = -15.0
STOI_DYN_RANGE = 40.0
_EPS = float(np.finfo(np.float64).eps)


@dataclass
class LossConfig:
    p: float = 0.3
    w_si_snr: float = 1.0
    w_stoi: float = 1.0
    w_phasen: float = 1.0
    epsilon: float = 1e-8

    def __post_init__(self):
        if not 0 < self.p <= 1:
            raise ConfigurationError(f"spectral compression factor must lie in (0, 1], got {self.p}")
        if min(self.w_si_snr, self.w_stoi, self.w_phasen) < 0:
            raise ConfigurationError("loss weights must be non-negative")

    @property
    def weights(self) -> tuple[float, float, float]:
        return self.w_si_snr, self.w_stoi, self.w_phasen


def _as_tensor(x) -> torch.Tensor:
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def si_snr(est, ref, eps: float = 1e-8, zero_mean: bool = True) -> torch.Tensor:
    """Scale-invariant SNR in dB over the last axis (one value per leading index).

    The guard ``eps`` is relative to the estimate's energy, so scaling ``est``
    leaves the value unchanged exactly and a perfect estimate reads
    ``-10 log10(eps)`` dB (80 dB by default).
    """
    est, ref = _as_tensor(est), _as_tensor(ref)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {tuple(est.shape)} vs {tuple(ref.shape)}")
    if zero_mean:
        est = est - est.mean(dim=-1, keepdim=True)
        ref = ref - ref.mean(dim=-1, keepdim=True)
    ref_energy = (ref * ref).sum(dim=-1, keepdim=True)
    if bool((ref_energy == 0).any()):
        raise DomainError("SI-SNR is undefined for an all-zero reference")
    target = (est * ref).sum(dim=-1, keepdim=True) / ref_energy * ref
    noise = est - target
    floor = eps * (est * est).sum(-1) + torch.finfo(est.dtype).tiny
    return 10 * torch.log10((target * target).sum(-1) / ((noise * noise).sum(-1) + floor))


def phasen_loss(S: torch.Tensor, S_hat: torch.Tensor, p: float = 0.3) -> torch.Tensor:
    """Power-law compressed amplitude term plus compressed complex term, averaged over bins."""
    if S.shape != S_hat.shape:
        raise ValueError(f"spectrogram shapes differ: {tuple(S.shape)} vs {tuple(S_hat.shape)}")
    cs, ch = power_law(S, p), power_law(S_hat, p)
    amp = (cs.abs() - ch.abs()) ** 2
    pha = (cs - ch).abs() ** 2
    return (amp + pha).mean()


def challenge_metric(stoi: float, wer: float) -> float:
    """(STOI + (1 - WER)) / 2."""
    if stoi < 0 or wer < 0:
        raise DomainError("STOI and WER must be non-negative")
    return (stoi + (1.0 - wer)) / 2.0


# -- STOI ------------------------------------------------------------------------------------


@functools.lru_cache(maxsize=None)
def third_octave_matrix(fs: int = STOI_FS, nfft: int = STOI_NFFT, num_bands: int = STOI_BANDS,
                        min_freq: float = STOI_MIN_FREQ) -> np.ndarray:
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(num_bands, dtype=np.float64)
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((num_bands, len(f)))
    for i in range(num_bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm


@functools.lru_cache(maxsize=None)
def _resample_taps(up: int, down: int) -> np.ndarray:
    half = 10 * max(up, down)
    return firwin(2 * half + 1, 1.0 / max(up, down), window=("kaiser", 5.0)) * up


def resample(x: torch.Tensor, orig: int, new: int) -> torch.Tensor:
    """Polyphase-equivalent rational resampling with a Kaiser-windowed FIR, over the last axis."""
    if orig == new:
        return x
    g = math.gcd(orig, new)
    up, down = new // g, orig // g
    h = torch.as_tensor(_resample_taps(up, down), dtype=x.dtype, device=x.device)
    half = (len(h) - 1) // 2
    lead, n = x.shape[:-1], x.shape[-1]
    flat = x.reshape(-1, 1, n)
    if up > 1:
        stuffed = flat.new_zeros(flat.shape[0], 1, n * up)
        stuffed[..., ::up] = flat
        flat = stuffed
    n_out = -(-n * up // down)
    y = torch.nn.functional.conv1d(flat, h.flip(0).view(1, 1, -1), padding=len(h) - 1)
    y = y[..., half : half + (n_out - 1) * down + 1 : down]
    return y.reshape(*lead, n_out)


def _hann(n: int, dtype, device) -> torch.Tensor:
    return torch.hann_window(n + 2, periodic=False, dtype=dtype, device=device)[1:-1]


def _frames(x: torch.Tensor, size: int, hop: int) -> torch.Tensor:
    n_frames = len(range(0, x.shape[-1] - size, hop))
    if n_frames <= 0:
        raise DomainError("signal shorter than one STOI frame")
    return x[..., : (n_frames - 1) * hop + size].unfold(-1, size, hop)


def _remove_silent_frames(x: torch.Tensor, y: torch.Tensor):
    w = _hann(STOI_FRAME, x.dtype, x.device)
    hop = STOI_FRAME // 2
    xf, yf = _frames(x, STOI_FRAME, hop) * w, _frames(y, STOI_FRAME, hop) * w
    energy = 20 * torch.log10(xf.norm(dim=-1) + _EPS)
    keep = energy > energy.max() - STOI_DYN_RANGE
    xf, yf = xf[keep], yf[keep]

    def ola(frames):
        n = frames.shape[0]
        out = frames.new_zeros((n - 1) * hop + STOI_FRAME)
        for i in range(n):
            out[i * hop : i * hop + STOI_FRAME] += frames[i]
        return out

    return ola(xf), ola(yf)


def _band_envelopes(x: torch.Tensor) -> torch.Tensor:
    w = _hann(STOI_FRAME, x.dtype, x.device)
    spec = torch.fft.rfft(_frames(x, STOI_FRAME, STOI_FRAME // 2) * w, n=STOI_NFFT)
    obm = torch.as_tensor(third_octave_matrix(), dtype=x.dtype, device=x.device)
    power = spec.real ** 2 + spec.imag ** 2
    return torch.sqrt(power @ obm.T + 1e-12).transpose(-1, -2)  # (..., bands, frames)


def _segments(tob: torch.Tensor) -> torch.Tensor:
    if tob.shape[-1] < STOI_SEGMENT:
        raise DomainError(f"need at least {STOI_SEGMENT} STOI frames after silence removal")
    return tob.unfold(-1, STOI_SEGMENT, 1).transpose(-2, -3)  # (..., M, bands, N)


def _stoi_torch(est: torch.Tensor, ref: torch.Tensor, sample_rate: int, *, vad: bool, clip: bool,
                extended: bool = False) -> torch.Tensor:
    if est.shape != ref.shape:
        raise ValueError("est and ref must have the same length")
    if sample_rate < 10000:
        raise DomainError("STOI needs a sample rate of at least 10 kHz")
    ref = resample(ref, sample_rate, STOI_FS)
    est = resample(est, sample_rate, STOI_FS)
    if vad:
        if ref.ndim != 1:
            raise ValueError("silent-frame removal runs on single signals")
        ref, est = _remove_silent_frames(ref, est)
    xs = _segments(_band_envelopes(ref))
    ys = _segments(_band_envelopes(est))
    eps = 1e-12
    if extended:
        def normalise(s):
            s = s - s.mean(-1, keepdim=True)
            s = s / torch.sqrt((s * s).sum(-1, keepdim=True) + eps)
            s = s - s.mean(-2, keepdim=True)
            return s / torch.sqrt((s * s).sum(-2, keepdim=True) + eps)

        xn, yn = normalise(xs), normalise(ys)
        return (xn * yn).sum(dim=(-1, -2)).mean(-1) / STOI_SEGMENT
    if clip:
        scale = xs.norm(dim=-1, keepdim=True) / (ys.norm(dim=-1, keepdim=True) + _EPS)
        ys = torch.minimum(ys * scale, xs * (1 + 10 ** (-STOI_BETA_DB / 20)))
    xs = xs - xs.mean(-1, keepdim=True)
    ys = ys - ys.mean(-1, keepdim=True)
    xs = xs / torch.sqrt((xs * xs).sum(-1, keepdim=True) + eps)
    ys = ys / torch.sqrt((ys * ys).sum(-1, keepdim=True) + eps)
    return (xs * ys).sum(-1).mean(dim=(-1, -2))


def stoi_score(est, ref, sample_rate: int = 16000, extended: bool = False) -> float:
    est = _as_tensor(est).double().reshape(-1)
    ref = _as_tensor(ref).double().reshape(-1)
    with torch.no_grad():
        return float(_stoi_torch(est, ref, sample_rate, vad=True, clip=not extended, extended=extended))


def estoi_score(est, ref, sample_rate: int = 16000) -> float:
    return stoi_score(est, ref, sample_rate, extended=True)


def stoi_loss(est: torch.Tensor, ref: torch.Tensor, sample_rate: int = 16000) -> torch.Tensor:
    """1 - relaxed STOI, averaged over leading dimensions."""
    return 1.0 - _stoi_torch(est, ref, sample_rate, vad=False, clip=False).mean()


# -- combined objective -------------------------------------------------------------------------


def combined_loss(est_wave: torch.Tensor, ref_wave: torch.Tensor, S: torch.Tensor, S_hat: torch.Tensor,
                  cfg: LossConfig | None = None, sample_rate: int = 16000):
    """Weighted sum of -SI-SNR, relaxed STOI loss and PHASEN loss.

    Returns ``(total, breakdown)``; terms with zero weight are not evaluated and
    are reported as ``None``.
    """
    cfg = cfg or LossConfig()
    w_sisnr, w_stoi, w_phasen = cfg.weights
    terms = {
        "si_snr": -si_snr(est_wave, ref_wave, cfg.epsilon).mean() if w_sisnr else None,
        "stoi": stoi_loss(est_wave, ref_wave, sample_rate) if w_stoi else None,
        "phasen": phasen_loss(S, S_hat, cfg.p) if w_phasen else None,
    }
    total = est_wave.new_zeros(())
    for w, name in zip(cfg.weights, ("si_snr", "stoi", "phasen")):
        if terms[name] is not None:
            total = total + w * terms[name]
    breakdown = {k: (None if v is None else float(v.detach())) for k, v in terms.items()}
    return total, breakdown


@dataclass
class EvaluationReport:
    path: str
    stoi: float
    e_stoi: float
    si_snr_db: float
    wer: float | None = None
    challenge_metric: float | None = None

    def __post_init__(self):
        if self.wer is not None and self.challenge_metric is None:
            self.challenge_metric = challenge_metric(self.stoi, self.wer)

    def to_dict(self) -> dict:
        return asdict(self)
