"""Synthetic multi-channel mixtures: reverberant speech plus spatial noise at a set SNR.

The challenge corpora are not available here, so the pool can be filled with
synthetic material: a glottal-pulse/formant speech surrogate, coloured and
babble-like noises, and exponentially decaying multi-channel impulse responses.
WAV files listed in a manifest can be used instead.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve, lfilter

from .errors import ConfigurationError, DomainError

MAX_SNR_DB = 60.0


@dataclass
class MixSpec:
    snr_low: float = 6.0
    snr_high: float = 16.0
    chunk_seconds: float = 8.0
    sample_rate: int = 16000
    n_mics: int = 4
    target: str = "reverberant"  # or "direct"
    reference_channel: int = 0

    def __post_init__(self):
        if self.snr_low > self.snr_high:
            raise ConfigurationError(f"snr range reversed: [{self.snr_low}, {self.snr_high}]")
        if self.snr_high > MAX_SNR_DB:
            raise ConfigurationError(f"SNR above {MAX_SNR_DB} dB is not supported")
        if self.chunk_seconds <= 0:
            raise ConfigurationError("chunk_seconds must be positive")
        if self.target not in ("reverberant", "direct"):
            raise ConfigurationError(f"unknown target definition {self.target!r}")

    @property
    def chunk_samples(self) -> int:
        return int(round(self.chunk_seconds * self.sample_rate))

    @classmethod
    def l3das(cls, **kw) -> "MixSpec":
        return cls(**{"snr_low": 6.0, "snr_high": 16.0, **kw})

    @classmethod
    def conferencing(cls, **kw) -> "MixSpec":
        return cls(**{"snr_low": -5.0, "snr_high": 25.0, **kw})


# -- synthetic sources -------------------------------------------------------------------------


def _resonator(freq: float, bw: float, fs: int):
    r = np.exp(-np.pi * bw / fs)
    theta = 2 * np.pi * freq / fs
    return [1 - r], [1, -2 * r * np.cos(theta), r * r]


_VOWELS = [(730, 1090, 2440), (270, 2290, 3010), (530, 1840, 2480), (570, 840, 2410),
           (300, 870, 2240), (660, 1720, 2410), (440, 1020, 2240), (490, 1350, 1690)]


def synth_speech(seconds: float, fs: int, rng: np.random.Generator) -> np.ndarray:
    """Voiced syllables with a wandering pitch, vowel formants and short pauses."""
    n = int(round(seconds * fs))
    out = np.zeros(n)
    base_f0 = rng.uniform(90, 220)
    pos = int(rng.uniform(0, 0.15) * fs)
    while pos < n:
        dur = int(rng.uniform(0.12, 0.32) * fs)
        seg_n = min(dur, n - pos)
        t = np.arange(seg_n) / fs
        f0 = base_f0 * (1 + 0.12 * np.sin(2 * np.pi * rng.uniform(1, 4) * t + rng.uniform(0, 2 * np.pi)))
        phase = np.cumsum(f0) / fs
        pulses = (np.diff(np.floor(phase), prepend=0) > 0).astype(float)
        src = lfilter([1.0], [1, -0.95], pulses) + 0.02 * rng.standard_normal(seg_n)
        seg = np.zeros(seg_n)
        for fr, bw in zip(_VOWELS[rng.integers(len(_VOWELS))], (80, 120, 160)):
            b, a = _resonator(fr * rng.uniform(0.9, 1.1), bw, fs)
            seg += lfilter(b, a, src)
        env = np.sin(np.pi * np.arange(seg_n) / max(seg_n, 2)) ** 1.5
        out[pos:pos + seg_n] += seg * env * rng.uniform(0.5, 1.0)
        pos += seg_n + int(rng.uniform(0.02, 0.2) * fs)
    return out / (np.sqrt(np.mean(out ** 2)) + 1e-12) * 0.05


NOISE_KINDS = ("white", "pink", "brown", "babble", "hum")


def synth_noise(kind: str, seconds: float, fs: int, rng: np.random.Generator) -> np.ndarray:
    n = int(round(seconds * fs))
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind in ("pink", "brown"):
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.fft.rfftfreq(n, 1 / fs)
        f[0] = f[1]
        spec /= f ** (0.5 if kind == "pink" else 1.0)
        x = np.fft.irfft(spec, n)
    elif kind == "babble":
        x = sum(synth_speech(seconds, fs, rng) for _ in range(4))
    elif kind == "hum":
        t = np.arange(n) / fs
        f = rng.uniform(50, 300)
        x = sum(np.sin(2 * np.pi * k * f * t + rng.uniform(0, 2 * np.pi)) / k for k in range(1, 8))
        x = x + 0.1 * rng.standard_normal(n)
    else:
        raise ConfigurationError(f"unknown noise kind {kind!r}; choose from {NOISE_KINDS}")
    return x / (np.sqrt(np.mean(x ** 2)) + 1e-12) * 0.05


def synth_rir(n_mics: int, fs: int, rng: np.random.Generator, t60: float | None = None,
              max_delay: int = 8, length_s: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
    """(reverberant, direct-path) impulse responses, each (P, L).

    Each channel gets a fractional-free direct impulse at its own delay and an
    exponentially decaying noise tail with the requested T60.
    """
    t60 = rng.uniform(0.2, 0.6) if t60 is None else t60
    length = int(length_s * fs)
    base = int(rng.integers(0, max_delay + 1))
    delays = np.clip(base + rng.integers(-max_delay // 2, max_delay // 2 + 1, n_mics), 0, None)
    onset = int(0.003 * fs)
    decay = np.exp(-6.9078 * np.arange(length) / (t60 * fs))
    rir = np.zeros((n_mics, length))
    direct = np.zeros((n_mics, length))
    for p, d in enumerate(delays):
        direct[p, d] = 1.0
        tail = rng.standard_normal(length) * decay * 0.3
        tail[: d + onset] = 0.0
        rir[p] = tail
        rir[p, d] += 1.0
    return rir, direct


# -- mixing ------------------------------------------------------------------------------------


def convolve_rir(clean: np.ndarray, rir: np.ndarray) -> np.ndarray:
    """Channel p = clean * rir[p], truncated to the clean length."""
    clean = np.asarray(clean, dtype=np.float64).reshape(-1)
    rir = np.atleast_2d(np.asarray(rir, dtype=np.float64))
    if rir.shape[1] < 1:
        raise ConfigurationError("impulse response needs at least one tap")
    return fftconvolve(clean[None, :], rir, axes=-1)[:, : len(clean)]


def fit_length(x: np.ndarray, n: int) -> np.ndarray:
    """Loop or trim the last axis to ``n`` samples."""
    if x.shape[-1] >= n:
        return x[..., :n]
    reps = -(-n // x.shape[-1])
    return np.concatenate([x] * reps, axis=-1)[..., :n]


def mix_at_snr(speech_mc: np.ndarray, noise_mc: np.ndarray, snr_db: float, reference_channel: int = 0):
    """Scale noise so the reference-channel SNR equals ``snr_db``; returns (noisy, gain)."""
    speech_mc = np.atleast_2d(np.asarray(speech_mc, dtype=np.float64))
    noise_mc = np.atleast_2d(np.asarray(noise_mc, dtype=np.float64))
    if snr_db > MAX_SNR_DB:
        raise DomainError(f"SNR {snr_db} dB exceeds the {MAX_SNR_DB} dB cap")
    if noise_mc.shape[0] == 1 and speech_mc.shape[0] > 1:
        noise_mc = np.repeat(noise_mc, speech_mc.shape[0], axis=0)
    noise_mc = fit_length(noise_mc, speech_mc.shape[1])
    p_speech = np.mean(speech_mc[reference_channel] ** 2)
    p_noise = np.mean(noise_mc[reference_channel] ** 2)
    if p_speech == 0:
        raise DomainError("speech has zero power on the reference channel")
    if p_noise == 0:
        raise DomainError("noise has zero power on the reference channel")
    gain = np.sqrt(p_speech / (p_noise * 10 ** (snr_db / 10)))
    return speech_mc + gain * noise_mc, gain


def measured_snr(speech: np.ndarray, noise: np.ndarray) -> float:
    return 10 * np.log10(np.mean(speech ** 2) / np.mean(noise ** 2))


# -- scene pool and chunks ---------------------------------------------------------------------


@dataclass
class ScenePool:
    clean: list[np.ndarray]
    noise: list[np.ndarray]
    rirs: list[np.ndarray]
    direct_rirs: list[np.ndarray] | None = None

    def __post_init__(self):
        if not self.clean or not self.noise or not self.rirs:
            raise ConfigurationError("scene pool needs clean, noise and RIR entries")
        n_mics = {r.shape[0] for r in self.rirs}
        if len(n_mics) != 1:
            raise ConfigurationError(f"RIRs disagree on channel count: {sorted(n_mics)}")
        if self.direct_rirs is None:
            self.direct_rirs = [direct_path(r) for r in self.rirs]

    @property
    def n_mics(self) -> int:
        return self.rirs[0].shape[0]

    @classmethod
    def synthetic(cls, n_clean: int = 16, n_noise: int = 8, n_rir: int = 8, n_mics: int = 4,
                  seconds: float = 4.0, fs: int = 16000, seed: int = 0) -> "ScenePool":
        rng = np.random.default_rng(seed)
        clean = [synth_speech(seconds, fs, rng) for _ in range(n_clean)]
        noise = [synth_noise(NOISE_KINDS[i % len(NOISE_KINDS)], seconds, fs, rng) for i in range(n_noise)]
        pairs = [synth_rir(n_mics, fs, rng) for _ in range(n_rir)]
        return cls(clean, noise, [p[0] for p in pairs], [p[1] for p in pairs])

    @classmethod
    def from_manifest(cls, path: str | Path, sample_rate: int = 16000) -> "ScenePool":
        from .audio import read_wav

        entries = read_manifest(path)
        groups = {"clean": [], "noise": [], "rir": []}
        for e in entries:
            if e.get("kind") not in groups:
                raise ConfigurationError(f"{path}: manifest entry without a valid kind: {e}")
            wave = read_wav(e["path"], sample_rate).samples.double().numpy()
            groups[e["kind"]].append(wave[0] if e["kind"] == "clean" else wave)
        noise = [n[0] if n.shape[0] == 1 else n for n in groups["noise"]]
        return cls(groups["clean"], noise, groups["rir"])


def direct_path(rir: np.ndarray) -> np.ndarray:
    """Keep only the strongest tap of each channel."""
    out = np.zeros_like(rir)
    idx = np.argmax(np.abs(rir), axis=1)
    out[np.arange(rir.shape[0]), idx] = rir[np.arange(rir.shape[0]), idx]
    return out


@dataclass
class Chunk:
    noisy: np.ndarray  # (P, L)
    target: np.ndarray  # (L,)
    speech: np.ndarray  # (P, L) reverberant speech image
    noise: np.ndarray  # (P, L) scaled noise image
    snr_db: float
    seed: int


def make_training_chunk(pool: ScenePool, spec: MixSpec, seed: int) -> Chunk:
    """Deterministic given ``seed``: uniform draws of clean, noise, RIRs and SNR."""
    if pool.n_mics != spec.n_mics:
        raise ConfigurationError(f"pool has {pool.n_mics} mics, spec asks for {spec.n_mics}")
    rng = np.random.default_rng(seed)
    L = spec.chunk_samples
    clean = pool.clean[rng.integers(len(pool.clean))]
    noise = pool.noise[rng.integers(len(pool.noise))]
    i_speech, i_noise = rng.integers(len(pool.rirs), size=2)
    snr = float(rng.uniform(spec.snr_low, spec.snr_high))
    start = int(rng.integers(0, max(len(clean) - L, 0) + 1))
    clean = fit_length(clean[start:start + L], L) if len(clean) >= L else np.pad(clean, (0, L - len(clean)))
    speech = convolve_rir(clean, pool.rirs[i_speech])
    if noise.ndim == 1:
        noise_start = int(rng.integers(0, len(noise)))
        noise_mc = convolve_rir(fit_length(np.roll(noise, -noise_start), L), pool.rirs[i_noise])
    else:
        noise_mc = fit_length(noise, L)
    ref = spec.reference_channel
    if np.mean(speech[ref] ** 2) == 0:
        raise DomainError(f"chunk seed {seed}: drew a silent speech segment")
    noisy, gain = mix_at_snr(speech, noise_mc, snr, ref)
    if spec.target == "direct":
        target = convolve_rir(clean, pool.direct_rirs[i_speech])[ref]
    else:
        target = speech[ref]
    return Chunk(noisy, target, speech, gain * noise_mc, snr, seed)


# -- manifests ---------------------------------------------------------------------------------


def read_manifest(path: str | Path) -> list[dict]:
    """JSON-lines manifest; blank lines and lines starting with '#' are skipped."""
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            entries.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}:{lineno}: malformed manifest line ({exc.msg})") from exc
    return entries


def write_manifest(path: str | Path, entries: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(e) + "\n" for e in entries))
    return path
