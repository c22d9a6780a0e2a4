"""Network hyperparameters and (de)serialisation of the nested config dataclasses."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .audio import StftConfig
from .errors import ConfigurationError
from .features import AfeConfig
from .mmf import MmfConfig


@dataclass
class NetworkConfig:
    n_mics: int = 4
    # channel counts follow the DCCRN convention: real + imaginary planes
    sub_channels: list[int] = field(default_factory=lambda: [32, 64, 64, 64, 128, 128])
    full_channels: list[int] = field(default_factory=lambda: [64, 64, 64, 64, 128, 128])
    kernel: tuple[int, int] = (5, 2)  # (freq, time)
    stride: tuple[int, int] = (2, 1)
    freq_padding: int = 1
    lstm_nodes: int = 256
    fc_dim: int = 256
    cfe_channels: int = 32  # complex channels out of the feature encoder
    cfe_depth: int = 5
    cfe_kernel: tuple[int, int] = (3, 2)
    dense_kernel: tuple[int, int] = (1, 2)
    causal: bool = True
    use_afe: bool = True
    afe_in_full: bool = True
    use_mmf: bool = True
    lsc_bands: int = 8
    lsc_init: float = 0.5
    afe: AfeConfig = field(default_factory=AfeConfig)
    mmf: MmfConfig = field(default_factory=MmfConfig)
    stft: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        self.kernel, self.stride = tuple(self.kernel), tuple(self.stride)
        self.cfe_kernel, self.dense_kernel = tuple(self.cfe_kernel), tuple(self.dense_kernel)
        if isinstance(self.afe, dict):
            self.afe = AfeConfig(**self.afe)
        if isinstance(self.mmf, dict):
            self.mmf = MmfConfig(**self.mmf)
        if isinstance(self.stft, dict):
            self.stft = StftConfig(**self.stft)
        if self.n_mics < 2:
            raise ConfigurationError("need at least two microphones")
        for name in ("sub_channels", "full_channels"):
            chs = getattr(self, name)
            if len(chs) != 6 or min(chs) < 2 or any(c % 2 for c in chs):
                raise ConfigurationError(f"{name} must list six positive even plane counts, got {chs}")
        if self.stride[1] != 1 or self.kernel[1] < 1:
            raise ConfigurationError("time stride must be 1")
        groups = self.n_mics
        for c in [self.cfe_channels] + [c // 2 for c in self.sub_channels]:
            if c % groups:
                raise ConfigurationError(
                    f"sub-channel widths must divide into {groups} microphone groups (got {c} complex channels)"
                )
        if self.mmf.reference_channel >= self.n_mics:
            raise ConfigurationError("reference channel out of range")
        if self.lstm_nodes < 1 or self.fc_dim < 1:
            raise ConfigurationError("recurrent sizes must be positive")

    @property
    def n_freqs(self) -> int:
        return self.stft.n_freqs

    @property
    def time_kernel(self) -> int:
        """Encoder/decoder time kernel: current + previous frame, plus one future frame when non-causal."""
        return self.kernel[1] if self.causal else self.kernel[1] + 1

    def encoder_freqs(self) -> list[int]:
        sizes = [self.n_freqs]
        kf, sf = self.kernel[0], self.stride[0]
        for _ in range(6):
            nxt = (sizes[-1] + 2 * self.freq_padding - kf) // sf + 1
            if nxt < 1:
                raise ConfigurationError(f"frequency axis collapses below one bin: {sizes}")
            sizes.append(nxt)
        return sizes

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)

    @classmethod
    def miniature(cls, **overrides) -> "NetworkConfig":
        """Tiny network for gradient checks: F = 33, four planes per layer, two mics."""
        kw = dict(
            n_mics=2, sub_channels=[4] * 6, full_channels=[4] * 6, freq_padding=2,
            lstm_nodes=8, fc_dim=8, cfe_channels=2, cfe_depth=2, lsc_bands=2,
            afe=AfeConfig(hidden_channels=2, dense_depth=2),
            mmf=MmfConfig(conv1_channels=2),
            stft=StftConfig(window_ms=4.0, hop_ms=1.0, fft_size=64),
        )
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def desk(cls, **overrides) -> "NetworkConfig":
        """Reduced-width network that trains on one CPU core in minutes."""
        kw = dict(
            sub_channels=[16, 32, 32, 32, 64, 64], full_channels=[32, 32, 32, 32, 64, 64],
            lstm_nodes=128, fc_dim=128, cfe_channels=16, cfe_depth=2,
            afe=AfeConfig(hidden_channels=8, dense_depth=2),
        )
        kw.update(overrides)
        return cls(**kw)
