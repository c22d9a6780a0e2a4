"""Spatial-DCCRN: multi-channel complex-domain speech enhancement."""
from .audio import (
    ComplexSpectrogram, CompressionProfile, MultiChannelWaveform, StftConfig, compress_spectrum,
    decompress_spectrum, istft, istft_tensor, stft, stft_tensor,
)
from .config import NetworkConfig
from .errors import ConfigurationError, DomainError, ShapeError
from .features import AfeConfig, AngleEmbedding, CosIpdFeature, afe_forward, cos_ipd
from .losses import (
    EvaluationReport, LossConfig, challenge_metric, combined_loss, estoi_score, phasen_loss, si_snr,
    stoi_loss, stoi_score,
)
from .mmf import FilterPair, MmfConfig, apply_mmf, estimate_masking_filter, rearrange_real_imag
from .model import (
    ModelState, SpatialDCCRN, count_parameters, init_state, load_checkpoint, model_forward,
    save_checkpoint, stream_enhance, streaming_step,
)
from .simulation import MixSpec, ScenePool, convolve_rir, make_training_chunk, mix_at_snr

__version__ = "0.1.0"
