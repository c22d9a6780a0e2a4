import dataclasses

import numpy as np
import pytest
import torch

from conftest import param_fd_error
from spatial_dccrn.audio import ComplexSpectrogram, istft_tensor, stft_tensor
from spatial_dccrn.blocks import BlockConfig, ComplexConv2d, to_complex, to_stacked
from spatial_dccrn.config import NetworkConfig
from spatial_dccrn.errors import ConfigurationError, ShapeError
from spatial_dccrn.losses import LossConfig, combined_loss
from spatial_dccrn.model import (
    DCCRN, SpatialDCCRN, count_parameters, init_state, load_checkpoint, model_forward, save_checkpoint,
    state_shapes, stream_enhance, streaming_step,
)


def _mini(seed=0, **kw):
    torch.manual_seed(seed)
    return SpatialDCCRN(NetworkConfig.miniature(**kw)).double().eval()


def _noisy(rng, cfg, T, batch=1):
    shape = (batch, cfg.n_mics, cfg.n_freqs, T)
    return torch.from_numpy(rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def _zero_offsets(module):
    with torch.no_grad():
        for name, p in module.named_parameters():
            if "bias" in name or name.endswith("shift"):
                p.zero_()


def test_count_of_single_complex_conv():
    assert count_parameters(ComplexConv2d(BlockConfig(2, 4), bias=False)) == 16


def test_config_validation():
    with pytest.raises(ConfigurationError):
        NetworkConfig(sub_channels=[32, 64, 64, 64, 128])
    with pytest.raises(ConfigurationError):
        NetworkConfig(n_mics=3)  # 16 complex channels do not split into 3 groups
    cfg = NetworkConfig()
    assert cfg.encoder_freqs() == [257, 128, 63, 31, 15, 7, 3]
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg


def test_dccrn_preserves_shape_and_propagates_zero():
    cfg = NetworkConfig()
    torch.manual_seed(0)
    net = DCCRN(cfg, cfg.sub_channels, groups=4, angle_dim=129).double().eval()
    x = torch.randn(1, 64, 257, 50, dtype=torch.float64)
    angle = torch.randn(1, 50, 129, dtype=torch.float64)
    assert net(x, angle).shape == x.shape
    _zero_offsets(net)
    out = net(torch.zeros_like(x), torch.zeros_like(angle))
    assert torch.count_nonzero(out) == 0


def test_dccrn_rejects_misaligned_angle():
    cfg = NetworkConfig.miniature()
    net = DCCRN(cfg, cfg.sub_channels, groups=2, angle_dim=5).double()
    with pytest.raises(ShapeError):
        net(torch.zeros(1, 4, 33, 6, dtype=torch.float64), torch.zeros(1, 5, 5, dtype=torch.float64))


def test_sub_channel_encoder_keeps_groups_apart(rng):
    cfg = NetworkConfig.miniature(n_mics=2, sub_channels=[8] * 6, cfe_channels=4)
    net = DCCRN(cfg, cfg.sub_channels, groups=2, angle_dim=0).double().eval()
    x = to_complex(torch.from_numpy(rng.standard_normal((1, 8, 33, 7))))
    base = net.encode(to_stacked(x))
    zeroed = x.clone()
    zeroed[:, :2] = 0  # first group = complex channels 0..1
    probe = net.encode(to_stacked(zeroed))
    for a, b in zip(base, probe):
        ca, cb = to_complex(a), to_complex(b)
        half = ca.shape[1] // 2
        assert torch.equal(ca[:, half:], cb[:, half:])
        assert not torch.allclose(ca[:, :half], cb[:, :half])


def test_full_channel_dccrn_mixes_every_channel(rng):
    cfg = NetworkConfig.miniature()
    net = DCCRN(cfg, cfg.full_channels, groups=1, angle_dim=0).double().eval()
    x = torch.from_numpy(rng.standard_normal((1, 4, 33, 6)))
    base = net(x)
    y = x.clone()
    y[:, 0, :, 2] += 1.0
    delta = (net(y) - base).abs().amax(dim=(0, 2, 3))
    assert torch.all(delta > 0)


def test_model_output_shape_and_determinism(rng):
    model = _mini()
    noisy = _noisy(rng, model.cfg, 20)
    mapping, enhanced = model(noisy)
    assert enhanced.shape == (1, 1, 33, 20) and mapping.shape == (1, 33, 20)
    _, again = model(noisy)
    assert torch.equal(enhanced, again)
    spec = model_forward(ComplexSpectrogram(noisy[0]), model)[1]
    assert spec.shape == (1, 33, 20)


def test_channel_count_mismatch(rng):
    model = _mini()
    with pytest.raises(ConfigurationError):
        model(_noisy(rng, dataclasses.replace(model.cfg, n_mics=4, cfe_channels=4), 5))


@pytest.mark.parametrize("t", [0, 5, 17])
def test_causal_with_one_frame_lookahead(rng, t):
    model = _mini()
    noisy = _noisy(rng, model.cfg, 30)
    _, base = model(noisy)
    y = noisy.clone()
    y[..., t + 2 :] = _noisy(rng, model.cfg, 30 - t - 2)
    _, out = model(y)
    assert (out[..., : t + 1] - base[..., : t + 1]).abs().max() < 1e-6
    # the lookahead frame itself is allowed to matter
    y = noisy.clone()
    y[..., t + 1] *= 3
    assert (model(y)[1][..., t] - base[..., t]).abs().max() > 0


def test_streaming_matches_offline(rng):
    model = _mini()
    noisy = _noisy(rng, model.cfg, 40, batch=2)
    offline = model(noisy)[1]
    streamed = stream_enhance(model, noisy)
    assert streamed.shape == offline.shape
    assert (streamed - offline).abs().max() < 1e-10


def test_streaming_step_lags_by_lookahead(rng):
    model = _mini()
    noisy = _noisy(rng, model.cfg, 3)
    state = init_state(model)
    y0, state = streaming_step(noisy[..., 0], state, model)
    y1, state = streaming_step(noisy[..., 1], state, model)
    assert y0 is None and y1.shape == (1, 1, 33)


def test_state_reset_leaves_no_trace(rng):
    model = _mini()
    silence = torch.zeros(1, 2, 33, 12, dtype=torch.complex128)
    fresh = stream_enhance(model, silence)
    state = init_state(model)
    for t in range(15):
        streaming_step(_noisy(rng, model.cfg, 1)[..., 0], state, model)
    state.reset()
    frames = [streaming_step(silence[..., t], state, model)[0] for t in range(12)]
    after = torch.stack([f for f in frames if f is not None], dim=-1)
    assert torch.equal(after, fresh[..., :11])
    assert torch.allclose(fresh, model(silence)[1], atol=1e-12)


def test_initial_state_is_zero_and_shaped(rng):
    model = _mini()
    state = init_state(model, batch=3)
    shapes = state_shapes(state)
    assert (1, 3, model.cfg.lstm_nodes) in shapes
    for v in state.cache.values():
        for tensor in v if isinstance(v, tuple) else (v,):
            assert torch.count_nonzero(tensor) == 0
    for t in range(3):
        streaming_step(_noisy(rng, model.cfg, 1, batch=3)[..., 0], state, model)
        assert state_shapes(state) == shapes


def test_streaming_needs_causal_model(rng):
    model = _mini(causal=False)
    with pytest.raises(ConfigurationError):
        init_state(model)


def test_non_causal_variant_uses_future_context(rng):
    model = _mini(causal=False)
    assert model.sub.lstm.bidirectional
    noisy = _noisy(rng, model.cfg, 16)
    _, base = model(noisy)
    y = noisy.clone()
    y[..., 12:] *= 2
    assert (model(y)[1][..., :5] - base[..., :5]).abs().max() > 0


def test_ablation_flags_build_and_run(rng):
    for kw in (dict(use_afe=False), dict(use_mmf=False), dict(afe_in_full=False)):
        model = _mini(**kw)
        assert model(_noisy(rng, model.cfg, 6))[1].shape == (1, 1, 33, 6)
    assert not hasattr(_mini(use_mmf=False), "mask")


def _e2e_loss(model, noisy_wave, clean_wave):
    cfg = model.cfg.stft
    _, enhanced = model(stft_tensor(noisy_wave, cfg))
    est = istft_tensor(enhanced[:, 0], cfg, noisy_wave.shape[-1])
    loss, _ = combined_loss(est, clean_wave, stft_tensor(clean_wave, cfg), enhanced[:, 0], LossConfig())
    return loss


def test_every_parameter_receives_gradient(rng):
    model = _mini().train()
    clean = torch.from_numpy(rng.standard_normal((1, 7000)))
    noisy = clean.unsqueeze(1) + 0.5 * torch.from_numpy(rng.standard_normal((1, 2, 7000)))
    _e2e_loss(model, noisy, clean).backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or p.grad.abs().max() == 0]
    assert dead == []


def test_end_to_end_gradients_match_finite_differences(rng):
    model = _mini(seed=3).train()
    clean = torch.from_numpy(0.1 * rng.standard_normal((1, 7000)))
    noisy = clean.unsqueeze(1) + 0.05 * torch.from_numpy(rng.standard_normal((1, 2, 7000)))
    assert param_fd_error(model, lambda: _e2e_loss(model, noisy, clean)) < 1e-3


def test_checkpoint_round_trip(tmp_path, rng):
    model = _mini()
    noisy = _noisy(rng, model.cfg, 10)
    path = save_checkpoint(tmp_path / "m.safetensors", model, {"step": 3})
    loaded, extra = load_checkpoint(path)
    assert extra == {"step": 3}
    assert loaded.cfg == model.cfg
    assert torch.equal(loaded(noisy)[1], model(noisy)[1])


def test_checkpoint_version_is_checked(tmp_path):
    from safetensors.torch import save_file

    save_file({"x": torch.zeros(1)}, str(tmp_path / "bad.safetensors"), metadata={"format_version": "0"})
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path / "bad.safetensors")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.safetensors")
