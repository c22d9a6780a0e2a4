import json

import numpy as np
import pytest
import torch
import yaml

from spatial_dccrn.audio import MultiChannelWaveform, read_wav, write_wav
from spatial_dccrn.cli import main
from spatial_dccrn.config import NetworkConfig
from spatial_dccrn.errors import ConfigurationError
from spatial_dccrn.inference import enhance, enhance_waveform, evaluate
from spatial_dccrn.losses import LossConfig
from spatial_dccrn.model import SpatialDCCRN, save_checkpoint
from spatial_dccrn.simulation import MixSpec, ScenePool, write_manifest
from spatial_dccrn.train import PoolConfig, RunConfig, TrainConfig, _make_scheduler, train


def _mini_run(**train_kw):
    kw = dict(epochs=2, steps_per_epoch=2, batch_size=1, valid_size=1, dtype="float64")
    kw.update(train_kw)
    return RunConfig(NetworkConfig.miniature(), TrainConfig(**kw),
                     MixSpec(n_mics=2, chunk_seconds=0.5), PoolConfig(n_clean=2, n_noise=2, n_rir=2, seconds=1.0))


@pytest.fixture(scope="module")
def mini_pool():
    return ScenePool.synthetic(2, 2, 2, n_mics=2, seconds=1.0, seed=1234)


@pytest.fixture(scope="module")
def mini_ckpt(tmp_path_factory):
    torch.manual_seed(0)
    model = SpatialDCCRN(NetworkConfig.miniature()).double()
    return save_checkpoint(tmp_path_factory.mktemp("ckpt") / "mini.safetensors", model)


@pytest.fixture(scope="module")
def wav_set(tmp_path_factory, mini_pool):
    from spatial_dccrn.simulation import make_training_chunk

    out = tmp_path_factory.mktemp("wavs")
    entries = []
    for i in range(3):
        c = make_training_chunk(mini_pool, MixSpec(n_mics=2, chunk_seconds=0.6), 100 + i)
        noisy = write_wav(out / f"u{i}_noisy.wav", MultiChannelWaveform(torch.from_numpy(c.noisy).float(), 16000))
        clean = write_wav(out / f"u{i}_clean.wav", MultiChannelWaveform(torch.from_numpy(c.target).float(), 16000))
        entries.append({"id": f"u{i}", "noisy": str(noisy), "clean": str(clean)})
    return out, write_manifest(out / "manifest.jsonl", entries), entries


# -- learning-rate schedule and training loop ----------------------------------------------


def test_lr_halves_twice_after_two_flat_validations():
    p = torch.nn.Parameter(torch.zeros(1))
    cfg = TrainConfig(patience=1)
    opt = torch.optim.Adam([p], lr=cfg.initial_lr)
    sched = _make_scheduler(opt, cfg)
    for loss in (1.0, 1.0, 1.0):
        sched.step(loss)
    assert opt.param_groups[0]["lr"] == pytest.approx(0.00025, abs=1e-15)


def test_lr_kept_while_improving():
    p = torch.nn.Parameter(torch.zeros(1))
    opt = torch.optim.Adam([p], lr=1e-3)
    sched = _make_scheduler(opt, TrainConfig(patience=2))
    for loss in (3.0, 2.0, 2.5, 1.0, 1.1, 1.2):
        sched.step(loss)
    assert opt.param_groups[0]["lr"] == pytest.approx(5e-4)


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(initial_lr=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(patience=0)


def test_training_writes_artifacts_and_is_deterministic(tmp_path, mini_pool):
    a = train(_mini_run(), tmp_path / "a", pool=mini_pool)
    b = train(_mini_run(), tmp_path / "b", pool=mini_pool)
    assert a.checkpoint.exists() and a.best_checkpoint.exists() and a.config_snapshot.exists()
    assert (tmp_path / "a" / "training_curves.png").exists()
    assert a.metric_log.read_text() == b.metric_log.read_text()
    rows = [json.loads(line) for line in a.metric_log.read_text().splitlines()]
    assert [r["step"] for r in rows] == [2, 4]
    snapshot = yaml.safe_load(a.config_snapshot.read_text())
    assert snapshot["train"]["grad_clip"] == 5.0 and snapshot["train"]["optimizer"] == "adam"


def test_resume_matches_uninterrupted_run(tmp_path, mini_pool):
    full = train(_mini_run(epochs=3), tmp_path / "full", pool=mini_pool).history
    train(_mini_run(epochs=1), tmp_path / "split", pool=mini_pool)
    resumed = train(_mini_run(epochs=3), tmp_path / "split", resume=True, pool=mini_pool).history
    assert len(resumed) == 3
    for key in ("train_loss", "valid_loss", "lr"):
        for e in (1, 2):
            assert abs(full[e][key] - resumed[e][key]) < 1e-6


def test_non_finite_loss_names_the_chunk_seeds(tmp_path):
    pool = ScenePool.synthetic(2, 2, 2, n_mics=2, seconds=1.0, seed=3)
    pool.clean = [np.full_like(c, np.nan) for c in pool.clean]
    with pytest.raises(FloatingPointError, match="chunk seeds"):
        train(_mini_run(epochs=1), tmp_path, pool=pool)


@pytest.mark.parametrize("weights", [(1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 0), (1, 0, 1), (0, 1, 1), (1, 1, 1)])
def test_loss_ablation_subsets_train(tmp_path, mini_pool, weights):
    loss = LossConfig(w_si_snr=weights[0], w_stoi=weights[1], w_phasen=weights[2])
    hist = train(_mini_run(epochs=1, loss=loss), tmp_path, pool=mini_pool).history
    row = hist[0]
    for w, k in zip(weights, ("si_snr", "stoi", "phasen")):
        assert (f"valid_{k}" in row) == bool(w)
    recomposed = sum(w * row[f"valid_{k}"] for w, k in zip(weights, ("si_snr", "stoi", "phasen")) if w)
    assert abs(recomposed - row["valid_loss"]) < 1e-7


def test_mix_and_network_must_agree(tmp_path):
    run = _mini_run()
    run.mix = MixSpec(n_mics=4, chunk_seconds=0.5)
    with pytest.raises(ConfigurationError):
        train(run, tmp_path)


# -- enhancement ------------------------------------------------------------------------------


def test_enhance_keeps_duration_and_writes_mono(tmp_path, mini_ckpt, wav_set):
    src = wav_set[2][0]["noisy"]
    [out] = enhance(mini_ckpt, src, tmp_path / "e.wav")
    wave, ref = read_wav(out), read_wav(src)
    assert wave.num_channels == 1 and wave.sample_rate == 16000
    assert abs(wave.samples.shape[-1] - ref.samples.shape[-1]) <= 16  # one hop of the miniature STFT


def test_enhance_directory(tmp_path, mini_ckpt, wav_set):
    noisy_dir = tmp_path / "in"
    noisy_dir.mkdir()
    for e in wav_set[2]:
        (noisy_dir / f"{e['id']}.wav").write_bytes(open(e["noisy"], "rb").read())
    written = enhance(mini_ckpt, noisy_dir, tmp_path / "out", plot=True)
    assert sorted(p.name for p in written) == ["u0.wav", "u1.wav", "u2.wav"]
    assert all(p.with_suffix(".png").exists() for p in written)


def test_streaming_matches_offline_enhancement(mini_ckpt, wav_set):
    from spatial_dccrn.model import load_checkpoint

    model, _ = load_checkpoint(mini_ckpt)
    x = read_wav(wav_set[2][0]["noisy"]).samples.double()
    offline = enhance_waveform(model, x)
    streamed = enhance_waveform(model, x, streaming=True)
    assert float(torch.sqrt(torch.mean((offline - streamed) ** 2))) < 1e-4


def test_enhance_rejects_channel_mismatch(tmp_path, mini_ckpt):
    path = write_wav(tmp_path / "four.wav", MultiChannelWaveform(torch.zeros(4, 4000), 16000))
    with pytest.raises(ConfigurationError, match="four.wav"):
        enhance(mini_ckpt, path, tmp_path / "o.wav")


def test_enhance_rejects_unreadable_file(tmp_path, mini_ckpt):
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"not a wav")
    with pytest.raises(ValueError, match="bad.wav"):
        enhance(mini_ckpt, bad, tmp_path / "o.wav")


# -- evaluation -------------------------------------------------------------------------------


def test_references_against_themselves(tmp_path, wav_set):
    _, _, entries = wav_set
    manifest = write_manifest(tmp_path / "self.jsonl",
                              [{"id": e["id"], "noisy": e["clean"], "clean": e["clean"]} for e in entries])
    table = evaluate(None, manifest, out_dir=tmp_path / "rep")
    assert len(table.rows) == 3
    for row in table.rows:
        assert row.stoi == pytest.approx(1.0, abs=1e-3)
        assert row.si_snr_db >= 80.0 - 1e-9
    assert (tmp_path / "rep" / "metrics.png").exists()


def test_report_rows_and_means(tmp_path, mini_ckpt, wav_set):
    _, manifest, entries = wav_set
    wer = tmp_path / "wer.txt"
    wer.write_text("".join(f"{e['id']} {0.1 * (i + 1)}\n" for i, e in enumerate(entries)))
    table = evaluate(mini_ckpt, manifest, wer, out_dir=tmp_path / "rep", plot=False)
    assert len(table.rows) == len(entries)
    mean = table.mean()
    for key in ("stoi", "e_stoi", "si_snr_db", "wer", "challenge_metric"):
        assert abs(mean[key] - float(np.mean([getattr(r, key) for r in table.rows]))) < 1e-9
    assert mean["wer"] == pytest.approx(0.2)
    lines = (tmp_path / "rep" / "report.tsv").read_text().splitlines()
    assert len(lines) == 1 + len(entries) + 1 and lines[-1].startswith("MEAN")
    again = evaluate(mini_ckpt, manifest, wer)
    assert [r.to_dict() for r in again.rows] == [r.to_dict() for r in table.rows]


def test_challenge_metric_only_with_wer(wav_set):
    table = evaluate(None, wav_set[1])
    assert all(r.challenge_metric is None for r in table.rows)


def test_missing_wer_entry(tmp_path, wav_set):
    wer = tmp_path / "wer.txt"
    wer.write_text("u0 0.1\n")
    with pytest.raises(ConfigurationError, match="u1"):
        evaluate(None, wav_set[1], wer)


# -- command line -----------------------------------------------------------------------------


def test_cli_train_enhance_evaluate(tmp_path, wav_set, capsys):
    cfg = tmp_path / "run.yaml"
    run = _mini_run(epochs=1).to_dict()
    run["network"] = {"preset": "miniature"}
    cfg.write_text(yaml.safe_dump(run))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    out = capsys.readouterr().out
    assert "final_valid_loss" in out
    ckpt = tmp_path / "run" / "best.safetensors"
    assert main(["enhance", "--ckpt", str(ckpt), "--in", wav_set[2][0]["noisy"], "--out",
                 str(tmp_path / "e.wav"), "--streaming"]) == 0
    assert (tmp_path / "e.wav").exists()
    capsys.readouterr()
    assert main(["evaluate", "--ckpt", str(ckpt), "--manifest", str(wav_set[1]), "--no-plot"]) == 0
    table = capsys.readouterr().out.strip().splitlines()
    assert table[0].split("\t")[:4] == ["path", "stoi", "e_stoi", "si_snr_db"]
    assert len(table) == 1 + 3 + 1 and table[-1].startswith("MEAN")


def test_cli_simulate(tmp_path, capsys):
    assert main(["simulate", "--out", str(tmp_path), "--count", "2", "--seconds", "0.5", "--mics", "2"]) == 0
    lines = (tmp_path / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 2
    assert read_wav(json.loads(lines[0])["noisy"]).num_channels == 2


@pytest.mark.parametrize("argv", [
    ["enhance", "--ckpt", "/nonexistent.safetensors", "--in", "x.wav", "--out", "y.wav"],
    ["train", "--config", "/nonexistent.yaml"],
])
def test_cli_errors_exit_nonzero(argv, capsys):
    assert main(argv) == 2
    assert "error:" in capsys.readouterr().err


def test_cli_rejects_bad_config(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("train:\n  initial_lr: -1\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "initial_lr" in capsys.readouterr().err
