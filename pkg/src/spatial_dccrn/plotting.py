"""Figures written next to the training log and evaluation report."""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402


def _figure(width: float = 8, height: float | None = None, nrows: int = 1, ncols: int = 1):
    golden = (math.sqrt(5) - 1.0) / 2.0
    height = height or width * golden
    fig, axes = plt.subplots(nrows, ncols, figsize=(width, height), facecolor="w", squeeze=False)
    return fig, axes


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training_curves(history: list[dict], path: str | Path) -> Path | None:
    """Loss per epoch (train vs. validation), learning rate and validation SI-SNR gain."""
    if not history:
        return None
    epochs = [h["epoch"] for h in history]
    fig, axes = _figure(10, 4, ncols=2)
    ax = axes[0, 0]
    ax.plot(epochs, [h.get("train_loss") for h in history], "o-", label="train")
    ax.plot(epochs, [h.get("valid_loss") for h in history], "s-", label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("combined loss")
    ax.legend(frameon=False)
    lr_ax = ax.twinx()
    lr_ax.step(epochs, [h["lr"] for h in history], "k:", where="post", alpha=0.6)
    lr_ax.set_yscale("log")
    lr_ax.set_ylabel("learning rate")
    ax = axes[0, 1]
    ax.plot(epochs, [h.get("valid_si_snr_improvement") for h in history], "o-", color="C2")
    ax.axhline(0, color="0.6", lw=0.8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation SI-SNR gain (dB)")
    return _save(fig, path)


def plot_evaluation(table, path: str | Path) -> Path:
    rows = table.rows
    idx = np.arange(len(rows))
    fig, axes = _figure(max(6, 0.4 * len(rows) + 4), 4, ncols=2)
    ax = axes[0, 0]
    ax.bar(idx - 0.2, [r.stoi for r in rows], 0.4, label="STOI")
    ax.bar(idx + 0.2, [r.e_stoi for r in rows], 0.4, label="E-STOI")
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("utterance")
    ax.legend(frameon=False, loc="lower right")
    ax = axes[0, 1]
    ax.bar(idx, [r.si_snr_db for r in rows], color="C2")
    ax.set_xlabel("utterance")
    ax.set_ylabel("SI-SNR (dB)")
    mean = table.mean()
    fig.suptitle(f"mean STOI {mean['stoi']:.3f}  E-STOI {mean['e_stoi']:.3f}  SI-SNR {mean['si_snr_db']:.2f} dB")
    return _save(fig, path)


def plot_enhancement(noisy: torch.Tensor, enhanced: torch.Tensor, stft_cfg, path: str | Path) -> Path:
    """Log-magnitude spectrograms of the noisy reference channel and the enhanced output."""
    from .audio import stft_tensor

    fig, axes = _figure(10, 4, ncols=2)
    hop_s = stft_cfg.hop_length / stft_cfg.sample_rate
    for ax, x, title in zip(axes[0], (noisy, enhanced), ("noisy (reference mic)", "enhanced")):
        spec = stft_tensor(x.double(), stft_cfg).abs().numpy()
        db = 20 * np.log10(spec + 1e-8)
        extent = (0, spec.shape[1] * hop_s, 0, stft_cfg.sample_rate / 2000)
        ax.imshow(db, origin="lower", aspect="auto", extent=extent, vmin=db.max() - 80, vmax=db.max(),
                  cmap="magma")
        ax.set_title(title)
        ax.set_xlabel("time (s)")
        ax.set_ylabel("frequency (kHz)")
    return _save(fig, path)
