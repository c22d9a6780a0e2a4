"""Training loop with on-the-fly mixtures, plateau LR halving and resumable checkpoints."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from .audio import istft_tensor, stft_tensor
from .config import NetworkConfig
from .errors import ConfigurationError
from .losses import LossConfig, combined_loss, si_snr
from .model import SpatialDCCRN, load_checkpoint, save_checkpoint
from .simulation import MixSpec, ScenePool, make_training_chunk

log = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class PoolConfig:
    n_clean: int = 16
    n_noise: int = 8
    n_rir: int = 8
    seconds: float = 4.0
    seed: int = 1234
    manifest: str | None = None

    def build(self, n_mics: int, fs: int) -> ScenePool:
        if self.manifest:
            return ScenePool.from_manifest(self.manifest, fs)
        return ScenePool.synthetic(self.n_clean, self.n_noise, self.n_rir, n_mics, self.seconds, fs, self.seed)


@dataclass
class TrainConfig:
    initial_lr: float = 1e-3
    patience: int = 1
    epochs: int = 40
    steps_per_epoch: int = 100
    batch_size: int = 4
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: str = "adam"
    grad_clip: float = 5.0
    valid_size: int = 8
    fixed_chunks: int | None = None  # overfit mode: train and validate on these chunk seeds only
    max_steps: int | None = None
    max_seconds: float | None = None
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.initial_lr <= 0:
            raise ConfigurationError("initial_lr must be positive")
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.dtype not in _DTYPES:
            raise ConfigurationError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.batch_size < 1 or self.steps_per_epoch < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size, steps_per_epoch and epochs must be >= 1")


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mix: MixSpec = field(default_factory=MixSpec)
    pool: PoolConfig = field(default_factory=PoolConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        preset = (d.get("network") or {}).pop("preset", None)
        net = d.get("network") or {}
        if preset == "desk":
            network = NetworkConfig.desk(**net)
        elif preset == "miniature":
            network = NetworkConfig.miniature(**net)
        elif preset in (None, "full"):
            network = NetworkConfig(**net)
        else:
            raise ConfigurationError(f"unknown network preset {preset!r}")
        return cls(network, TrainConfig(**(d.get("train") or {})), MixSpec(**(d.get("mix") or {})),
                   PoolConfig(**(d.get("pool") or {})))

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: invalid YAML ({exc})") from exc
        try:
            return cls.from_dict(data)
        except TypeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc

    def to_dict(self) -> dict:
        return {"network": self.network.to_dict(), "train": asdict(self.train),
                "mix": asdict(self.mix), "pool": asdict(self.pool)}


@dataclass
class RunArtifacts:
    checkpoint: Path
    best_checkpoint: Path
    metric_log: Path
    config_snapshot: Path
    history: list[dict]


def chunk_seed(seed: int, *indices: int) -> int:
    return int(np.random.SeedSequence([seed, *indices]).generate_state(1)[0])


class Batcher:
    """Turns chunk seeds into model-ready tensors."""

    def __init__(self, pool: ScenePool, mix: MixSpec, dtype: torch.dtype):
        self.pool, self.mix, self.dtype = pool, mix, dtype

    def __call__(self, seeds: list[int]):
        chunks = [make_training_chunk(self.pool, self.mix, s) for s in seeds]
        noisy = torch.as_tensor(np.stack([c.noisy for c in chunks]), dtype=self.dtype)
        target = torch.as_tensor(np.stack([c.target for c in chunks]), dtype=self.dtype)
        return noisy, target


def run_batch(model: SpatialDCCRN, noisy: torch.Tensor, target: torch.Tensor, loss_cfg: LossConfig):
    """Forward a waveform batch; returns (loss, breakdown, enhanced waveform)."""
    stft_cfg = model.cfg.stft
    spec = stft_tensor(noisy, stft_cfg)
    _, enhanced = model(spec)
    est = istft_tensor(enhanced[:, 0], stft_cfg, noisy.shape[-1])
    S = stft_tensor(target, stft_cfg)
    loss, parts = combined_loss(est, target, S, enhanced[:, 0], loss_cfg, stft_cfg.sample_rate)
    return loss, parts, est


def _make_optimizer(model, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=cfg.initial_lr)
    return torch.optim.SGD(model.parameters(), lr=cfg.initial_lr, momentum=0.9)


def _make_scheduler(opt, cfg: TrainConfig):
    # halve once a validation loss has failed to improve for `patience` epochs
    return torch.optim.lr_scheduler.ReduceLROnPlateau(opt, mode="min", factor=0.5,
                                                      patience=cfg.patience - 1, threshold=0.0)


def train(run: RunConfig, out_dir: str | Path, resume: bool = False, pool: ScenePool | None = None,
          progress: bool = False) -> RunArtifacts:
    net_cfg, cfg, mix = run.network, run.train, run.mix
    if mix.n_mics != net_cfg.n_mics:
        raise ConfigurationError(f"mixture has {mix.n_mics} mics but network expects {net_cfg.n_mics}")
    if mix.sample_rate != net_cfg.stft.sample_rate:
        raise ConfigurationError("mixture and STFT sample rates differ")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dtype = _DTYPES[cfg.dtype]
    pool = pool or run.pool.build(net_cfg.n_mics, mix.sample_rate)
    batcher = Batcher(pool, mix, dtype)

    torch.manual_seed(cfg.seed)
    model = SpatialDCCRN(net_cfg).to(dtype)
    opt = _make_optimizer(model, cfg)
    sched = _make_scheduler(opt, cfg)
    history: list[dict] = []
    start_epoch, step, best = 0, 0, math.inf
    last_ckpt, best_ckpt, state_file = out / "last.safetensors", out / "best.safetensors", out / "train_state.pt"
    metric_log = out / "metrics.jsonl"
    if resume:
        model, _ = load_checkpoint(last_ckpt)
        model.train()
        opt = _make_optimizer(model, cfg)
        sched = _make_scheduler(opt, cfg)
        state = torch.load(state_file, weights_only=False)
        opt.load_state_dict(state["optimizer"])
        sched.load_state_dict(state["scheduler"])
        start_epoch, step, best, history = state["epoch"], state["step"], state["best"], state["history"]
    elif metric_log.exists():
        metric_log.unlink()
    snapshot = out / "config.yaml"
    snapshot.write_text(yaml.safe_dump(run.to_dict(), sort_keys=False))

    if cfg.fixed_chunks:
        valid_seeds = list(range(cfg.fixed_chunks))
    else:
        valid_seeds = [chunk_seed(cfg.seed, 10**6, i) for i in range(cfg.valid_size)]
    t_start = time.monotonic()
    stop = False
    for epoch in range(start_epoch, cfg.epochs):
        model.train()
        sums: dict[str, float] = {}
        n_steps = 0
        for s in range(cfg.steps_per_epoch):
            if cfg.fixed_chunks:
                order = np.random.default_rng(chunk_seed(cfg.seed, epoch, s)).permutation(cfg.fixed_chunks)
                seeds = [int(i) for i in order[: cfg.batch_size]]
            else:
                seeds = [chunk_seed(cfg.seed, epoch, s, b) for b in range(cfg.batch_size)]
            noisy, target = batcher(seeds)
            loss, parts, _ = run_batch(model, noisy, target, cfg.loss)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch} step {s}; chunk seeds {seeds}")
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            step += 1
            n_steps += 1
            sums["loss"] = sums.get("loss", 0.0) + float(loss.detach())
            for k, v in parts.items():
                if v is not None:
                    sums[k] = sums.get(k, 0.0) + v
            if progress:
                log.info("epoch %d step %d loss %.4f %s", epoch, step, float(loss), parts)
            if (cfg.max_steps and step >= cfg.max_steps) or (
                cfg.max_seconds and time.monotonic() - t_start >= cfg.max_seconds
            ):
                stop = True
                break
        valid = validate(model, batcher, valid_seeds, cfg)
        sched.step(valid["loss"])
        record = {"epoch": epoch, "step": step, "lr": opt.param_groups[0]["lr"],
                  **{f"train_{k}": v / n_steps for k, v in sums.items()},
                  **{f"valid_{k}": v for k, v in valid.items()}}
        history.append(record)
        with metric_log.open("a") as fh:
            fh.write(json.dumps(record) + "\n")
        if valid["loss"] < best:
            best = valid["loss"]
            save_checkpoint(best_ckpt, model, {"epoch": epoch, "step": step, "valid_loss": best})
        save_checkpoint(last_ckpt, model, {"epoch": epoch, "step": step})
        torch.save({"optimizer": opt.state_dict(), "scheduler": sched.state_dict(), "epoch": epoch + 1,
                    "step": step, "best": best, "history": history}, state_file)
        log.info("epoch %d: %s", epoch, record)
        if stop:
            break
    try:
        from .plotting import plot_training_curves

        plot_training_curves(history, out / "training_curves.png")
    except ImportError:  # pragma: no cover - matplotlib missing
        log.warning("matplotlib unavailable; skipping training curve figure")
    return RunArtifacts(last_ckpt, best_ckpt, metric_log, snapshot, history)


@torch.no_grad()
def validate(model: SpatialDCCRN, batcher: Batcher, seeds: list[int], cfg: TrainConfig) -> dict:
    model.eval()
    totals: dict[str, float] = {}
    improvement = []
    for i in range(0, len(seeds), cfg.batch_size):
        noisy, target = batcher(seeds[i:i + cfg.batch_size])
        loss, parts, est = run_batch(model, noisy, target, cfg.loss)
        n = noisy.shape[0]
        totals["loss"] = totals.get("loss", 0.0) + float(loss) * n
        for k, v in parts.items():
            if v is not None:
                totals[k] = totals.get(k, 0.0) + v * n
        ref = noisy[:, batcher.mix.reference_channel]
        improvement.append((si_snr(est, target) - si_snr(ref, target)).double())
    model.train()
    out = {k: v / len(seeds) for k, v in totals.items()}
    out["si_snr_improvement"] = float(torch.cat(improvement).mean())
    return out
