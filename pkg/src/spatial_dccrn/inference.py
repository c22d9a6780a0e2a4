"""Batch enhancement of WAV files and manifest-driven evaluation."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .audio import MultiChannelWaveform, istft_tensor, read_wav, stft_tensor, write_wav
from .errors import ConfigurationError, DomainError
from .losses import EvaluationReport, estoi_score, si_snr, stoi_score
from .model import SpatialDCCRN, load_checkpoint, stream_enhance
from .simulation import read_manifest

log = logging.getLogger(__name__)


@torch.no_grad()
def enhance_waveform(model: SpatialDCCRN, samples: torch.Tensor, streaming: bool = False) -> torch.Tensor:
    """(P, N) noisy waveform -> (N,) enhanced waveform."""
    cfg = model.cfg
    if samples.shape[0] != cfg.n_mics:
        raise ConfigurationError(f"model expects {cfg.n_mics} channels, got {samples.shape[0]}")
    dtype = next(model.parameters()).dtype
    spec = stft_tensor(samples.to(dtype), cfg.stft).unsqueeze(0)
    if streaming:
        enhanced = stream_enhance(model, spec)
    else:
        _, enhanced = model(spec)
    return istft_tensor(enhanced[0, 0], cfg.stft, samples.shape[-1])


def _wav_inputs(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".wav")
        if not files:
            raise FileNotFoundError(f"{path}: no .wav files found")
        return files
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    return [path]


def enhance(checkpoint: str | Path, in_path: str | Path, out_path: str | Path, streaming: bool = False,
            plot: bool = False) -> list[Path]:
    """Enhance one WAV or every WAV in a directory; writes single-channel float WAVs."""
    model, _ = load_checkpoint(checkpoint)
    in_path, out_path = Path(in_path), Path(out_path)
    inputs = _wav_inputs(in_path)
    many = in_path.is_dir()
    written = []
    for wav in inputs:
        wave = read_wav(wav, model.cfg.stft.sample_rate)
        if wave.num_channels != model.cfg.n_mics:
            raise ConfigurationError(
                f"{wav}: {wave.num_channels} channels but checkpoint expects {model.cfg.n_mics}"
            )
        est = enhance_waveform(model, wave.samples, streaming)
        target = out_path / wav.name if many else out_path
        write_wav(target, MultiChannelWaveform(est.float().unsqueeze(0), wave.sample_rate))
        written.append(target)
        if plot:
            from .plotting import plot_enhancement

            ref = wave.samples[model.cfg.mmf.reference_channel]
            plot_enhancement(ref, est, model.cfg.stft, target.with_suffix(".png"))
        log.info("%s -> %s", wav, target)
    return written


def read_wer_file(path: str | Path) -> dict[str, float]:
    """WER per utterance: JSON lines {"id": ..., "wer": ...} or whitespace separated ``id wer``."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("{"):
            rec = json.loads(line)
            out[str(rec["id"])] = float(rec["wer"])
        else:
            parts = line.split()
            if len(parts) != 2:
                raise ConfigurationError(f"{path}:{lineno}: expected 'id wer'")
            out[parts[0]] = float(parts[1])
    return out


@dataclass
class EvaluationTable:
    rows: list[EvaluationReport]

    def mean(self) -> dict:
        keys = ["stoi", "e_stoi", "si_snr_db", "wer", "challenge_metric"]
        out = {"path": "MEAN", "count": len(self.rows)}
        for k in keys:
            vals = [getattr(r, k) for r in self.rows if getattr(r, k) is not None]
            out[k] = float(np.mean(vals)) if vals and len(vals) == len(self.rows) else None
        return out

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        jsonl = out_dir / "report.jsonl"
        jsonl.write_text("".join(json.dumps(r.to_dict()) + "\n" for r in self.rows))
        tsv = out_dir / "report.tsv"
        cols = ["path", "stoi", "e_stoi", "si_snr_db", "wer", "challenge_metric"]
        lines = ["\t".join(cols)]
        for r in [*(r.to_dict() for r in self.rows), self.mean()]:
            lines.append("\t".join("" if r.get(c) is None else (f"{r[c]:.6f}" if isinstance(r[c], float) else str(r[c]))
                                   for c in cols))
        tsv.write_text("\n".join(lines) + "\n")
        summary = out_dir / "summary.json"
        summary.write_text(json.dumps(self.mean(), indent=2) + "\n")
        return {"report": jsonl, "table": tsv, "summary": summary}


def evaluate(checkpoint: str | Path | None, manifest: str | Path, wer_file: str | Path | None = None,
             out_dir: str | Path | None = None, streaming: bool = False, plot: bool = True) -> EvaluationTable:
    """Score every manifest utterance; without a checkpoint the noisy reference channel is scored.

    Manifest lines: ``{"id": ..., "noisy": <wav>, "clean": <wav>}``.
    """
    model = load_checkpoint(checkpoint)[0] if checkpoint else None
    wers = read_wer_file(wer_file) if wer_file else {}
    entries = read_manifest(manifest)
    rows = []
    for i, e in enumerate(entries):
        if "noisy" not in e or "clean" not in e:
            raise ConfigurationError(f"{manifest}: entry {i} needs 'noisy' and 'clean' paths")
        utt = str(e.get("id", Path(e["noisy"]).stem))
        noisy = read_wav(e["noisy"])
        clean = read_wav(e["clean"]).samples[0].double()
        if model is not None:
            est = enhance_waveform(model, noisy.samples, streaming).double()
        else:
            est = noisy.samples[0].double()
        n = min(len(est), len(clean))
        est, ref = est[:n], clean[:n]
        rows.append(EvaluationReport(
            path=str(e["noisy"]), stoi=stoi_score(est, ref, noisy.sample_rate),
            e_stoi=estoi_score(est, ref, noisy.sample_rate), si_snr_db=float(si_snr(est, ref)),
            wer=wers.get(utt) if wer_file else None,
        ))
        if wer_file and utt not in wers:
            raise ConfigurationError(f"{wer_file}: no WER for utterance {utt!r}")
    table = EvaluationTable(rows)
    if out_dir is not None:
        table.write(out_dir)
        if plot and rows:
            from .plotting import plot_evaluation

            plot_evaluation(table, Path(out_dir) / "metrics.png")
    return table
