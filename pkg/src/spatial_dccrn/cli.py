"""Command line entry point: ``spatial-dccrn {train,enhance,evaluate,simulate}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigurationError, DomainError, ShapeError

_USER_ERRORS = (ConfigurationError, ShapeError, DomainError, FileNotFoundError, ValueError)


def _cmd_train(args) -> int:
    from .train import RunConfig, train

    run = RunConfig.load(args.config)
    if args.max_steps is not None:
        run.train.max_steps = args.max_steps
    art = train(run, args.out, resume=args.resume, progress=args.verbose)
    last = art.history[-1] if art.history else {}
    print(f"checkpoint\t{art.checkpoint}")
    print(f"best\t{art.best_checkpoint}")
    print(f"metrics\t{art.metric_log}")
    if last:
        print(f"final_valid_loss\t{last['valid_loss']:.6f}")
        print(f"final_valid_si_snr_improvement\t{last['valid_si_snr_improvement']:.3f}")
    return 0


def _cmd_enhance(args) -> int:
    from .inference import enhance

    for path in enhance(args.ckpt, args.inp, args.out, streaming=args.streaming, plot=args.plot):
        print(path)
    return 0


def _cmd_evaluate(args) -> int:
    from .inference import evaluate

    table = evaluate(args.ckpt, args.manifest, args.wer, out_dir=args.out, streaming=args.streaming,
                     plot=not args.no_plot)
    cols = ["path", "stoi", "e_stoi", "si_snr_db", "challenge_metric"]
    print("\t".join(cols))
    for row in [*(r.to_dict() for r in table.rows), table.mean()]:
        print("\t".join("" if row.get(c) is None else (f"{row[c]:.4f}" if isinstance(row[c], float) else str(row[c]))
                        for c in cols))
    return 0


def _cmd_simulate(args) -> int:
    import torch

    from .audio import MultiChannelWaveform, write_wav
    from .simulation import MixSpec, ScenePool, make_training_chunk, write_manifest

    mix = MixSpec(snr_low=args.snr[0], snr_high=args.snr[1], chunk_seconds=args.seconds, n_mics=args.mics,
                  target=args.target)
    pool = ScenePool.synthetic(n_mics=args.mics, seconds=max(4.0, args.seconds), seed=args.pool_seed)
    out = Path(args.out)
    entries = []
    for i in range(args.count):
        chunk = make_training_chunk(pool, mix, args.seed + i)
        noisy = write_wav(out / f"utt{i:04d}_noisy.wav",
                          MultiChannelWaveform(torch.as_tensor(chunk.noisy, dtype=torch.float32), mix.sample_rate))
        clean = write_wav(out / f"utt{i:04d}_clean.wav",
                          MultiChannelWaveform(torch.as_tensor(chunk.target[None], dtype=torch.float32),
                                               mix.sample_rate))
        entries.append({"id": f"utt{i:04d}", "noisy": str(noisy), "clean": str(clean),
                        "snr_db": round(chunk.snr_db, 3)})
    manifest = write_manifest(out / "manifest.jsonl", entries)
    print(manifest)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spatial-dccrn", description="Multi-channel complex-domain speech enhancement")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a YAML run config")
    p.add_argument("--config", required=True, help="YAML file with network/train/mix/pool sections")
    p.add_argument("--out", default="runs/default", help="output directory for checkpoints and logs")
    p.add_argument("--resume", action="store_true", help="continue from <out>/last.safetensors")
    p.add_argument("--max-steps", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("enhance", help="enhance a multi-channel WAV file or a directory of them")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--streaming", action="store_true", help="frame-by-frame causal inference")
    p.add_argument("--plot", action="store_true", help="also write a spectrogram figure per file")
    p.set_defaults(func=_cmd_enhance)

    p = sub.add_parser("evaluate", help="STOI / E-STOI / SI-SNR report over a manifest")
    p.add_argument("--ckpt", default=None, help="omit to score the unprocessed reference channel")
    p.add_argument("--manifest", required=True)
    p.add_argument("--wer", default=None, help="per-utterance WER file (id wer) for the challenge metric")
    p.add_argument("--out", default=None, help="directory for report.jsonl, report.tsv, summary.json, metrics.png")
    p.add_argument("--streaming", action="store_true")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("simulate", help="write a synthetic evaluation set and its manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seconds", type=float, default=4.0)
    p.add_argument("--mics", type=int, default=4)
    p.add_argument("--snr", type=float, nargs=2, default=(6.0, 16.0), metavar=("LOW", "HIGH"))
    p.add_argument("--target", choices=("reverberant", "direct"), default="reverberant")
    p.add_argument("--seed", type=int, default=10_000)
    p.add_argument("--pool-seed", type=int, default=99)
    p.set_defaults(func=_cmd_simulate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
