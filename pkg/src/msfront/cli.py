"""Command-line entry point: ``msfront {gen-data,extract,train,eval,analyze}``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
from contextlib import nullcontext
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import export_centroids, export_filters, summarize_frontend
from .audio import AudioFormatError, CorpusConfig, fit_norm_stats, read_corpus, read_wav, synth_corpus, write_corpus
from .checkpoint import CheckpointError
from .ctc import CTCNumericError
from .frontend import PRESETS, ConfigError, frontend_from_config, _multi
from .model import ModelConfig
from .tensor import NonFiniteError
from .train import (DivergenceError, TrainConfig, evaluate, latest_checkpoint, restore_state, setup, train)

log = logging.getLogger("msfront")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
MANIFEST = "run_manifest.json"
DEFAULT_TRAIN_FRONTEND = _multi(8, 8, 8)


class CLIError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


def _load_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CLIError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CLIError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise CLIError(f"{path}: expected a JSON object")
    return data


def _config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_run_manifest(out_dir: Path, command: str, config: dict, seed: int, artifacts: list[str]) -> Path:
    manifest = {
        "command": command,
        "config_hash": _config_hash(config),
        "seed": seed,
        "artifacts": sorted(artifacts),
        "versions": {"msfront": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    path = out_dir / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _prepare_out_dir(path: str) -> Path:
    out = Path(path)
    if not out.parent.exists():
        raise CLIError(f"output directory parent does not exist: {out.parent}")
    out.mkdir(exist_ok=True)
    return out


def _section(args, name: str):
    return _load_json(args.config).get(name) if args.config else None


def _frontend_spec(args, default=None):
    """Resolve the front-end config from --preset / --frontend-config / --config."""
    if getattr(args, "preset", None):
        if args.preset not in PRESETS:
            raise CLIError(f"unknown preset {args.preset!r}; valid presets: {', '.join(PRESETS)}")
        return PRESETS[args.preset]
    if getattr(args, "frontend_config", None):
        return _load_json(args.frontend_config)
    spec = _section(args, "frontend")
    if isinstance(spec, str):
        if spec not in PRESETS:
            raise CLIError(f"unknown preset {spec!r}; valid presets: {', '.join(PRESETS)}")
        return PRESETS[spec]
    return spec if spec is not None else default


# --- commands --------------------------------------------------------------

def cmd_gen_data(args) -> int:
    raw = _section(args, "corpus") or {}
    if args.config and not raw:
        raw = {k: v for k, v in _load_json(args.config).items() if k in CorpusConfig.__dataclass_fields__}
    unknown = set(raw) - set(CorpusConfig.__dataclass_fields__)
    if unknown:
        raise CLIError(f"unknown corpus config fields: {sorted(unknown)}")
    cfg = CorpusConfig(**{**raw, "seed": args.seed if args.seed is not None else raw.get("seed", 0)})
    try:
        corpus = synth_corpus(cfg)
    except ValueError as exc:
        raise CLIError(f"invalid corpus config: {exc}") from None
    out = _prepare_out_dir(args.out_dir)
    write_corpus(corpus, out)
    artifacts = ["manifest.tsv", "alphabet.txt"] + [f"wav/{u.id}.wav" for u in corpus]
    write_run_manifest(out, "gen-data", {"corpus": asdict(cfg)}, cfg.seed, artifacts)
    print(f"wrote {len(corpus)} utterances to {out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    spec = _frontend_spec(args)
    if spec is None:
        raise CLIError(f"extract needs --preset or --frontend-config; valid presets: {', '.join(PRESETS)}")
    seed = args.seed or 0
    fe = frontend_from_config(spec, seed=seed)
    try:
        w = read_wav(args.wav)
    except FileNotFoundError:
        raise CLIError(f"wav file not found: {args.wav}") from None
    fe.norm = fit_norm_stats([w])
    fmap = fe.extract(w)
    out = open(args.out, "w", newline="") if args.out else nullcontext(sys.stdout)
    with out as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f_{i}" for i in range(fmap.n_features)])
        writer.writerows([[repr(float(v)) for v in row] for row in fmap.frames])
    log.info("%d frames x %d features at %s ms/frame", fmap.n_frames, fmap.n_features, fmap.ms_per_frame)
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    raw = dict(_section(args, "train") or {})
    if args.train_config:
        raw.update(_load_json(args.train_config))
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.epochs is not None:
        raw["epochs"] = args.epochs
    try:
        return TrainConfig(**raw)
    except TypeError as exc:
        raise CLIError(f"invalid train config: {exc}") from None


def cmd_train(args) -> int:
    corpus = read_corpus(args.corpus_dir)
    out = _prepare_out_dir(args.out_dir)
    tc = _train_config(args)
    existing = latest_checkpoint(out)
    if args.resume:
        if existing is None:
            raise CLIError(f"--resume given but no checkpoint in {out}")
        state = restore_state(existing, tc)
        log.info("resuming from %s (epoch %d)", existing.name, state.epoch)
    else:
        if existing is not None:
            raise CLIError(f"{out} already holds checkpoints; pass --resume or use a fresh directory")
        fe_spec = _frontend_spec(args, DEFAULT_TRAIN_FRONTEND)
        model_raw = dict(_section(args, "model") or {})
        if args.model_config:
            model_raw.update(_load_json(args.model_config))
        model_raw.setdefault("alphabet", corpus.alphabet)
        try:
            mc = ModelConfig(**model_raw)
        except TypeError as exc:
            raise CLIError(f"invalid model config: {exc}") from None
        state = setup(frontend_from_config(fe_spec, seed=tc.seed), mc, corpus, tc)
    train(state, corpus, out, tc.epochs)
    artifacts = ["train_log.csv"] + [p.name for p in sorted(out.glob("ckpt_epoch*.bin"))]
    config = {"frontend": state.frontend.to_config(), "model": asdict(state.model.config),
              "train": {**asdict(tc), "snr_range_db": list(tc.snr_range_db)},
              "corpus_manifest": _file_digest(Path(args.corpus_dir) / "manifest.tsv")}
    write_run_manifest(out, "train", config, tc.seed, artifacts)
    print(f"trained {state.epoch} epochs; final mean loss {state.history[-1]:.6f}" if state.history
          else "no epochs run")
    return EXIT_OK


def cmd_eval(args) -> int:
    state = restore_state(args.checkpoint)
    corpus = read_corpus(args.corpus_dir)
    report = evaluate(state, corpus)
    payload = {"cer": report.cer, "wer": report.wer, "n_utts": report.n_utts,
               "hypotheses": report.hypotheses}
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(f"CER {report.cer:.4f}  WER {report.wer:.4f}  ({report.n_utts} utterances)")
    return EXIT_OK


def cmd_analyze(args) -> int:
    if args.checkpoint:
        fe = restore_state(args.checkpoint).frontend
        source = {"checkpoint": _file_digest(Path(args.checkpoint))}
    else:
        spec = _frontend_spec(args, DEFAULT_TRAIN_FRONTEND)
        fe = frontend_from_config(spec, seed=args.seed or 0)
        source = {"frontend": spec, "seed": args.seed or 0}
    if all(f is None for f in fe.filters):
        raise CLIError("front end has no learnable filters to analyze")
    out = _prepare_out_dir(args.out_dir)
    summaries = summarize_frontend(fe)
    export_filters(fe, out / "filters.csv")
    export_centroids(summaries, out / "centroids.csv")
    write_run_manifest(out, "analyze", source, args.seed or 0, ["filters.csv", "centroids.csv"])
    for s in summaries:
        print(f"{s.bank_name}: {s.n_filters} filters, mean centroid {s.bank_mean:.1f} Hz")
    return EXIT_OK


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands accept the same flags; SUPPRESS keeps a value given before the subcommand
    default = argparse.SUPPRESS if suppress else None
    flags = argparse.ArgumentParser(add_help=False)
    flags.add_argument("--seed", type=int, default=default, help="single seed for all randomness")
    flags.add_argument("--threads", type=int, default=default, help="BLAS threads; 1 gives bit-exact runs")
    flags.add_argument("--config", default=default, help="JSON file with corpus/frontend/model/train sections")
    flags.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)
    return flags


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="msfront", description=__doc__.splitlines()[0],
                                     parents=[_global_flags(suppress=False)])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="synthesize the toy corpus")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("extract", parents=[common], help="front-end features of one WAV as CSV")
    p.add_argument("wav")
    p.add_argument("--preset")
    p.add_argument("--frontend-config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", parents=[common], help="train front end + acoustic model with CTC")
    p.add_argument("corpus_dir")
    p.add_argument("out_dir")
    p.add_argument("--preset")
    p.add_argument("--frontend-config")
    p.add_argument("--model-config")
    p.add_argument("--train-config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="greedy-decode a corpus and report CER/WER")
    p.add_argument("checkpoint")
    p.add_argument("corpus_dir")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", parents=[common], help="spectral centroids and filter taps as CSV")
    p.add_argument("out_dir")
    p.add_argument("--checkpoint")
    p.add_argument("--preset")
    p.add_argument("--frontend-config")
    p.set_defaults(func=cmd_analyze)
    return parser


def _thread_limit(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (DivergenceError, NonFiniteError, CTCNumericError) as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, AudioFormatError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
