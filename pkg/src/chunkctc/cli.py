"""Command-line entry point: ``chunkctc gen-data | train | decode | stream | score``."""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

from . import __version__
from .chunking import ChunkPlan, ChunkPlanError, StreamSession, latency_ms, transcribe
from .data import HOP_MS, GeneratorConfig, Vocabulary, generate_corpus, read_manifest, write_corpus
from .model import EncoderConfig, load_encoder
from .score import score_corpus
from .train import TrainingDiverged, fit, read_config_file, train_config_from

log = logging.getLogger("chunkctc")


class CLIError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def _plan(args, subsample_factor: int = 4) -> ChunkPlan:
    try:
        return ChunkPlan.from_ms(args.chunk_ms, args.left_ms, args.right_ms, HOP_MS, subsample_factor)
    except ChunkPlanError as exc:
        raise CLIError(str(exc)) from None


def _config(path, sections) -> dict:
    try:
        return read_config_file(path, sections)
    except (OSError, ValueError, configparser.Error) as exc:
        raise CLIError(f"cannot read config {path}: {exc}") from None


def _manifest(path):
    if not Path(path).is_file():
        raise CLIError(f"manifest not found: {path}")
    try:
        return read_manifest(path)
    except (ValueError, OSError, KeyError) as exc:
        raise CLIError(f"cannot read manifest {path}: {exc}") from None


def _model(args, manifest):
    if not Path(args.checkpoint).is_file():
        raise CLIError(f"checkpoint not found: {args.checkpoint}")
    try:
        encoder, _, meta = load_encoder(args.checkpoint)
    except (ValueError, OSError, KeyError) as exc:
        raise CLIError(f"cannot read checkpoint {args.checkpoint}: {exc}") from None
    cfg = encoder.config
    if cfg.feature_dim != manifest.feature_dim:
        raise CLIError(f"checkpoint expects {cfg.feature_dim}-dim features, manifest has {manifest.feature_dim}")
    vocab = Vocabulary(meta["vocabulary"]) if "vocabulary" in meta else manifest.vocabulary
    if len(vocab) != cfg.vocab_size:
        raise CLIError("checkpoint vocabulary does not match its encoder")
    return encoder, vocab


def _write_hyps(path, rows) -> None:
    text = "".join(f"{uid}\t{hyp}\n" for uid, hyp in rows)
    if path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def read_hypotheses(path) -> dict[str, str]:
    """``id<TAB>text`` lines; duplicate ids are an error."""
    hyps: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            uid, _, text = line.partition("\t")
            if uid in hyps:
                raise CLIError(f"{path}:{n}: duplicate hypothesis id {uid!r}")
            hyps[uid] = text
    return hyps


# ----------------------------------------------------------------- commands

def cmd_gen_data(args) -> None:
    values = {}
    if args.config:
        values = _config(args.config, ("data",)).get("data", {})
    for key in ("n_train", "n_dev", "noise", "n_letters"):
        if getattr(args, key) is not None:
            values[key] = getattr(args, key)
    try:
        cfg = GeneratorConfig.from_dict(values)
        corpus = generate_corpus(cfg, args.seed)
    except (TypeError, ValueError) as exc:
        raise CLIError(f"invalid generator settings: {exc}") from None
    paths = write_corpus(args.out, corpus, cfg, args.seed)
    for split, p in paths.items():
        print(f"{split}: {len(corpus.splits[split])} utterances -> {p}")


def cmd_train(args) -> None:
    manifest = _manifest(args.manifest)
    file_vals = _config(args.config, ("train", "model")) if args.config else {}
    try:
        cfg = train_config_from(file_vals.get("train", {}))
        overrides = {k: v for k, v in {
            "lam": args.lam, "ablation": args.ablation, "seed": args.seed, "max_steps": args.max_steps,
            "lr": args.lr, "warmup_steps": args.warmup_steps, "batch_max_frames": args.batch_max_frames,
            "checkpoint_every": args.checkpoint_every,
        }.items() if v is not None}
        cfg = replace(cfg, **overrides)
        if args.chunk_ms is not None or args.left_ms is not None or args.right_ms is not None:
            plan = cfg.chunk_plan
            cfg = replace(cfg, chunk_plan=ChunkPlan.from_ms(
                args.chunk_ms if args.chunk_ms is not None else plan.chunk_frames * HOP_MS,
                args.left_ms if args.left_ms is not None else plan.left_frames * HOP_MS,
                args.right_ms if args.right_ms is not None else plan.right_frames * HOP_MS,
                HOP_MS, plan.subsample_factor))
        model_vals = dict(file_vals.get("model", {}))
        for key in ("layers", "hidden_dim", "heads"):
            if getattr(args, key) is not None:
                model_vals[key] = getattr(args, key)
        ecfg = EncoderConfig(vocab_size=len(manifest.vocabulary), feature_dim=manifest.feature_dim,
                             subsample_factor=cfg.chunk_plan.subsample_factor, **model_vals)
    except (TypeError, ValueError) as exc:
        raise CLIError(f"invalid training settings: {exc}") from None
    if not manifest.utterances:
        raise CLIError("manifest has no utterances")
    try:
        result = fit(manifest.utterances, manifest.vocabulary, cfg, ecfg, out_dir=args.out, resume=args.resume)
    except TrainingDiverged as exc:
        raise CLIError(f"training diverged: {exc} (batch written to {Path(args.out) / 'diverged.json'})") from None
    last = result.reports[-1] if result.reports else None
    if last is not None:
        print(f"step {last.step}: loss {last.loss_total:.4f} lr {last.lr:.2e}")
    for p in result.checkpoints:
        print(f"checkpoint {p}")


def cmd_decode(args) -> None:
    manifest = _manifest(args.manifest)
    encoder, vocab = _model(args, manifest)
    plan = _plan(args, encoder.config.subsample_factor)
    rows = [(u.id, transcribe(encoder, u.features, vocab, args.mode, plan, args.beam)[0])
            for u in manifest.utterances]
    _write_hyps(args.output, rows)


def cmd_stream(args) -> None:
    manifest = _manifest(args.manifest)
    encoder, vocab = _model(args, manifest)
    plan = _plan(args, encoder.config.subsample_factor)
    lookahead = latency_ms(plan)
    push = max(1, int(args.push_frames))
    rows = []
    out_csv = open(args.latency_csv, "w", newline="", encoding="utf-8") if args.latency_csv else None
    try:
        writer = csv.writer(out_csv) if out_csv else None
        if writer:
            writer.writerow(["id", "chunk_index", "core_ms", "emitted_tokens", "lookahead_ms"])
        for u in manifest.utterances:
            session = StreamSession(plan, encoder, args.beam)
            events = []
            for start in range(0, u.frames, push):
                events += session.push(u.features[start:start + push])
            events += session.flush()
            for ev in events:
                if writer:
                    core = (ev.core[1] - ev.core[0]) * HOP_MS
                    writer.writerow([u.id, ev.chunk_index, f"{core:g}", len(ev.emitted), f"{lookahead:g}"])
                if args.verbose:
                    print(f"{u.id} chunk {ev.chunk_index}: {vocab.detokenize(ev.hypothesis.tokens)}", file=sys.stderr)
            rows.append((u.id, vocab.detokenize(session.result().tokens)))
    finally:
        if out_csv:
            out_csv.close()
    _write_hyps(args.output, rows)


def cmd_score(args) -> None:
    manifest = _manifest(args.manifest)
    if not Path(args.hyp).is_file():
        raise CLIError(f"hypothesis file not found: {args.hyp}")
    hyps = read_hypotheses(args.hyp)
    known = {u.id for u in manifest.utterances}
    extra = sorted(set(hyps) - known)
    if extra:
        raise CLIError(f"hypothesis ids not in the manifest: {extra[:5]}")
    missing = [u.id for u in manifest.utterances if u.id not in hyps]
    if missing:
        warnings.warn(f"{len(missing)} utterances have no hypothesis; scored as empty")
    refs = [u.transcript for u in manifest.utterances]
    outs = [hyps.get(u.id, "") for u in manifest.utterances]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = score_corpus(refs, outs, missing=len(missing))
    sys.stdout.write(report.table())
    if args.jsonl:
        Path(args.jsonl).write_text(report.jsonl(), encoding="utf-8")


# ------------------------------------------------------------------- parser

def _chunk_flags(p, defaults: bool = True) -> None:
    d = (1000, 2000, 1000) if defaults else (None, None, None)
    p.add_argument("--chunk-ms", type=float, default=d[0], help="core chunk length in ms (default 1000)")
    p.add_argument("--left-ms", type=float, default=d[1], help="past context in ms (default 2000)")
    p.add_argument("--right-ms", type=float, default=d[2], help="future context in ms (default 1000)")


def _beam(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError("beam must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chunkctc", description=__doc__)
    parser.add_argument("--version", action="version", version=f"chunkctc {__version__}")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic punctuated corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="key = value file with a [data] section")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-dev", type=int)
    p.add_argument("--n-letters", type=int)
    p.add_argument("--noise", type=float)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train an encoder")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="directory for checkpoints and train_log.jsonl")
    p.add_argument("--config", help="key = value file with [train] and [model] sections")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--lambda", dest="lam", type=float, help="chunk-loss weight (default 0.5)")
    p.add_argument("--ablation", choices=["full", "no-chunk-loss", "no-concat"])
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup-steps", type=int)
    p.add_argument("--batch-max-frames", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--heads", type=int)
    _chunk_flags(p, defaults=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="batch-decode a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=["full", "chunked"], default="chunked")
    p.add_argument("--beam", type=_beam, default=5)
    p.add_argument("--output", default="-", help="hypothesis file (default stdout)")
    _chunk_flags(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("stream", help="simulate streaming decoding")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--beam", type=_beam, default=5)
    p.add_argument("--output", default="-", help="hypothesis file (default stdout)")
    p.add_argument("--latency-csv", help="per-chunk latency records")
    p.add_argument("--push-frames", type=int, default=10, help="frames delivered per push (default 10)")
    p.add_argument("--verbose", action="store_true", help="print the running hypothesis after each chunk")
    _chunk_flags(p)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("score", help="score hypotheses against a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--hyp", required=True, help="id<TAB>text hypothesis file")
    p.add_argument("--jsonl", help="also write line-delimited report records here")
    p.set_defaults(func=cmd_score)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CLIError as exc:
        print(f"chunkctc {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
