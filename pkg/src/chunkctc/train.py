"""Joint full-sequence / chunk CTC training on concatenated utterance pairs."""

from __future__ import annotations

import configparser
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import ctc
from .chunking import ChunkPlan, chunk_lattice_tensor
from .data import Batch, Utterance, Vocabulary, concat_pairs
from .model import Encoder, EncoderConfig, load_encoder, output_length, save_encoder

log = logging.getLogger(__name__)

ABLATIONS = ("full", "no_chunk_loss", "no_concat")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lam: float = 0.5
    lr: float = 1e-3
    warmup_steps: int = 400
    max_steps: int = 3000
    batch_max_frames: int = 2000
    chunk_plan: ChunkPlan = field(default_factory=ChunkPlan)
    ablation: str = "full"
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.ablation = self.ablation.replace("-", "_")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if self.batch_max_frames < 1 or self.max_steps < 0:
            raise ValueError("batch_max_frames must be >= 1 and max_steps >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["chunk_plan"] = asdict(self.chunk_plan)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("chunk_plan"), dict):
            d["chunk_plan"] = ChunkPlan(**d["chunk_plan"])
        return cls(**d)


_FILE_KEYS = {"lambda": "lam"}


CONFIG_SECTIONS = ("data", "train", "model")


def read_config_file(path: str | Path, sections: Sequence[str] = ("train", "model")) -> dict:
    """Read the requested sections of a key = value file.

    Values are parsed as JSON where possible (numbers, booleans, lists) and
    kept as strings otherwise. ``chunk_frames``, ``left_frames`` and
    ``right_frames`` in ``[train]`` build the chunk plan.
    """
    parser = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    unknown = set(parser.sections()) - set(CONFIG_SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    out: dict[str, dict] = {}
    for section in sections:
        if not parser.has_section(section):
            continue
        vals = {}
        for key, raw in parser.items(section):
            try:
                vals[_FILE_KEYS.get(key, key)] = json.loads(raw)
            except json.JSONDecodeError:
                vals[_FILE_KEYS.get(key, key)] = raw
        out[section] = vals
    return out


def train_config_from(values: dict, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    values = dict(values)
    plan_keys = {"chunk_frames", "left_frames", "right_frames", "subsample_factor"}
    plan_vals = {k: values.pop(k) for k in list(values) if k in plan_keys}
    known = {f.name for f in fields(TrainConfig)}
    bad = set(values) - known
    if bad:
        raise ValueError(f"unknown training settings: {sorted(bad)}")
    cfg = replace(base, **values)
    if plan_vals:
        cfg = replace(cfg, chunk_plan=replace(cfg.chunk_plan, **plan_vals))
    return cfg


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up to ``lr`` over ``warmup_steps``, then inverse square-root decay."""
    if step < 1:
        raise ValueError("steps count from 1")
    if step <= cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    return cfg.lr * math.sqrt(cfg.warmup_steps / step)


class Adam:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.value = p.value - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state_blocks(self) -> dict[str, np.ndarray]:
        blocks = {f"adam.m/{k}": v for k, v in self.m.items()}
        blocks.update({f"adam.v/{k}": v for k, v in self.v.items()})
        return blocks

    def load_blocks(self, blocks: dict[str, np.ndarray], t: int) -> None:
        for k in self.m:
            self.m[k] = blocks[f"adam.m/{k}"].copy()
            self.v[k] = blocks[f"adam.v/{k}"].copy()
        self.t = t


@dataclass
class TrainReport:
    step: int
    loss_ctc: float | None
    loss_chunk: float | None
    loss_total: float
    grad_norm: float
    lr: float
    wall_clock: float
    sequences: int = 0
    skipped: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _pad(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([s.shape[0] for s in seqs])
    out = np.zeros((len(seqs), int(lengths.max()), seqs[0].shape[1]))
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


def feasible(utt: Utterance, subsample_factor: int) -> bool:
    return ctc.min_frames(utt.tokens) <= output_length(utt.frames, subsample_factor)


def prepare(batch: Batch, cfg: TrainConfig, subsample_factor: int) -> tuple[list[Utterance], list[str]]:
    """Concatenate (unless ablated) and drop sequences whose targets cannot fit their emissions."""
    if batch.concatenated:
        raise ValueError("train_step expects a raw batch")
    seqs = batch.utterances if cfg.ablation == "no_concat" else concat_pairs(batch).utterances
    keep, dropped = [], []
    for u in seqs:
        (keep if feasible(u, subsample_factor) else dropped).append(u)
    for u in dropped:
        log.warning("skipping %s: %d target tokens do not fit its emission frames", u.id, len(u.tokens))
    return keep, [u.id for u in dropped]


def losses(encoder: Encoder, seqs: Sequence[Utterance], cfg: TrainConfig):
    """Graph nodes (L_ctc, L_chunk, L_total); a path with zero weight is not built."""
    w_chunk = 0.0 if cfg.ablation == "no_chunk_loss" else cfg.lam
    targets = [u.tokens for u in seqs]
    feats = [np.asarray(u.features, dtype=np.float64) for u in seqs]
    l_ctc = l_chunk = None
    if w_chunk < 1.0:
        x, lengths = _pad(feats)
        lp, out_len = encoder.forward(x, lengths)
        l_ctc = ctc.ctc_loss_tensor(lp, out_len, targets)
    if w_chunk > 0.0:
        lp, out_len = chunk_lattice_tensor(encoder, feats, cfg.chunk_plan)
        l_chunk = ctc.ctc_loss_tensor(lp, out_len, targets)
    if l_chunk is None:
        total = l_ctc
    elif l_ctc is None:
        total = l_chunk
    else:
        total = l_ctc * (1.0 - w_chunk) + l_chunk * w_chunk
    return l_ctc, l_chunk, total


def train_step(batch: Batch, encoder: Encoder, cfg: TrainConfig, optimizer: Adam, step: int) -> TrainReport:
    """One update: concat, full-sequence CTC, chunked CTC, interpolate, backward, Adam."""
    t0 = time.perf_counter()
    seqs, dropped = prepare(batch, cfg, encoder.config.subsample_factor)
    lr = lr_at(step, cfg)
    if not seqs:
        return TrainReport(step, None, None, 0.0, 0.0, lr, time.perf_counter() - t0, 0, len(dropped))
    try:
        l_ctc, l_chunk, total = losses(encoder, seqs, cfg)
    except FloatingPointError as exc:
        raise TrainingDiverged(f"non-finite values at step {step} on {[u.id for u in seqs]}: {exc}") from exc
    value = float(total.value)
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss at step {step} on {[u.id for u in seqs]}")
    encoder.zero_grad()
    total.backward()
    sq = sum(float(np.sum(p.grad * p.grad)) for p in encoder.params.values() if p.grad is not None)
    optimizer.step(lr)
    return TrainReport(
        step=step,
        loss_ctc=None if l_ctc is None else float(l_ctc.value),
        loss_chunk=None if l_chunk is None else float(l_chunk.value),
        loss_total=value,
        grad_norm=math.sqrt(sq),
        lr=lr,
        wall_clock=time.perf_counter() - t0,
        sequences=len(seqs),
        skipped=len(dropped),
    )


def epoch_batches(utterances: Sequence[Utterance], cfg: TrainConfig, epoch: int) -> list[list[int]]:
    """Shuffled batches under a frame budget; a pure function of (seed, epoch)."""
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(utterances))
    batches, cur, frames = [], [], 0
    for i in order:
        n = utterances[i].frames
        if cur and frames + n > cfg.batch_max_frames:
            batches.append(cur)
            cur, frames = [], 0
        cur.append(int(i))
        frames += n
    if cur:
        batches.append(cur)
    return batches


def batch_stream(utterances: Sequence[Utterance], cfg: TrainConfig, skip: int = 0) -> Iterator[Batch]:
    epoch = 0
    while True:
        for idx in epoch_batches(utterances, cfg, epoch):
            if skip:
                skip -= 1
                continue
            yield Batch([utterances[i] for i in idx])
        epoch += 1


@dataclass
class FitResult:
    encoder: Encoder
    reports: list[TrainReport]
    checkpoints: list[Path]


def fit(utterances: Sequence[Utterance], vocab: Vocabulary, cfg: TrainConfig,
        encoder_config: EncoderConfig | None = None, out_dir: str | Path | None = None,
        resume: str | Path | None = None, max_steps: int | None = None) -> FitResult:
    """Train from scratch or from ``resume`` up to ``max_steps`` (default ``cfg.max_steps``).

    With ``out_dir`` set, checkpoints ``step-XXXXXX.ckpt`` are written every
    ``cfg.checkpoint_every`` steps and at the end, and every report is
    appended to ``train_log.jsonl``.
    """
    if not utterances:
        raise ValueError("no training utterances")
    stop = cfg.max_steps if max_steps is None else max_steps
    if resume is not None:
        encoder, blocks, meta = load_encoder(resume)
        opt = Adam(encoder.params, cfg.beta1, cfg.beta2, cfg.eps)
        opt.load_blocks(blocks, int(meta["adam_t"]))
        start = int(meta["step"])
    else:
        if encoder_config is None:
            encoder_config = EncoderConfig(vocab_size=len(vocab), feature_dim=int(utterances[0].features.shape[1]))
        if encoder_config.vocab_size != len(vocab):
            raise ValueError("encoder vocab_size does not match the vocabulary")
        if encoder_config.subsample_factor != cfg.chunk_plan.subsample_factor:
            raise ValueError("chunk plan and encoder disagree on the subsample factor")
        encoder = Encoder(encoder_config, seed=cfg.seed)
        opt = Adam(encoder.params, cfg.beta1, cfg.beta2, cfg.eps)
        start = 0

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_fh = open(out / "train_log.jsonl", "a", encoding="utf-8") if out is not None else None
    reports: list[TrainReport] = []
    ckpts: list[Path] = []

    def checkpoint(step: int) -> None:
        if out is None:
            return
        path = out / f"step-{step:06d}.ckpt"
        save_encoder(path, encoder, step, opt.state_blocks(),
                     {"adam_t": opt.t, "vocabulary": vocab.symbols, "train_config": cfg.to_dict()})
        ckpts.append(path)

    try:
        stream = batch_stream(utterances, cfg, skip=start)
        for step in range(start + 1, stop + 1):
            batch = next(stream)
            try:
                report = train_step(batch, encoder, cfg, opt, step)
            except TrainingDiverged:
                if out is not None:
                    dump = {"step": step, "batch": [u.id for u in batch.utterances]}
                    (out / "diverged.json").write_text(json.dumps(dump, indent=2) + "\n", encoding="utf-8")
                raise
            reports.append(report)
            if log_fh is not None and step % cfg.log_every == 0:
                log_fh.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")
            if step % cfg.checkpoint_every == 0:
                checkpoint(step)
        if stop > start and (out is None or stop % cfg.checkpoint_every):
            checkpoint(stop)
    finally:
        if log_fh is not None:
            log_fh.close()
    return FitResult(encoder, reports, ckpts)


def evaluate(encoder: Encoder, utterances: Sequence[Utterance], vocab: Vocabulary, mode: str = "chunked",
             plan: ChunkPlan | None = None, beam: int | None = 5):
    """Decode every utterance and score against its transcript; returns (report, hypotheses)."""
    from .chunking import transcribe
    from .score import score_corpus

    hyps = [transcribe(encoder, u.features, vocab, mode, plan, beam)[0] for u in utterances]
    return score_corpus([u.transcript for u in utterances], hyps), hyps
