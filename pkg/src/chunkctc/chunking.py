"""Context-sensitive chunking: split, pad with past/future context, encode, trim, merge.

Core ranges partition the input; each core is encoded together with up to
``left_frames`` of past and ``right_frames`` of future input, and the
emissions belonging to that context are discarded before merging.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from . import numerics as nx
from .ctc import DecodeResult, PrefixBeamSearch, beam_decode
from .data import HOP_MS


class ChunkPlanError(ValueError):
    pass


class LatticeEncoder(Protocol):
    def encode(self, features: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class ChunkPlan:
    chunk_frames: int = 100
    left_frames: int = 200
    right_frames: int = 100
    subsample_factor: int = 4

    def __post_init__(self):
        S = self.subsample_factor
        if S < 1:
            raise ChunkPlanError("subsample_factor must be >= 1")
        if self.chunk_frames < S:
            raise ChunkPlanError(f"chunk_frames must be at least the subsample factor ({S})")
        for name in ("chunk_frames", "left_frames", "right_frames"):
            v = getattr(self, name)
            if v < 0 or v % S:
                raise ChunkPlanError(f"{name}={v} must be a non-negative multiple of {S}")

    @classmethod
    def from_ms(cls, chunk_ms: float, left_ms: float, right_ms: float,
                hop_ms: float = HOP_MS, subsample_factor: int = 4) -> "ChunkPlan":
        def frames(ms, name):
            n = ms / hop_ms
            if abs(n - round(n)) > 1e-9:
                raise ChunkPlanError(f"{name}={ms} ms is not a whole number of {hop_ms} ms frames")
            return int(round(n))
        return cls(frames(chunk_ms, "chunk"), frames(left_ms, "left"), frames(right_ms, "right"), subsample_factor)

    def lookahead_frames(self) -> int:
        """Worst-case wait before a core frame is encoded: the core plus its right context."""
        return self.chunk_frames + self.right_frames


@dataclass(frozen=True)
class ChunkSlice:
    core: tuple[int, int]
    padded: tuple[int, int]
    trim: tuple[int, int]  # emission frames dropped at (start, end)


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def make_slice(start: int, end: int, total: int, plan: ChunkPlan) -> ChunkSlice:
    S = plan.subsample_factor
    pstart = max(0, start - plan.left_frames)
    pend = min(total, end + plan.right_frames)
    # pend - end is a multiple of S except when clipped at the sequence end
    return ChunkSlice((start, end), (pstart, pend), ((start - pstart) // S, _ceil_div(pend - end, S)))


def plan_chunks(total_frames: int, plan: ChunkPlan) -> list[ChunkSlice]:
    if total_frames < 1:
        raise ChunkPlanError("need at least one frame to chunk")
    return [make_slice(s, min(s + plan.chunk_frames, total_frames), total_frames, plan)
            for s in range(0, total_frames, plan.chunk_frames)]


def _trimmed(lattice: np.ndarray, sl: ChunkSlice) -> np.ndarray:
    lead, tail = sl.trim
    n = lattice.shape[0]
    if lead + tail >= n:
        raise AssertionError(f"trim {sl.trim} leaves nothing of a {n}-frame chunk lattice")
    return lattice[lead:n - tail]


def chunked_encode(features: np.ndarray, plan: ChunkPlan, encoder: LatticeEncoder) -> np.ndarray:
    """Encode each padded chunk on its own and merge the trimmed emissions."""
    feats = np.asarray(features)
    parts = [_trimmed(encoder.encode(feats[sl.padded[0]:sl.padded[1]]), sl)
             for sl in plan_chunks(feats.shape[0], plan)]
    return np.concatenate(parts, axis=0)


def chunk_lattice_tensor(encoder, sequences: Sequence[np.ndarray], plan: ChunkPlan):
    """Merged chunk-path log-probabilities for a batch, as one graph node.

    All padded chunks of all sequences are encoded in one padded forward
    pass; trimmed rows are gathered back into ``[B, T', C]`` (rows past each
    sequence's length are filler and carry no gradient under CTC).
    Returns ``(log_probs, lengths)``.
    """
    windows, owners = [], []
    for b, seq in enumerate(sequences):
        for sl in plan_chunks(seq.shape[0], plan):
            windows.append((b, sl))
            owners.append(seq[sl.padded[0]:sl.padded[1]])
    W = max(w.shape[0] for w in owners)
    F = owners[0].shape[1]
    stacked = np.zeros((len(owners), W, F))
    for i, w in enumerate(owners):
        stacked[i, : w.shape[0]] = w
    win_lengths = np.array([w.shape[0] for w in owners])
    out, out_lengths = encoder.forward(stacked, win_lengths)
    Tw = out.shape[1]
    C = out.shape[2]

    rows: list[list[int]] = [[] for _ in sequences]
    for i, (b, sl) in enumerate(windows):
        lead, tail = sl.trim
        n = int(out_lengths[i])
        if lead + tail >= n:
            raise AssertionError(f"trim {sl.trim} leaves nothing of a {n}-frame chunk lattice")
        rows[b].extend(range(i * Tw + lead, i * Tw + n - tail))
    lengths = np.array([len(r) for r in rows])
    Tm = int(lengths.max())
    index = np.zeros((len(sequences), Tm), dtype=np.intp)
    for b, r in enumerate(rows):
        index[b, : len(r)] = r
    flat = out.reshape(len(owners) * Tw, C)
    return nx.take(flat, index), lengths


@dataclass
class ChunkEvent:
    chunk_index: int
    core: tuple[int, int]
    lattice: np.ndarray
    hypothesis: DecodeResult
    emitted: tuple[int, ...]  # tokens added to the running hypothesis by this chunk
    retracted: int  # tokens of the previous hypothesis that this chunk revised


class StreamSession:
    """Online chunked decoding.

    A chunk is encoded once its core and its right context are buffered (or
    at ``flush`` for the tail). The emitted lattice segments concatenate to
    ``chunked_encode`` of the whole input.
    """

    def __init__(self, plan: ChunkPlan, encoder: LatticeEncoder, beam: int | None = 5):
        self.plan = plan
        self.encoder = encoder
        self.search = PrefixBeamSearch(beam)
        self._buffer: list[np.ndarray] = []
        self._frames = 0
        self._next_start = 0
        self._index = 0
        self._closed = False
        self._shown: tuple[int, ...] = ()
        self.segments: list[np.ndarray] = []

    def push(self, features: np.ndarray) -> list[ChunkEvent]:
        if self._closed:
            raise RuntimeError("push() after flush()")
        feats = np.asarray(features)
        if feats.ndim != 2:
            raise ValueError("push expects [T, F] frames")
        if len(feats):
            self._buffer.append(feats)
            self._frames += len(feats)
        events = []
        while self._next_start + self.plan.chunk_frames + self.plan.right_frames <= self._frames:
            end = self._next_start + self.plan.chunk_frames
            # bounded by frames seen so far; the true length is at least this
            events.append(self._emit(self._next_start, end, self._frames))
        return events

    def flush(self) -> list[ChunkEvent]:
        if self._closed:
            raise RuntimeError("flush() called twice")
        self._closed = True
        events = []
        while self._next_start < self._frames:
            end = min(self._next_start + self.plan.chunk_frames, self._frames)
            events.append(self._emit(self._next_start, end, self._frames))
        return events

    def _emit(self, start: int, end: int, total: int) -> ChunkEvent:
        feats = self._all()
        sl = make_slice(start, end, total, self.plan)
        lattice = _trimmed(self.encoder.encode(feats[sl.padded[0]:sl.padded[1]]), sl)
        self.search.advance(lattice)
        hyp = self.search.best()
        common = 0
        for a, b in zip(self._shown, hyp.tokens):
            if a != b:
                break
            common += 1
        event = ChunkEvent(self._index, (start, end), lattice, hyp,
                           hyp.tokens[common:], len(self._shown) - common)
        self._shown = hyp.tokens
        self.segments.append(lattice)
        self._index += 1
        self._next_start = end
        return event

    def _all(self) -> np.ndarray:
        if len(self._buffer) > 1:
            self._buffer = [np.concatenate(self._buffer, axis=0)]
        return self._buffer[0]

    def lattice(self) -> np.ndarray:
        if not self.segments:
            return np.zeros((0, 0))
        return np.concatenate(self.segments, axis=0)

    def result(self) -> DecodeResult:
        return self.search.best()


def latency_ms(plan: ChunkPlan, hop_ms: float = HOP_MS) -> float:
    return plan.lookahead_frames() * hop_ms


def expected_chunks(total_frames: int, plan: ChunkPlan) -> int:
    return math.ceil(total_frames / plan.chunk_frames) if total_frames else 0


def lattice_for(encoder, features: np.ndarray, mode: str = "chunked", plan: ChunkPlan | None = None) -> np.ndarray:
    """Emission lattice of one utterance, either whole-sequence or chunked."""
    if mode == "full":
        return encoder.encode(features)
    if mode == "chunked":
        if np.asarray(features).shape[0] == 0:
            return encoder.encode(features)
        return chunked_encode(features, plan or ChunkPlan(), encoder)
    raise ValueError(f"unknown decode mode {mode!r}")


def transcribe(encoder, features: np.ndarray, vocab, mode: str = "chunked",
               plan: ChunkPlan | None = None, beam: int | None = 5) -> tuple[str, DecodeResult]:
    lattice = lattice_for(encoder, features, mode, plan)
    if lattice.shape[0] == 0:
        result = DecodeResult((), 0.0, ())
    else:
        result = beam_decode(lattice, beam)
    return vocab.detokenize(result.tokens), result
