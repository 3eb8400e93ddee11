"""CTC likelihood, gradients and decoders.

Lattices are ``[T, V + 1]`` arrays of per-frame log-probabilities with the
blank at column 0; token id ``k`` lives in column ``k + 1``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx

BLANK = 0
NEG_INF = -np.inf


class CTCError(ValueError):
    pass


class InfeasibleTargetError(CTCError):
    """The target cannot be aligned within the available frames."""


@dataclass(frozen=True)
class DecodeResult:
    tokens: tuple[int, ...]
    score: float
    frame_offsets: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if len(self.tokens) != len(self.frame_offsets):
            raise ValueError("one frame offset per token")


def min_frames(target: Sequence[int]) -> int:
    """Shortest lattice that can emit ``target``: one frame per label plus one blank per repeat."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _check_lattice(log_probs: np.ndarray) -> np.ndarray:
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 2 or lp.shape[0] < 1:
        raise CTCError(f"expected a non-empty [T, V+1] lattice, got shape {lp.shape}")
    if lp.shape[1] < 2:
        raise CTCError("lattice needs blank plus at least one label")
    return lp


def _check_target(target: Sequence[int], vocab_size: int) -> np.ndarray:
    y = np.asarray(list(target), dtype=np.intp)
    if y.size and (y.min() < 0 or y.max() >= vocab_size):
        raise CTCError(f"target ids must lie in [0, {vocab_size})")
    return y


def _extended(target: np.ndarray) -> np.ndarray:
    ext = np.zeros(2 * len(target) + 1, dtype=np.intp)
    ext[1::2] = target + 1
    return ext


def _shift(a: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(a, NEG_INF)
    if k < a.shape[1]:
        out[:, k:] = a[:, : a.shape[1] - k]
    return out


def _forward(lp: np.ndarray, ext: np.ndarray, lengths: np.ndarray, n_states: np.ndarray) -> np.ndarray:
    """Batched log-space alpha recursion.

    ``lp`` is ``[B, T, C]``, ``ext`` ``[B, S]`` (blank-interleaved labels,
    padded with blanks). Rows past a sequence's length are frozen, so the
    final alpha of each sequence sits at ``alpha[b, lengths[b] - 1]``.
    """
    B, T, _ = lp.shape
    S = ext.shape[1]
    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2)
    skip = np.zeros((B, S), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != BLANK) & (ext[:, 2:] != ext[:, :-2])
    valid = np.arange(S)[None, :] < n_states[:, None]

    alpha = np.full((B, T, S), NEG_INF)
    a = np.full((B, S), NEG_INF)
    a[:, 0] = emit[:, 0, 0]
    if S > 1:
        a[:, 1] = np.where(n_states > 1, emit[:, 0, 1], NEG_INF)
    alpha[:, 0] = a
    with np.errstate(invalid="ignore"):
        for t in range(1, T):
            prev = a
            stay_or_step = np.logaddexp(prev, _shift(prev, 1))
            jump = _shift(prev, 2)
            merged = np.where(skip, np.logaddexp(stay_or_step, jump), stay_or_step)
            nxt = np.where(valid, merged + emit[:, t], NEG_INF)
            live = (t < lengths)[:, None]
            a = np.where(live, nxt, prev)
            alpha[:, t] = a
    return alpha


def _reverse_batch(lp, ext, lengths, n_states):
    B, T, C = lp.shape
    S = ext.shape[1]
    t_idx = np.arange(T)[None, :]
    rev_t = np.where(t_idx < lengths[:, None], lengths[:, None] - 1 - t_idx, t_idx)
    s_idx = np.arange(S)[None, :]
    rev_s = np.where(s_idx < n_states[:, None], n_states[:, None] - 1 - s_idx, s_idx)
    lp_r = np.take_along_axis(lp, np.broadcast_to(rev_t[:, :, None], (B, T, C)), axis=1)
    ext_r = np.take_along_axis(ext, rev_s, axis=1)
    return lp_r, ext_r, rev_t, rev_s


def forward_backward(log_probs: np.ndarray, lengths: Sequence[int], targets: Sequence[Sequence[int]]):
    """Log-likelihoods and label occupancies for a padded batch.

    Returns ``(log_like [B], gamma [B, T, C])`` where ``gamma[b, t, k]`` is
    the posterior probability that an alignment of sequence ``b`` emits
    column ``k`` at frame ``t`` (zero past the sequence length).
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 3:
        raise CTCError(f"expected [B, T, C] log-probabilities, got {lp.shape}")
    B, T, C = lp.shape
    lengths = np.asarray(lengths, dtype=np.intp)
    if len(targets) != B or lengths.shape != (B,):
        raise CTCError("one length and one target per batch element")
    if np.any(lengths < 1) or np.any(lengths > T):
        raise CTCError("sequence lengths must lie in [1, T]")
    ys = [_check_target(y, C - 1) for y in targets]
    for b, y in enumerate(ys):
        need = min_frames(y)
        if need > lengths[b]:
            raise InfeasibleTargetError(
                f"target of length {len(y)} needs {need} frames, lattice {b} has {lengths[b]}")

    n_states = np.array([2 * len(y) + 1 for y in ys], dtype=np.intp)
    S = int(n_states.max())
    ext = np.zeros((B, S), dtype=np.intp)
    for b, y in enumerate(ys):
        ext[b, : n_states[b]] = _extended(y)

    alpha = _forward(lp, ext, lengths, n_states)
    lp_r, ext_r, rev_t, rev_s = _reverse_batch(lp, ext, lengths, n_states)
    beta_r = _forward(lp_r, ext_r, lengths, n_states)
    # undo the time and state reversal
    beta = np.take_along_axis(beta_r, np.broadcast_to(rev_t[:, :, None], (B, T, S)), axis=1)
    beta = np.take_along_axis(beta, np.broadcast_to(rev_s[:, None, :], (B, T, S)), axis=2)

    last = alpha[np.arange(B), lengths - 1]
    end = np.stack([last[np.arange(B), n_states - 1],
                    np.where(n_states > 1, last[np.arange(B), np.maximum(n_states - 2, 0)], NEG_INF)], axis=1)
    log_like = np.logaddexp(end[:, 0], end[:, 1])

    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2)
    with np.errstate(invalid="ignore"):
        occ = alpha + beta - emit - log_like[:, None, None]
    occ = np.where(np.isfinite(occ), occ, NEG_INF)
    in_seq = (np.arange(T)[None, :] < lengths[:, None])[:, :, None]
    in_states = (np.arange(S)[None, :] < n_states[:, None])[:, None, :]
    state_post = np.where(in_seq & in_states, np.exp(occ), 0.0)

    gamma = np.zeros((B, T, C))
    for b in range(B):
        onehot = np.zeros((S, C))
        onehot[np.arange(n_states[b]), ext[b, : n_states[b]]] = 1.0
        gamma[b] = state_post[b] @ onehot
    return log_like, gamma


def ctc_loss(log_probs: np.ndarray, target: Sequence[int]) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``target`` and its gradient w.r.t. the logits.

    ``log_probs`` must be a log-softmax output; the returned gradient is
    ``softmax(logits) - gamma``.
    """
    lp = _check_lattice(log_probs)
    log_like, gamma = forward_backward(lp[None], [lp.shape[0]], [list(target)])
    return float(-log_like[0]), np.exp(lp) - gamma[0]


def ctc_loss_tensor(log_probs: nx.Tensor, lengths: Sequence[int], targets: Sequence[Sequence[int]]) -> nx.Tensor:
    """Summed CTC loss over a padded ``[B, T, C]`` batch as a graph node.

    The adjoint w.r.t. the log-probabilities is ``-gamma``; pushed through the
    log-softmax that produced them it becomes ``softmax - gamma``.
    """
    log_like, gamma = forward_backward(log_probs.value, lengths, targets)
    loss = -float(np.sum(log_like))

    def backward(g):
        return (-g * gamma,)

    return nx.custom(np.array(loss), (log_probs,), backward)


def ctc_oracle(log_probs: np.ndarray, target: Sequence[int]) -> float:
    """Brute-force CTC loss by enumerating every alignment path (tests only)."""
    lp = _check_lattice(log_probs)
    T, C = lp.shape
    if T > 8 or C - 1 > 4:
        raise CTCError("ctc_oracle limited to T <= 8 frames and V <= 4 labels")
    want = tuple(int(k) for k in target)
    terms = []
    for path in itertools.product(range(C), repeat=T):
        if collapse(path) == want:
            terms.append(sum(lp[t, k] for t, k in enumerate(path)))
    if not terms:
        return math.inf
    return -float(np.logaddexp.reduce(np.array(terms)))


def collapse(path: Sequence[int]) -> tuple[int, ...]:
    """Merge repeats, drop blanks, and shift lattice columns back to token ids."""
    out = []
    prev = None
    for k in path:
        if k != prev and k != BLANK:
            out.append(int(k) - 1)
        prev = k
    return tuple(out)


def sequence_log_prob(log_probs: np.ndarray, target: Sequence[int]) -> float:
    """Total log-probability of a label sequence (``-inf`` when infeasible)."""
    lp = _check_lattice(log_probs)
    if min_frames(target) > lp.shape[0]:
        return -math.inf
    log_like, _ = forward_backward(lp[None], [lp.shape[0]], [list(target)])
    return float(log_like[0])


def greedy_decode(log_probs: np.ndarray) -> DecodeResult:
    """Best path: per-frame argmax, merge repeats, drop blanks."""
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.shape[0] == 0:
        return DecodeResult((), 0.0, ())
    lp = _check_lattice(lp)
    best = np.argmax(lp, axis=1)
    score = 0.0
    tokens, offsets = [], []
    prev = BLANK
    for t, k in enumerate(best):
        score += lp[t, k]
        if k != BLANK and k != prev:
            tokens.append(int(k) - 1)
            offsets.append(t)
        prev = k
    return DecodeResult(tuple(tokens), float(score), tuple(offsets))


def _lae(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


class _Beam:
    """One fixed-width prefix beam.

    Each prefix carries its (ends-in-blank, ends-in-label) log-mass pair. The
    beam keeps the ``beam`` most probable of these partial hypotheses, so a
    prefix may survive with one or both of its components. With ``beam=1``
    this is exactly the best path; with ``beam=None`` nothing is pruned.
    """

    def __init__(self, beam: int | None):
        self.beam = beam
        self.frame = 0
        # prefix -> [log mass ending in blank, log mass ending in label]
        self.hyps: dict[tuple[int, ...], list[float]] = {(): [0.0, NEG_INF]}
        self.offsets: dict[tuple[int, ...], tuple[int, ...]] = {(): ()}

    def advance(self, log_probs: np.ndarray) -> None:
        lp = np.asarray(log_probs, dtype=np.float64)
        if lp.ndim != 2:
            raise CTCError(f"expected [T, V+1] rows, got {lp.shape}")
        for row in lp:
            self._step(row)

    def _step(self, row: np.ndarray) -> None:
        t = self.frame
        nxt: dict[tuple[int, ...], list[float]] = {}
        offsets: dict[tuple[int, ...], tuple[int, ...]] = {}
        row = [float(v) for v in row]
        blank = row[BLANK]

        def bump(prefix, slot, mass, origin):
            cell = nxt.get(prefix)
            if cell is None:
                cell = nxt[prefix] = [NEG_INF, NEG_INF]
                offsets[prefix] = origin
            cell[slot] = _lae(cell[slot], mass)

        for prefix in sorted(self.hyps):
            pb, pnb = self.hyps[prefix]
            own = self.offsets[prefix]
            total = _lae(pb, pnb)
            bump(prefix, 0, total + blank, own)
            last = prefix[-1] if prefix else None
            if last is not None:
                bump(prefix, 1, pnb + row[last + 1], own)
            for k in range(len(row) - 1):
                p = row[k + 1]
                mass = pb + p if k == last else total + p
                if mass == NEG_INF:
                    continue
                bump(prefix + (k,), 1, mass, own + (t,))

        self.hyps, self.offsets = self._prune(nxt, offsets)
        self.frame += 1

    def _prune(self, nxt, offsets):
        if self.beam is None:
            return nxt, offsets
        parts = [(-mass, prefix, slot)
                 for prefix, cell in nxt.items()
                 for slot, mass in enumerate(cell) if mass > NEG_INF]
        parts.sort()
        kept: dict[tuple[int, ...], list[float]] = {}
        for neg, prefix, slot in parts[: self.beam]:
            kept.setdefault(prefix, [NEG_INF, NEG_INF])[slot] = -neg
        return kept, {p: offsets[p] for p in kept}

    def best(self) -> DecodeResult:
        ranked = sorted((-_lae(*cell), prefix) for prefix, cell in self.hyps.items())
        neg, prefix = ranked[0]
        return DecodeResult(prefix, float(-neg), self.offsets[prefix])


class PrefixBeamSearch:
    """Incremental CTC prefix beam search.

    A plain width-k beam can end on a worse hypothesis than a narrower one,
    so widths 1..k run side by side and the best final hypothesis among them
    is returned. The score therefore never drops as the beam grows, ``beam=1``
    is the best path, and ``beam=None`` (no pruning) is the most probable
    label sequence. Equal scores go to the lexicographically smaller tokens.
    """

    def __init__(self, beam: int | None = 5):
        if beam is not None and beam < 1:
            raise ValueError(f"beam must be >= 1, got {beam}")
        self.beam = beam
        widths = [None] if beam is None else range(1, beam + 1)
        self._beams = [_Beam(w) for w in widths]

    @property
    def frame(self) -> int:
        return self._beams[0].frame

    def advance(self, log_probs: np.ndarray) -> None:
        lp = np.asarray(log_probs, dtype=np.float64)
        if lp.ndim != 2:
            raise CTCError(f"expected [T, V+1] rows, got {lp.shape}")
        for b in self._beams:
            b.advance(lp)

    def best(self) -> DecodeResult:
        results = [b.best() for b in self._beams]
        return min(results, key=lambda r: (-r.score, r.tokens))


def beam_decode(log_probs: np.ndarray, beam: int | None = 5) -> DecodeResult:
    """Prefix beam search; ``beam=None`` keeps every prefix."""
    search = PrefixBeamSearch(beam)
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.shape[0]:
        search.advance(_check_lattice(lp))
    return search.best()
