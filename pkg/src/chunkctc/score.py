"""WER without punctuation, word alignment, and per-mark punctuation scores."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

MARKS = {",": "comma", ".": "period", "?": "question"}
CLASSES = ("comma", "period", "question")
NONE = "none"

MATCH, SUB, DEL, INS = "match", "substitute", "delete", "insert"


@dataclass(frozen=True)
class AlignedPair:
    ref_word: str | None
    hyp_word: str | None
    op: str
    ref_punct: str = NONE
    hyp_punct: str = NONE


def split_words(text: str) -> tuple[list[str], list[str], list[str]]:
    """Words with , . ? stripped, the class of each word's trailing mark, and orphan marks.

    A token made only of marks attaches its last mark to the preceding word;
    with no preceding word the mark is an orphan.
    """
    words: list[str] = []
    punct: list[str] = []
    orphans: list[str] = []
    for tok in text.split():
        body = tok.rstrip(",.?")
        tail = tok[len(body):]
        cls = MARKS[tail[-1]] if tail else NONE
        body = body.replace(",", "").replace(".", "").replace("?", "")
        if body:
            words.append(body)
            punct.append(cls)
        elif cls != NONE:
            if punct:
                punct[-1] = cls
            else:
                orphans.append(cls)
    return words, punct, orphans


def _distance_table(ref: Sequence[str], hyp: Sequence[str]) -> list[list[int]]:
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i][j] = min(d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]), d[i - 1][j] + 1, d[i][j - 1] + 1)
    return d


def edit_distance(ref: Sequence[str], hyp: Sequence[str]) -> int:
    return _distance_table(ref, hyp)[len(ref)][len(hyp)]


def wer(ref: str, hyp: str) -> float:
    """Word error rate in percent with , . ? removed from both sides."""
    r, _, _ = split_words(ref)
    h, _, _ = split_words(hyp)
    if not r:
        if h:
            warnings.warn("empty reference with a non-empty hypothesis; WER is infinite")
            return math.inf
        return 0.0
    return 100.0 * edit_distance(r, h) / len(r)


def align(ref: str, hyp: str) -> list[AlignedPair]:
    """Minimum-edit alignment of punctuation-free words, punctuation classes attached.

    Ties in the backtrace prefer match, then substitution, deletion, insertion.
    Orphan marks come first as word-less delete (reference) or insert (hypothesis) pairs.
    """
    rw, rp, ro = split_words(ref)
    hw, hp, ho = split_words(hyp)
    d = _distance_table(rw, hw)
    pairs: list[AlignedPair] = []
    i, j = len(rw), len(hw)
    while i or j:
        if i and j and rw[i - 1] == hw[j - 1] and d[i][j] == d[i - 1][j - 1]:
            pairs.append(AlignedPair(rw[i - 1], hw[j - 1], MATCH, rp[i - 1], hp[j - 1]))
            i, j = i - 1, j - 1
        elif i and j and d[i][j] == d[i - 1][j - 1] + 1:
            pairs.append(AlignedPair(rw[i - 1], hw[j - 1], SUB, rp[i - 1], hp[j - 1]))
            i, j = i - 1, j - 1
        elif i and d[i][j] == d[i - 1][j] + 1:
            pairs.append(AlignedPair(rw[i - 1], None, DEL, rp[i - 1], NONE))
            i -= 1
        else:
            pairs.append(AlignedPair(None, hw[j - 1], INS, NONE, hp[j - 1]))
            j -= 1
    pairs.reverse()
    orphans = [AlignedPair(None, None, DEL, c, NONE) for c in ro]
    orphans += [AlignedPair(None, None, INS, NONE, c) for c in ho]
    return orphans + pairs


@dataclass
class MarkCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def precision(self) -> float:
        return 100.0 * self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    def recall(self) -> float:
        return 100.0 * self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    def f1(self) -> float:
        p, r = self.precision(), self.recall()
        return 2 * p * r / (p + r) if p + r else 0.0


def count_marks(pairs: Iterable[AlignedPair], counts: dict[str, MarkCounts] | None = None) -> dict[str, MarkCounts]:
    counts = counts if counts is not None else {c: MarkCounts() for c in CLASSES}
    for p in pairs:
        for c in CLASSES:
            if p.ref_punct == c and p.hyp_punct == c:
                counts[c].tp += 1
            elif p.hyp_punct == c:
                counts[c].fp += 1
            elif p.ref_punct == c:
                counts[c].fn += 1
    return counts


@dataclass
class ScoreReport:
    wer: float
    precision: dict[str, float]
    recall: dict[str, float]
    f1: dict[str, float]
    counts: dict[str, MarkCounts] = field(default_factory=dict)
    errors: int = 0
    ref_words: int = 0
    utterances: int = 0
    missing: int = 0

    @staticmethod
    def _avg(d: dict[str, float]) -> float:
        return sum(d[c] for c in CLASSES) / len(CLASSES)

    @property
    def avg_precision(self) -> float:
        return self._avg(self.precision)

    @property
    def avg_recall(self) -> float:
        return self._avg(self.recall)

    @property
    def avg_f1(self) -> float:
        return self._avg(self.f1)

    def table(self) -> str:
        """Aligned text table: WER, then precision, recall and F1 for , . ? and their average."""
        cols = ["WER"] + [f"{m}{s}" for m in ("P", "R", "F1") for s in (",", ".", "?", "avg")]
        vals = [self.wer]
        for d in (self.precision, self.recall, self.f1):
            vals += [d["comma"], d["period"], d["question"], self._avg(d)]
        head = " ".join(f"{c:>6}" for c in cols)
        row = " ".join(f"{v:6.1f}" for v in vals)
        note = (f"# corpus-pooled counts over {self.utterances} utterances, "
                f"{self.ref_words} reference words, {self.missing} missing hypotheses")
        return f"{note}\n{head}\n{row}\n"

    def records(self) -> list[dict]:
        """One JSON-ready record per mark plus a summary record."""
        out = []
        for c in CLASSES:
            k = self.counts.get(c, MarkCounts())
            out.append({"record": "mark", "mark": c, "precision": round(self.precision[c], 1),
                        "recall": round(self.recall[c], 1), "f1": round(self.f1[c], 1),
                        "tp": k.tp, "fp": k.fp, "fn": k.fn})
        out.append({"record": "summary", "wer": round(self.wer, 1), "errors": self.errors,
                    "ref_words": self.ref_words, "utterances": self.utterances, "missing": self.missing,
                    "avg_precision": round(self.avg_precision, 1), "avg_recall": round(self.avg_recall, 1),
                    "avg_f1": round(self.avg_f1, 1)})
        return out

    def jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())


def punct_scores(pairs: Iterable[AlignedPair]) -> ScoreReport:
    counts = count_marks(pairs)
    return _report(math.nan, counts)


def _report(wer_value: float, counts: dict[str, MarkCounts], **extra) -> ScoreReport:
    return ScoreReport(
        wer=wer_value,
        precision={c: counts[c].precision() for c in CLASSES},
        recall={c: counts[c].recall() for c in CLASSES},
        f1={c: counts[c].f1() for c in CLASSES},
        counts=counts,
        **extra,
    )


def score_corpus(refs: Sequence[str], hyps: Sequence[str], missing: int = 0) -> ScoreReport:
    """Pool edit errors and TP/FP/FN over all utterances, then compute metrics."""
    if len(refs) != len(hyps):
        raise ValueError("one hypothesis per reference")
    errors = words = 0
    counts = {c: MarkCounts() for c in CLASSES}
    for r, h in zip(refs, hyps):
        rw, _, _ = split_words(r)
        hw, _, _ = split_words(h)
        errors += edit_distance(rw, hw)
        words += len(rw)
        count_marks(align(r, h), counts)
    if words:
        w = 100.0 * errors / words
    else:
        w = math.inf if errors else 0.0
    return _report(w, counts, errors=errors, ref_words=words, utterances=len(refs), missing=missing)


def interior_counts(refs: Sequence[str], hyps: Sequence[str]) -> dict[str, MarkCounts]:
    """Pooled TP/FP/FN for marks away from the end of the reference.

    Pairs aligned to the final reference word (and anything after it) are
    ignored, so only marks that sit mid-stream are counted.
    """
    if len(refs) != len(hyps):
        raise ValueError("one hypothesis per reference")
    counts = {c: MarkCounts() for c in CLASSES}
    for r, h in zip(refs, hyps):
        pairs = align(r, h)
        n_ref = sum(p.ref_word is not None for p in pairs)
        seen, keep = 0, []
        for p in pairs:
            if p.ref_word is not None:
                seen += 1
            if seen >= n_ref:
                break
            keep.append(p)
        count_marks(keep, counts)
    return counts
