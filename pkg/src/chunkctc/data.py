"""Transcript normalization, character vocabulary, synthetic corpora and I/O."""

from __future__ import annotations

import json
import os
import re
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPACE = " "
PUNCT_MARKS = (",", ".", "?")
KEPT_MARKS = "',.?"
HOP_MS = 10

FEATURE_MAGIC = b"CCFT"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIIIf")

MANIFEST_FORMAT = "chunkctc-manifest"
MANIFEST_VERSION = 1


# ------------------------------------------------------------------ text

_BRACKETED = re.compile(r"\([^)]*\)|\[[^\]]*\]")
_DROP = re.compile(r"[^\w\s',.?]|_")


def normalize_text(raw: str) -> str:
    """Lowercase, drop bracketed sound labels and a speaker prefix, keep only ' , . ? marks."""
    text = _BRACKETED.sub(" ", raw.lower())
    parts = text.split()
    if parts and parts[0].endswith(":") and len(parts[0]) <= 20:
        parts = parts[1:]
    text = _DROP.sub(" ", " ".join(parts))
    return " ".join(text.split())


class Vocabulary:
    """Character inventory. Id 0 is always the space, which joins concatenated transcripts."""

    def __init__(self, symbols: Sequence[str]):
        symbols = list(symbols)
        if not symbols or symbols[0] != SPACE:
            raise ValueError("the first vocabulary symbol must be the space")
        if len(set(symbols)) != len(symbols) or any(len(s) != 1 for s in symbols):
            raise ValueError("vocabulary symbols must be distinct single characters")
        self.symbols = symbols
        self._index = {s: i for i, s in enumerate(symbols)}

    @classmethod
    def for_letters(cls, letters: str) -> "Vocabulary":
        return cls([SPACE, "'", *PUNCT_MARKS, *letters])

    def __len__(self) -> int:
        return len(self.symbols)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.symbols == other.symbols

    @property
    def space_id(self) -> int:
        return 0

    def tokenize(self, text: str) -> list[int]:
        try:
            return [self._index[c] for c in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} is not in the vocabulary") from None

    def detokenize(self, ids: Iterable[int]) -> str:
        return "".join(self.symbols[i] for i in ids)


# ------------------------------------------------------------- utterances

@dataclass
class Utterance:
    id: str
    features: np.ndarray  # [T, F] float32
    transcript: str
    tokens: list[int]

    @property
    def frames(self) -> int:
        return int(self.features.shape[0])


@dataclass
class Batch:
    utterances: list[Utterance]
    concatenated: bool = False

    def __len__(self) -> int:
        return len(self.utterances)


def merge_pair(a: Utterance, b: Utterance, joiner: int = 0) -> Utterance:
    return Utterance(
        id=f"{a.id}+{b.id}",
        features=np.concatenate([a.features, b.features], axis=0),
        transcript=f"{a.transcript} {b.transcript}",
        tokens=[*a.tokens, joiner, *b.tokens],
    )


def concat_pairs(batch: Batch, joiner: int = 0) -> Batch:
    """Merge neighbours (1,2), (3,4), ... in batch order; an odd last element passes through."""
    if batch.concatenated:
        raise ValueError("batch is already concatenated")
    utts = batch.utterances
    if not utts:
        raise ValueError("cannot concatenate an empty batch")
    merged = [merge_pair(utts[i], utts[i + 1], joiner) for i in range(0, len(utts) - 1, 2)]
    if len(utts) % 2:
        merged.append(utts[-1])
    return Batch(merged, concatenated=True)


# --------------------------------------------------------------- generator

@dataclass
class GeneratorConfig:
    n_train: int = 2000
    n_dev: int = 200
    n_letters: int = 16
    lexicon_size: int = 60
    word_letters: tuple[int, int] = (2, 5)
    apostrophe_rate: float = 0.1
    words_per_sentence: tuple[int, int] = (2, 5)
    sentences_per_utterance: tuple[int, int] = (1, 3)
    comma_rate: float = 0.15
    question_rate: float = 0.3
    char_frames: tuple[int, int] = (5, 8)
    short_pause: tuple[int, int] = (6, 10)
    long_pause: tuple[int, int] = (16, 24)
    feature_dim: int = 8
    noise: float = 0.1
    question_cue: float = 1.5

    def validate(self) -> None:
        if not 2 <= self.n_letters <= 26:
            raise ValueError("n_letters must lie in [2, 26]")
        if self.n_train < 1 or self.n_dev < 0:
            raise ValueError("need at least one training utterance")
        if self.feature_dim < 3:
            raise ValueError("feature_dim must be >= 3 (signature dims plus a pitch channel)")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        for name in ("word_letters", "words_per_sentence", "sentences_per_utterance",
                     "char_frames", "short_pause", "long_pause"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must be an increasing pair of positive ints")
        if self.short_pause[1] >= self.long_pause[0]:
            raise ValueError("short pauses must be strictly shorter than long pauses")
        for name in ("apostrophe_rate", "comma_rate", "question_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)


@dataclass
class Voice:
    """Acoustic rendering used by the generator (and by the reference decoder)."""

    letters: str
    signatures: dict[str, list[float]]  # per non-punctuation char, length feature_dim - 1
    silence: list[float]
    short_pause: tuple[int, int]
    long_pause: tuple[int, int]

    def vocabulary(self) -> Vocabulary:
        return Vocabulary.for_letters(self.letters)


@dataclass
class Corpus:
    vocabulary: Vocabulary
    voice: Voice
    splits: dict[str, list[Utterance]] = field(default_factory=dict)


def _lexicon(rng: np.random.Generator, cfg: GeneratorConfig, letters: str) -> list[str]:
    words: set[str] = set()
    lo, hi = cfg.word_letters
    attempts = 0
    while len(words) < cfg.lexicon_size:
        attempts += 1
        if attempts > 100 * cfg.lexicon_size:
            raise ValueError("lexicon_size too large for the letter inventory")
        n = int(rng.integers(lo, hi + 1))
        chars = [letters[int(rng.integers(len(letters)))]]
        while len(chars) < n:
            c = letters[int(rng.integers(len(letters)))]
            if c != chars[-1]:  # no doubled letters, so runs of one signature are one char
                chars.append(c)
        if rng.random() < cfg.apostrophe_rate:
            tail = letters[int(rng.integers(len(letters)))]
            chars += ["'", tail]
        words.add("".join(chars))
    return sorted(words)


def _sentence(rng, cfg, lexicon) -> str:
    n = int(rng.integers(cfg.words_per_sentence[0], cfg.words_per_sentence[1] + 1))
    words = [lexicon[int(rng.integers(len(lexicon)))] for _ in range(n)]
    for i in range(n - 1):
        if rng.random() < cfg.comma_rate:
            words[i] += ","
    end = "?" if rng.random() < cfg.question_rate else "."
    return " ".join(words) + end


def render(text: str, voice: Voice, cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    """Turn a normalized transcript into [T, F] features.

    Characters become their signature held for a random duration; commas a
    short silence, sentence ends a long silence. Frames of a word that ends
    in '?' get a rising ramp on the last (pitch) channel.
    """
    rows: list[np.ndarray] = []
    sig_dim = cfg.feature_dim - 1
    words = text.split(" ")
    for wi, word in enumerate(words):
        if wi:
            rows.append(_hold(voice.signatures[SPACE], 0.0, _dur(rng, cfg.char_frames)))
        body = word.rstrip("".join(PUNCT_MARKS))
        mark = word[len(body):][-1:] if len(body) < len(word) else ""
        word_rows = []
        for c in body:
            word_rows.append(_hold(voice.signatures[c], 0.0, _dur(rng, cfg.char_frames)))
        if word_rows and mark == "?":
            block = np.concatenate(word_rows, axis=0)
            block[:, sig_dim] = np.linspace(0.0, cfg.question_cue, len(block) + 1)[1:]
            word_rows = [block]
        rows.extend(word_rows)
        if mark:
            span = cfg.short_pause if mark == "," else cfg.long_pause
            rows.append(_hold(voice.silence, 0.0, _dur(rng, span)))
    feats = np.concatenate(rows, axis=0) if rows else np.zeros((0, cfg.feature_dim))
    if cfg.noise > 0:
        feats = feats + rng.normal(0.0, cfg.noise, size=feats.shape)
    return feats.astype(np.float32)


def _dur(rng, span) -> int:
    return int(rng.integers(span[0], span[1] + 1))


def _hold(sig, pitch: float, n: int) -> np.ndarray:
    row = np.append(np.asarray(sig, dtype=np.float64), pitch)
    return np.tile(row, (n, 1))


def generate_corpus(cfg: GeneratorConfig, seed: int) -> Corpus:
    """Deterministic synthetic corpus: same config and seed, same bytes."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    letters = "abcdefghijklmnopqrstuvwxyz"[: cfg.n_letters]
    vocab = Vocabulary.for_letters(letters)
    sig_dim = cfg.feature_dim - 1
    signatures = {}
    for c in [SPACE, "'", *letters]:
        v = rng.normal(size=sig_dim)
        signatures[c] = (1.5 * v / np.linalg.norm(v)).tolist()
    silence = (0.05 * rng.normal(size=sig_dim)).tolist()
    voice = Voice(letters, signatures, silence, cfg.short_pause, cfg.long_pause)
    lexicon = _lexicon(rng, cfg, letters)

    corpus = Corpus(vocab, voice)
    for split, n in (("train", cfg.n_train), ("dev", cfg.n_dev)):
        utts = []
        for i in range(n):
            k = int(rng.integers(cfg.sentences_per_utterance[0], cfg.sentences_per_utterance[1] + 1))
            text = " ".join(_sentence(rng, cfg, lexicon) for _ in range(k))
            feats = render(text, voice, cfg, rng)
            utts.append(Utterance(f"{split}-{i:05d}", feats, text, vocab.tokenize(text)))
        corpus.splits[split] = utts
    return corpus


def reference_transcribe(features: np.ndarray, voice: Voice) -> str:
    """Decode clean generator output by nearest-signature lookup.

    Runs of one signature are one character; silences become ',' or a
    sentence end by length, '?' when the preceding word carried the pitch ramp.
    """
    feats = np.asarray(features, dtype=np.float64)
    if not len(feats):
        return ""
    names = list(voice.signatures) + ["<sil>"]
    table = np.array(list(voice.signatures.values()) + [voice.silence])
    dists = ((feats[:, None, :-1] - table[None]) ** 2).sum(-1)
    labels = np.argmin(dists, axis=1)
    out: list[str] = []
    word_pitch = 0.0
    start = 0
    for t in range(1, len(labels) + 1):
        if t < len(labels) and labels[t] == labels[start]:
            continue
        name = names[labels[start]]
        run = t - start
        if name == "<sil>":
            if run <= voice.short_pause[1]:
                out.append(",")
            else:
                out.append("?" if word_pitch > 0 else ".")
        else:
            if name == SPACE:
                word_pitch = 0.0
            else:
                word_pitch = max(word_pitch, float(feats[start:t, -1].max()))
            out.append(name)
        start = t
    return "".join(out)


# ---------------------------------------------------------------------- I/O

def write_features(path: str | os.PathLike, feats: np.ndarray, hop_ms: float = HOP_MS) -> None:
    """Header ``<4sIIIf`` (magic, version, T, F, hop_ms), then row-major little-endian float32."""
    arr = np.ascontiguousarray(feats, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("features must be [T, F]")
    T, F = arr.shape
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, T, F, hop_ms))
        fh.write(arr.tobytes())


def read_features(path: str | os.PathLike) -> tuple[np.ndarray, float]:
    with open(path, "rb") as fh:
        head = fh.read(_FEATURE_HEADER.size)
        if len(head) != _FEATURE_HEADER.size:
            raise ValueError(f"{path}: truncated feature header")
        magic, version, T, F, hop = _FEATURE_HEADER.unpack(head)
        if magic != FEATURE_MAGIC:
            raise ValueError(f"{path}: not a feature file")
        if version != FEATURE_VERSION:
            raise ValueError(f"{path}: unsupported feature version {version}")
        body = fh.read()
    if len(body) != 4 * T * F:
        raise ValueError(f"{path}: expected {T}x{F} floats, found {len(body)} bytes")
    arr = np.frombuffer(body, dtype="<f4").reshape(T, F).astype(np.float32)
    return arr, hop


@dataclass
class Manifest:
    vocabulary: Vocabulary
    feature_dim: int
    hop_ms: float
    utterances: list[Utterance]
    path: Path | None = None

    def by_id(self) -> dict[str, Utterance]:
        return {u.id: u for u in self.utterances}


def write_manifest(path: str | os.PathLike, utterances: Sequence[Utterance], vocab: Vocabulary,
                   feature_dir: str = "features", hop_ms: float = HOP_MS) -> Path:
    """Write a JSON-lines manifest plus one feature file per utterance.

    The first line is a header record; each following line is
    ``{"id", "features", "frames", "text"}`` with ``features`` relative to
    the manifest's directory.
    """
    path = Path(path)
    root = path.parent
    (root / feature_dir).mkdir(parents=True, exist_ok=True)
    feature_dim = int(utterances[0].features.shape[1]) if utterances else 0
    lines = [json.dumps({"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION,
                         "feature_dim": feature_dim, "hop_ms": hop_ms,
                         "vocabulary": vocab.symbols})]
    for u in utterances:
        rel = f"{feature_dir}/{u.id}.feat"
        write_features(root / rel, u.features, hop_ms)
        lines.append(json.dumps({"id": u.id, "features": rel, "frames": u.frames, "text": u.transcript}))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_manifest(path: str | os.PathLike, load_features: bool = True) -> Manifest:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    if not records or records[0].get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: missing manifest header")
    head = records[0]
    if head.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {head.get('version')}")
    vocab = Vocabulary(head["vocabulary"])
    utts = []
    seen = set()
    for rec in records[1:]:
        if rec["id"] in seen:
            raise ValueError(f"{path}: duplicate utterance id {rec['id']!r}")
        seen.add(rec["id"])
        if load_features:
            feats, _ = read_features(path.parent / rec["features"])
            if feats.shape[0] != rec["frames"]:
                raise ValueError(f"{rec['id']}: manifest says {rec['frames']} frames, file has {feats.shape[0]}")
        else:
            feats = np.zeros((rec["frames"], head["feature_dim"]), dtype=np.float32)
        utts.append(Utterance(rec["id"], feats, rec["text"], vocab.tokenize(rec["text"])))
    return Manifest(vocab, head["feature_dim"], head["hop_ms"], utts, path)


def write_corpus(out_dir: str | os.PathLike, corpus: Corpus, cfg: GeneratorConfig, seed: int) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, utts in corpus.splits.items():
        paths[split] = write_manifest(out / f"{split}.jsonl", utts, corpus.vocabulary)
    meta = {"seed": seed, "generator": asdict(cfg), "voice": asdict(corpus.voice)}
    (out / "voice.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths
