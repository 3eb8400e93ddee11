"""Toy streaming acoustic encoder and its checkpoint container."""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor

MASK_VALUE = -1e30


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    feature_dim: int = 8
    layers: int = 4
    hidden_dim: int = 64
    heads: int = 4
    subsample_factor: int = 4
    frontend_kernel: int = 5
    frontend_channels: int | None = None  # width of the intermediate conv; 4 * hidden_dim if unset
    ffn_dim: int | None = None  # 4 * hidden_dim if unset
    positional_kernel: int = 15
    positional_groups: int = 16
    context_free_mode: bool = False
    attention: bool = True

    def __post_init__(self):
        for f in ("vocab_size", "feature_dim", "hidden_dim", "heads",
                  "subsample_factor", "frontend_kernel", "positional_kernel", "positional_groups"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")
        if self.hidden_dim % self.heads:
            raise ValueError("hidden_dim must be divisible by heads")
        if self.hidden_dim % self.positional_groups:
            raise ValueError("hidden_dim must be divisible by positional_groups")
        s = self.subsample_factor
        if s & (s - 1):
            raise ValueError("subsample_factor must be a power of two")

    @property
    def conv_layers(self) -> int:
        return int(math.log2(self.subsample_factor))

    @property
    def mid_channels(self) -> int:
        return self.frontend_channels or 4 * self.hidden_dim

    @property
    def ffn_width(self) -> int:
        return self.ffn_dim or 4 * self.hidden_dim

    @property
    def frontend_taps(self) -> tuple[int, int, int]:
        """(kernel, left pad, right pad) of each stride-2 conv; keeps T_out = ceil(T / 2)."""
        if self.context_free_mode:
            return 2, 0, 1
        k = self.frontend_kernel
        return k, (k - 1) // 2, k - 1 - (k - 1) // 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def output_length(frames: int, subsample_factor: int = 4) -> int:
    """Emission frames for ``frames`` input frames: ceil(T / 2) once per stride-2 layer."""
    n = frames
    for _ in range(int(math.log2(subsample_factor))):
        n = (n + 1) // 2
    return n


def _param_shapes(cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...], int | None]]:
    """Ordered (name, shape, fan_in) list; fan_in None marks norm gains (ones) and biases (zeros)."""
    H = cfg.hidden_dim
    shapes: list[tuple[str, tuple[int, ...], int | None]] = []
    k = cfg.frontend_taps[0]
    c_in = cfg.feature_dim
    n_conv = cfg.conv_layers
    if n_conv == 0:
        shapes += [("frontend.0.weight", (c_in, 2 * H), c_in), ("frontend.0.bias", (2 * H,), None)]
    for i in range(n_conv):
        c_out = 2 * H if i == n_conv - 1 else cfg.mid_channels
        shapes += [(f"frontend.{i}.weight", (k * c_in, c_out), k * c_in), (f"frontend.{i}.bias", (c_out,), None)]
        c_in = c_out // 2
    G = cfg.positional_groups
    Hg = H // G
    K = cfg.positional_kernel
    shapes += [("pos_conv.weight", (G, K * Hg, Hg), K * Hg), ("pos_conv.bias", (H,), None),
               ("pos_norm.gain", (H,), None), ("pos_norm.bias", (H,), None)]
    F = cfg.ffn_width
    for i in range(cfg.layers):
        p = f"layers.{i}."
        shapes += [
            (p + "ln1.gain", (H,), None), (p + "ln1.bias", (H,), None),
            (p + "attn.qkv.weight", (H, 3 * H), H), (p + "attn.qkv.bias", (3 * H,), None),
            (p + "attn.out.weight", (H, H), H), (p + "attn.out.bias", (H,), None),
            (p + "ln2.gain", (H,), None), (p + "ln2.bias", (H,), None),
            (p + "ffn.in.weight", (H, F), H), (p + "ffn.in.bias", (F,), None),
            (p + "ffn.out.weight", (F, H), F), (p + "ffn.out.bias", (H,), None),
        ]
    shapes += [("final_norm.gain", (H,), None), ("final_norm.bias", (H,), None),
               ("head.weight", (H, cfg.vocab_size + 1), H), ("head.bias", (cfg.vocab_size + 1,), None)]
    return shapes


def parameter_count(cfg: EncoderConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in _param_shapes(cfg))


class Encoder:
    """Frontend -> convolutional positional encoding -> attention blocks -> emission head.

    ``forward`` works on a zero-padded batch ``[B, T, F]`` with per-sequence
    lengths and returns log-probabilities ``[B, T', V + 1]``.
    """

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        for name, shape, fan_in in _param_shapes(config):
            if fan_in is None:
                value = np.ones(shape) if name.endswith(".gain") else np.zeros(shape)
            else:
                bound = 1.0 / math.sqrt(fan_in)
                value = rng.uniform(-bound, bound, size=shape)
            self.params[name] = Tensor(value, requires_grad=True, name=name)

    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.value for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in state:
                raise KeyError(f"missing parameter block {k!r}")
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.shape:
                raise ValueError(f"{k}: shape {v.shape} != {p.shape}")
            p.value = v.copy()

    # ------------------------------------------------------------ forward

    def forward(self, feats: np.ndarray, lengths=None) -> tuple[Tensor, np.ndarray]:
        cfg = self.config
        P = self.params
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 3 or feats.shape[2] != cfg.feature_dim:
            raise ValueError(f"expected [B, T, {cfg.feature_dim}] features, got {feats.shape}")
        B, T, _ = feats.shape
        lengths = np.full(B, T, dtype=np.intp) if lengths is None else np.asarray(lengths, dtype=np.intp)
        if np.any(lengths < 1) or np.any(lengths > T):
            raise ValueError("lengths must lie in [1, T]")
        x = Tensor(feats)

        if cfg.conv_layers == 0:
            x = nx.glu(x @ P["frontend.0.weight"] + P["frontend.0.bias"])
        k, left, right = cfg.frontend_taps
        for i in range(cfg.conv_layers):
            x = nx.pad_time(x, left, right, axis=1)
            win = nx.frames(x, k, 2)
            b_, t_, _, c_ = win.shape
            x = nx.glu(win.reshape(b_, t_, k * c_) @ P[f"frontend.{i}.weight"] + P[f"frontend.{i}.bias"])
            lengths = (lengths + 1) // 2
            x = _zero_padding(x, lengths)

        if not cfg.context_free_mode:
            x = x + self._positional(x)
            x = nx.layer_norm(x, P["pos_norm.gain"], P["pos_norm.bias"])

        Tp = x.shape[1]
        key_bias = np.where(np.arange(Tp)[None, :] < lengths[:, None], 0.0, MASK_VALUE)[:, None, None, :]
        for i in range(cfg.layers):
            p = f"layers.{i}."
            if cfg.attention and not cfg.context_free_mode:
                h = nx.layer_norm(x, P[p + "ln1.gain"], P[p + "ln1.bias"])
                x = x + self._attention(h, p, key_bias)
            h = nx.layer_norm(x, P[p + "ln2.gain"], P[p + "ln2.bias"])
            h = nx.gelu(h @ P[p + "ffn.in.weight"] + P[p + "ffn.in.bias"])
            x = x + (h @ P[p + "ffn.out.weight"] + P[p + "ffn.out.bias"])
        x = nx.layer_norm(x, P["final_norm.gain"], P["final_norm.bias"])
        logits = x @ P["head.weight"] + P["head.bias"]
        return nx.log_softmax(logits, axis=-1), lengths

    def _positional(self, x: Tensor) -> Tensor:
        cfg = self.config
        B, T, H = x.shape
        K, G = cfg.positional_kernel, cfg.positional_groups
        Hg = H // G
        padded = nx.pad_time(x, K // 2, K - 1 - K // 2, axis=1)
        win = nx.frames(padded, K, 1)  # [B, T, K, H]
        win = win.reshape(B, T, K, G, Hg).transpose(0, 3, 1, 2, 4).reshape(B, G, T, K * Hg)
        out = (win @ self.params["pos_conv.weight"]).transpose(0, 2, 1, 3).reshape(B, T, H)
        return nx.gelu(out + self.params["pos_conv.bias"])

    def _attention(self, h: Tensor, p: str, key_bias: np.ndarray) -> Tensor:
        cfg = self.config
        B, T, H = h.shape
        nh = cfg.heads
        d = H // nh
        qkv = (h @ self.params[p + "attn.qkv.weight"] + self.params[p + "attn.qkv.bias"])
        qkv = qkv.reshape(B, T, 3, nh, d).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d)) + key_bias
        ctx = nx.softmax(scores, axis=-1) @ v  # [B, nh, T, d]
        ctx = ctx.transpose(0, 2, 1, 3).reshape(B, T, H)
        return ctx @ self.params[p + "attn.out.weight"] + self.params[p + "attn.out.bias"]

    def encode(self, features: np.ndarray) -> np.ndarray:
        """Emission lattice ``[T', V + 1]`` for one ``[T, F]`` feature matrix."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.config.feature_dim:
            raise ValueError(f"expected [T, {self.config.feature_dim}] features, got {features.shape}")
        if features.shape[0] == 0:
            return np.zeros((0, self.config.vocab_size + 1))
        with nx.no_grad():
            out, _ = self.forward(features[None])
        return out.value[0]


def _zero_padding(x: Tensor, lengths: np.ndarray) -> Tensor:
    T = x.shape[1]
    if np.all(lengths == T):
        return x
    mask = (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)[:, :, None]
    return x * mask


# ---------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"CCKP"
CKPT_VERSION = 1
_CKPT_PREFIX = struct.Struct("<4sIQ")


def save_checkpoint(path: str | os.PathLike, blocks: dict[str, np.ndarray], meta: dict) -> None:
    """Write ``<4sIQ`` (magic, version, header length), a JSON header, then float64 blocks.

    The header holds ``meta`` plus ``blocks: [{name, shape, offset}]``;
    offsets count bytes from the start of the data section. The file is
    written to a temporary sibling and renamed into place.
    """
    path = Path(path)
    index = []
    offset = 0
    for name, arr in blocks.items():
        arr = np.asarray(arr)
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += 8 * arr.size
    header = json.dumps({**meta, "blocks": index}, sort_keys=True).encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_CKPT_PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(header)))
            fh.write(header)
            for arr in blocks.values():
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CKPT_PREFIX.size:
        raise ValueError(f"{path}: truncated checkpoint")
    magic, version, hlen = _CKPT_PREFIX.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = _CKPT_PREFIX.size
    meta = json.loads(raw[start:start + hlen].decode("utf-8"))
    data = raw[start + hlen:]
    blocks = {}
    for entry in meta.pop("blocks"):
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        lo = entry["offset"]
        if lo + 8 * n > len(data):
            raise ValueError(f"{path}: block {entry['name']!r} runs past end of file")
        blocks[entry["name"]] = np.frombuffer(data, dtype="<f8", count=n, offset=lo).reshape(entry["shape"]).copy()
    return blocks, meta


def save_encoder(path, encoder: Encoder, step: int = 0, extra_blocks: dict | None = None, extra_meta: dict | None = None):
    blocks = {f"param/{k}": v for k, v in encoder.state_dict().items()}
    if extra_blocks:
        blocks.update(extra_blocks)
    meta = {"format": "chunkctc-checkpoint", "encoder_config": encoder.config.to_dict(), "step": int(step)}
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, blocks, meta)


def load_encoder(path) -> tuple[Encoder, dict, dict]:
    """Returns (encoder, non-parameter blocks, metadata)."""
    blocks, meta = load_checkpoint(path)
    cfg = EncoderConfig.from_dict(meta["encoder_config"])
    enc = Encoder(cfg, seed=0)
    enc.load_state_dict({k[len("param/"):]: v for k, v in blocks.items() if k.startswith("param/")})
    rest = {k: v for k, v in blocks.items() if not k.startswith("param/")}
    return enc, rest, meta
