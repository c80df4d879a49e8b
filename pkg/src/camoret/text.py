"""Closed-vocabulary tokenizer and the transformer text encoder."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ConfigError, VocabularyError
from .layers import block, init_block

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
SPECIALS = (PAD, BOS, EOS)


class Vocabulary:
    def __init__(self, words):
        tokens = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("duplicate vocabulary entries")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def pad_id(self):
        return 0

    @property
    def bos_id(self):
        return 1

    @property
    def eos_id(self):
        return 2

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:3]) != SPECIALS:
            raise VocabularyError(f"{path}: vocabulary must start with {SPECIALS}")
        return cls(lines[3:])


def tokenize(caption, vocab, max_len=16):
    """Whitespace tokenization framed by BOS/EOS; unknown words are an error."""
    words = caption.split()
    if len(words) + 2 > max_len:
        raise VocabularyError(f"caption has {len(words)} words; limit is {max_len - 2}")
    ids = [vocab.bos_id]
    for w in words:
        if w not in vocab.index:
            raise VocabularyError(f"unknown token {w!r}")
        ids.append(vocab.index[w])
    ids.append(vocab.eos_id)
    return ids


def detokenize(ids, vocab):
    return " ".join(vocab.tokens[i] for i in ids if i >= len(SPECIALS))


def pad_batch(batch, pad_id=0):
    """Stack id lists into (B, T) plus EOS positions and a key-mask bias."""
    lengths = [len(ids) for ids in batch]
    T = max(lengths)
    ids = np.full((len(batch), T), pad_id, dtype=np.int64)
    bias = np.full((len(batch), T), -np.inf)
    for i, seq in enumerate(batch):
        ids[i, : len(seq)] = seq
        bias[i, : len(seq)] = 0.0
    return ids, np.asarray(lengths) - 1, bias


@dataclass
class TextConfig:
    vocab_size: int = 64
    max_len: int = 16
    embed_dim: int = 64
    num_heads: int = 4
    num_blocks: int = 2
    mlp_ratio: int = 4
    pooling: str = "eos"

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ConfigError("text num_heads must divide embed_dim")
        if self.pooling not in ("eos", "mean"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")


class TextEncoder:
    def __init__(self, cfg, store, prefix="text", group="text"):
        self.cfg = cfg
        self.store = store
        self.prefix = prefix
        d = cfg.embed_dim
        store.normal(f"{prefix}.tok", (cfg.vocab_size, d), group)
        store.normal(f"{prefix}.pos", (cfg.max_len, d), group)
        for l in range(cfg.num_blocks):
            init_block(store, f"{prefix}.block{l}", d, cfg.mlp_ratio * d, group)
        store.ones(f"{prefix}.ln.g", (d,), group)
        store.zeros(f"{prefix}.ln.b", (d,), group)
        store.normal(f"{prefix}.proj.w", (d, d), group)
        store.zeros(f"{prefix}.proj.b", (d,), group)

    def __call__(self, batch, trace=None):
        return encode_text(self, batch, trace=trace)


def encode_text(encoder, batch, trace=None):
    """Embed a batch of id lists into (B, d) features (pre-normalisation).

    Bidirectional attention with padded keys masked out; the EOS-position
    hidden state (or the masked mean) goes through LayerNorm and a projection.
    """
    cfg, s, pre = encoder.cfg, encoder.store, encoder.prefix
    ids, eos_pos, bias = pad_batch(batch)
    if ids.shape[1] > cfg.max_len:
        raise VocabularyError(f"sequence length {ids.shape[1]} exceeds max_len {cfg.max_len}")
    if ids.max() >= cfg.vocab_size:
        raise VocabularyError(f"token id {ids.max()} outside vocabulary of {cfg.vocab_size}")
    B, T = ids.shape
    x = nx.add(nx.take_rows(s[f"{pre}.tok"], ids),
               nx.take_rows(s[f"{pre}.pos"], np.broadcast_to(np.arange(T), (B, T))))
    for l in range(cfg.num_blocks):
        x = block(x, s, f"{pre}.block{l}", cfg.num_heads, key_bias=bias, trace=trace)
    if cfg.pooling == "eos":
        pooled = x[np.arange(B), eos_pos, :]
    else:
        w = np.isfinite(bias).astype(np.float64)
        w /= w.sum(axis=1, keepdims=True)
        pooled = nx.mul_const(x, w[:, :, None]).sum(axis=1)
    h = nx.layer_norm(pooled, s[f"{pre}.ln.g"], s[f"{pre}.ln.b"])
    return nx.linear(h, s[f"{pre}.proj.w"], s[f"{pre}.proj.b"])
