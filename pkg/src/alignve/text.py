"""Hypothesis path: tokenizer, frozen word embeddings, sinusoidal positions."""

from __future__ import annotations

import string
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, attenc_forward
from .tensor import ParamStore, Tensor

MAX_LEN = 64
_PUNCT = set(string.punctuation)


class EmptyHypothesisError(ValueError):
    pass


class EmbeddingFormatError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingTable:
    """Token -> row lookup over a read-only ``V x d_h`` matrix."""

    vocab: dict
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors.setflags(write=False)
        if any(not 0 <= i < len(self.vectors) for i in self.vocab.values()):
            raise ValueError("vocabulary index out of range")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]


def load_embeddings(path) -> EmbeddingTable:
    """Read a GloVe-style text file: ``token v1 v2 ...`` per line.

    The dimension is taken from the first line. Duplicate tokens keep their
    first vector and emit a warning.
    """
    vocab: dict[str, int] = {}
    rows: list[np.ndarray] = []
    dim = None
    duplicates = 0
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise EmbeddingFormatError(f"{path}: not valid UTF-8 ({exc.reason})") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.rstrip().split(" ")
        token, fields = parts[0], parts[1:]
        if not token or not fields:
            raise EmbeddingFormatError(f"{path}:{lineno}: expected a token followed by numbers")
        try:
            vec = np.array([float(x) for x in fields], dtype=np.float32)
        except ValueError:
            raise EmbeddingFormatError(f"{path}:{lineno}: non-numeric field") from None
        if not np.isfinite(vec).all():
            raise EmbeddingFormatError(f"{path}:{lineno}: non-finite value")
        if dim is None:
            dim = len(vec)
        elif len(vec) != dim:
            raise EmbeddingFormatError(f"{path}:{lineno}: dimension {len(vec)} differs from {dim}")
        if token in vocab:
            duplicates += 1
            continue
        vocab[token] = len(rows)
        rows.append(vec)
    if dim is None:
        raise EmbeddingFormatError(f"{path}: no embeddings found")
    if duplicates:
        warnings.warn(f"{path}: {duplicates} duplicate token(s); first occurrence kept", stacklevel=2)
    return EmbeddingTable(vocab, np.stack(rows))


def write_embeddings(path, table: EmbeddingTable) -> None:
    inverse = sorted(table.vocab.items(), key=lambda kv: kv[1])
    with open(path, "w", encoding="utf-8") as fh:
        for token, idx in inverse:
            fh.write(token + " " + " ".join(repr(float(v)) for v in table.vectors[idx]) + "\n")


def _split_punct(word: str) -> list[str]:
    lead, trail = [], []
    while word and word[0] in _PUNCT:
        lead.append(word[0])
        word = word[1:]
    while word and word[-1] in _PUNCT:
        trail.append(word[-1])
        word = word[:-1]
    return lead + ([word] if word else []) + trail[::-1]


def tokenize(text: str, max_len: int = MAX_LEN) -> list[str]:
    """Lowercase, split on whitespace, peel leading/trailing punctuation into tokens."""
    tokens = [t for word in text.lower().split() for t in _split_punct(word)]
    if not tokens:
        raise EmptyHypothesisError("hypothesis is empty")
    return tokens[:max_len]


def embed(tokens: list[str], table: EmbeddingTable, dtype=np.float32) -> np.ndarray:
    """Stack table rows for ``tokens``; unknown tokens become zero rows."""
    out = np.zeros((len(tokens), table.dim), dtype=dtype)
    for j, tok in enumerate(tokens):
        idx = table.vocab.get(tok)
        if idx is not None:
            out[j] = table.vectors[idx]
    return out


def positional_encoding(n: int, d: int) -> np.ndarray:
    if d % 2:
        raise ValueError(f"positional encoding needs an even dimension, got {d}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    freq = np.power(10000.0, np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.empty((n, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(pos / freq)
    pe[:, 1::2] = np.cos(pos / freq)
    return pe


def hypothesis_input(text: str, table: EmbeddingTable, max_len: int = MAX_LEN,
                     dtype=np.float32) -> tuple[list[str], np.ndarray]:
    """Tokens and the encoder input ``embed(tokens) + PE``."""
    tokens = tokenize(text, max_len)
    feats = embed(tokens, table, np.float64) + positional_encoding(len(tokens), table.dim)
    return tokens, feats.astype(dtype)


def encode_hypothesis(text: str, table: EmbeddingTable, params: ParamStore, cfg: EncoderConfig,
                      prefix: str = "text", max_len: int = MAX_LEN) -> Tensor:
    dtype = params[f"{prefix}.input.W"].dtype
    _, feats = hypothesis_input(text, table, max_len, dtype)
    return attenc_forward(Tensor(feats), params, prefix, cfg)

