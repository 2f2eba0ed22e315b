"""The full premise/hypothesis/alignment model."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .encoder import EncoderConfig, attenc_forward, glorot_uniform, init_attenc_params
from .head import (
    DEFAULT_POOL_SHAPE,
    NUM_CLASSES,
    POOLED_SIZE,
    alignment_matrix,
    check_pool_shape,
    classifier_logits,
    softmax,
)
from .tensor import ParamStore, Tensor
from .text import MAX_LEN, EmbeddingTable, hypothesis_input
from .visual import PremiseFeatures, encode_premise, prepare_features


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters plus the input widths taken from data."""

    d_p: int
    d_h: int
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pool_shape: tuple = DEFAULT_POOL_SHAPE
    max_len: int = MAX_LEN

    def __post_init__(self):
        object.__setattr__(self, "pool_shape", check_pool_shape(self.pool_shape))
        if self.d_p < 1 or self.d_h < 1 or self.max_len < 1:
            raise ValueError(f"invalid model dims d_p={self.d_p} d_h={self.d_h} max_len={self.max_len}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["pool_shape"] = list(self.pool_shape)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        raw = dict(raw)
        raw["encoder"] = EncoderConfig(**raw.get("encoder", {}))
        raw["pool_shape"] = tuple(raw.get("pool_shape", DEFAULT_POOL_SHAPE))
        return cls(**raw)

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> ParamStore:
    """Glorot-uniform weights, zero biases, unit layer-norm gains, in a fixed order."""
    store = ParamStore()
    init_attenc_params(store, "visual", cfg.d_p, cfg.encoder, rng, dtype)
    init_attenc_params(store, "text", cfg.d_h, cfg.encoder, rng, dtype)
    store.add("classifier.W_v", glorot_uniform(rng, 2 * POOLED_SIZE, NUM_CLASSES, dtype))
    store.add("classifier.b_v", np.zeros(NUM_CLASSES, dtype))
    return store


@dataclass
class Forward:
    logits: Tensor
    alignment: Tensor
    tokens: list

    @property
    def probabilities(self) -> np.ndarray:
        return softmax(self.logits.data)


class AlignVE:
    """Parameters, frozen embeddings and the forward pass."""

    def __init__(self, cfg: ModelConfig, params: ParamStore, table: EmbeddingTable):
        if table.dim != cfg.d_h:
            raise ValueError(f"embedding dim {table.dim} does not match d_h={cfg.d_h}")
        self.cfg = cfg
        self.params = params
        self.table = table

    @classmethod
    def initialize(cls, cfg: ModelConfig, table: EmbeddingTable, seed: int = 12345,
                   dtype=np.float32) -> "AlignVE":
        return cls(cfg, init_params(cfg, np.random.default_rng(seed), dtype), table)

    @property
    def dtype(self):
        return self.params["classifier.W_v"].dtype

    def inputs(self, premise: PremiseFeatures, hypothesis: str) -> tuple[np.ndarray, list, np.ndarray]:
        """Prepared ``36 x d_p`` premise, tokens and ``n x d_h`` hypothesis input."""
        f_p = prepare_features(premise, self.cfg.d_p).astype(self.dtype)
        tokens, f_h = hypothesis_input(hypothesis, self.table, self.cfg.max_len, self.dtype)
        return f_p, tokens, f_h

    def forward_prepared(self, f_p: np.ndarray, f_h: np.ndarray, tokens=None) -> Forward:
        enc = self.cfg.encoder
        P = encode_premise(Tensor(f_p.astype(self.dtype, copy=False)), self.params, enc, "visual")
        H = attenc_forward(Tensor(f_h.astype(self.dtype, copy=False)), self.params, "text", enc)
        R = alignment_matrix(P, H)
        logits = classifier_logits(R, self.params["classifier.W_v"], self.params["classifier.b_v"],
                                   self.cfg.pool_shape)
        return Forward(logits, R, tokens or [])

    def forward(self, premise: PremiseFeatures, hypothesis: str) -> Forward:
        f_p, tokens, f_h = self.inputs(premise, hypothesis)
        return self.forward_prepared(f_p, f_h, tokens)

    def predict(self, premise: PremiseFeatures, hypothesis: str) -> np.ndarray:
        return self.forward(premise, hypothesis).probabilities
