"""Self-attention encoder block (AttEnc).

One block projects its input to the model width once, then applies ``layers``
rounds of multi-head scaled dot-product attention followed by::

    X <- LN2(ReLU(LN1(F_att + X) @ W_f + b_f) + F_att)

Parameters live in a :class:`~alignve.tensor.ParamStore` under a caller-chosen
prefix so the premise and hypothesis encoders never share weights.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .tensor import (
    NonFiniteError,
    ParamStore,
    ShapeError,
    Tensor,
    add,
    concat,
    layer_norm,
    matmul,
    relu,
    scale,
    softmax_rows,
    transpose,
)

SCALE_MODES = ("per_head", "pre_projection")


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 300
    heads: int = 6
    layers: int = 2
    eps: float = 1e-5
    scale: str = "per_head"

    def __post_init__(self):
        if self.d <= 0 or self.heads <= 0 or self.layers < 1:
            raise ValueError(f"invalid encoder config {self}")
        if self.d % self.heads:
            raise ValueError(f"model dim {self.d} is not divisible by {self.heads} heads")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.scale not in SCALE_MODES:
            raise ValueError(f"scale must be one of {SCALE_MODES}, got {self.scale!r}")

    @property
    def d_k(self) -> int:
        return self.d // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def init_attenc_params(store: ParamStore, prefix: str, d_in: int, cfg: EncoderConfig,
                       rng: np.random.Generator, dtype=np.float32) -> None:
    """Add one encoder's parameters to ``store`` in a fixed order."""
    d, dk = cfg.d, cfg.d_k
    store.add(f"{prefix}.input.W", glorot_uniform(rng, d_in, d, dtype))
    store.add(f"{prefix}.input.b", np.zeros(d, dtype))
    for layer in range(cfg.layers):
        p = f"{prefix}.layers.{layer}"
        for head in range(cfg.heads):
            for kind in ("W_q", "W_k", "W_v"):
                store.add(f"{p}.heads.{head}.{kind}", glorot_uniform(rng, d, dk, dtype))
        store.add(f"{p}.W_o", glorot_uniform(rng, d, d, dtype))
        store.add(f"{p}.W_f", glorot_uniform(rng, d, d, dtype))
        store.add(f"{p}.b_f", np.zeros(d, dtype))
        for ln in ("ln1", "ln2"):
            store.add(f"{p}.{ln}.gamma", np.ones(d, dtype))
            store.add(f"{p}.{ln}.beta", np.zeros(d, dtype))


def sdp_attention(q: Tensor, k: Tensor, v: Tensor, scale_by: float) -> Tensor:
    """``softmax_rows(q k^T / scale_by) v``."""
    if scale_by <= 0:
        raise ValueError("attention scale must be positive")
    if any(t.data.ndim != 2 for t in (q, k, v)) or q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"sdp_attention: q {q.shape}, k {k.shape}, v {v.shape}")
    logits = scale(matmul(q, transpose(k)), 1.0 / scale_by)
    return matmul(softmax_rows(logits), v)


def attention_scale(cfg: EncoderConfig, d_in: int) -> float:
    return math.sqrt(cfg.d_k if cfg.scale == "per_head" else d_in)


def multi_head_attention(x: Tensor, params: ParamStore, layer_prefix: str, heads: int,
                         scale_by: float) -> Tensor:
    """Concatenate per-head attention outputs in head order, then project with ``W_o``."""
    outs = []
    for h in range(heads):
        hp = f"{layer_prefix}.heads.{h}"
        outs.append(sdp_attention(matmul(x, params[f"{hp}.W_q"]),
                                  matmul(x, params[f"{hp}.W_k"]),
                                  matmul(x, params[f"{hp}.W_v"]), scale_by))
    joined = outs[0] if heads == 1 else concat(outs, axis=1)
    return matmul(joined, params[f"{layer_prefix}.W_o"])


def attenc_forward(f_in: Tensor, params: ParamStore, prefix: str, cfg: EncoderConfig) -> Tensor:
    """Encode an ``s x d_in`` sequence into ``s x d``."""
    W_in = params[f"{prefix}.input.W"]
    if f_in.data.ndim != 2 or f_in.shape[1] != W_in.shape[0]:
        raise ShapeError(f"{prefix}: input {f_in.shape} does not match projection {W_in.shape}")
    scale_by = attention_scale(cfg, W_in.shape[0])
    x = add(matmul(f_in, W_in), params[f"{prefix}.input.b"])
    for layer in range(cfg.layers):
        p = f"{prefix}.layers.{layer}"
        f_att = multi_head_attention(x, params, p, cfg.heads, scale_by)
        inner = layer_norm(add(f_att, x), params[f"{p}.ln1.gamma"], params[f"{p}.ln1.beta"], cfg.eps)
        ff = relu(add(matmul(inner, params[f"{p}.W_f"]), params[f"{p}.b_f"]))
        x = layer_norm(add(ff, f_att), params[f"{p}.ln2.gamma"], params[f"{p}.ln2.beta"], cfg.eps)
    if not np.isfinite(x.data).all():
        raise NonFiniteError(f"{prefix}: encoder output is not finite")
    return x
