"""AVCK checkpoint files.

Layout (little-endian)::

    b"AVCK" | u32 version | 32-byte model-config digest
    u32 count | count x tensor entry                      (parameters)
    u8 optimizer kind | u64 step | u32 count | entries    (optimizer slots)
    f64 best_val_loss | u32 epochs_since_improvement | f64 current_lr

    tensor entry: u32 name length | UTF-8 name | u32 rank | rank x u32 dims | f32 data
"""

from __future__ import annotations

import struct
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._binary import Reader
from .model import ModelConfig, init_params

AVCK_MAGIC = b"AVCK"
AVCK_VERSION = 1
OPTIMIZER_KINDS = {"none": 0, "sgd_momentum": 1, "adam": 2}
_KIND_NAMES = {v: k for k, v in OPTIMIZER_KINDS.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class OptimizerState:
    kind: str = "none"
    step: int = 0
    slots: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)


@dataclass
class SchedulerState:
    current_lr: float
    best_val_loss: float = float("inf")
    epochs_since_improvement: int = 0


@dataclass
class Checkpoint:
    params: "OrderedDict[str, np.ndarray]"
    optimizer: OptimizerState
    scheduler: SchedulerState
    digest: bytes = b"\0" * 32


def _entries(arrays) -> bytes:
    out = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    if len(ckpt.digest) != 32:
        raise CheckpointError("config digest must be 32 bytes")
    opt, sched = ckpt.optimizer, ckpt.scheduler
    return b"".join([
        AVCK_MAGIC, struct.pack("<I", AVCK_VERSION), ckpt.digest,
        _entries(ckpt.params),
        struct.pack("<BQ", OPTIMIZER_KINDS[opt.kind], opt.step), _entries(opt.slots),
        struct.pack("<dId", sched.best_val_loss, sched.epochs_since_improvement, sched.current_lr),
    ])


def _read_entries(r: Reader) -> "OrderedDict[str, np.ndarray]":
    (count,) = r.unpack("<I")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (n,) = r.unpack("<I")
        try:
            name = r.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("tensor name is not valid UTF-8") from None
        if name in out:
            raise CheckpointError(f"duplicate tensor {name!r}")
        (rank,) = r.unpack("<I")
        if rank > 8:
            raise CheckpointError(f"{name}: implausible rank {rank}")
        dims = r.unpack(f"<{rank}I")
        if any(d < 1 for d in dims):
            raise CheckpointError(f"{name}: zero-sized dimension {dims}")
        out[name] = r.floats(*dims) if dims else r.floats(1).reshape(())
    return out


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = Reader(buf, CheckpointError)
    if r.take(4) != AVCK_MAGIC:
        raise CheckpointError("bad magic: not an AVCK checkpoint")
    (version,) = r.unpack("<I")
    if version != AVCK_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = r.take(32)
    params = _read_entries(r)
    kind, step = r.unpack("<BQ")
    if kind not in _KIND_NAMES:
        raise CheckpointError(f"unknown optimizer kind {kind}")
    slots = _read_entries(r)
    best, counter, lr = r.unpack("<dId")
    if not r.at_end():
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes")
    if not (np.isfinite(lr) and lr > 0) or np.isnan(best):
        raise CheckpointError(f"invalid scheduler state lr={lr} best={best}")
    return Checkpoint(params, OptimizerState(_KIND_NAMES[kind], step, slots),
                      SchedulerState(lr, best, counter), digest)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path, cfg: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``cfg``, verify every parameter shape against it."""
    try:
        ckpt = decode_checkpoint(Path(path).read_bytes())
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    if cfg is not None:
        validate_against(ckpt, cfg)
        if ckpt.digest != cfg.digest():
            warnings.warn(f"{path}: config digest differs from the checkpoint's", stacklevel=2)
    return ckpt


def validate_against(ckpt: Checkpoint, cfg: ModelConfig) -> None:
    expected = init_params(cfg, np.random.default_rng(0))
    if list(ckpt.params) != expected.names():
        missing = set(expected.names()) ^ set(ckpt.params)
        raise CheckpointError(f"parameter names do not match config (differences: {sorted(missing)[:5]})")
    for name, t in expected.items():
        if ckpt.params[name].shape != t.shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {ckpt.params[name].shape}, "
                                  f"config {t.shape}")
    for name, arr in ckpt.optimizer.slots.items():
        base = name.split("/", 1)[-1]
        if base not in ckpt.params or ckpt.params[base].shape != arr.shape:
            raise CheckpointError(f"optimizer slot {name} does not match a parameter")
