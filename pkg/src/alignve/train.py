"""Training protocol: cross-entropy, SGD-momentum/Adam, plateau decay, best-checkpoint selection."""

from __future__ import annotations

import json
import logging
import math
import os
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, OptimizerState, SchedulerState, save_checkpoint
from .data import LABELS, Dataset, EmptyDatasetError
from .encoder import EncoderConfig
from .head import DEFAULT_POOL_SHAPE, check_pool_shape
from .model import AlignVE, ModelConfig, init_params
from .tensor import NonFiniteError, ParamStore, backward, cross_entropy
from .text import MAX_LEN, EmbeddingTable

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd_momentum", "adam")


class NonFiniteLossError(NonFiniteError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 100
    plateau_patience: int = 2
    decay_factor: float = 0.1
    seed: int = 12345
    pool_shape: tuple = DEFAULT_POOL_SHAPE
    max_len: int = MAX_LEN
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if not self.lr > 0 or self.batch_size < 1 or not 0 < self.decay_factor < 1:
            raise ValueError("need lr > 0, batch_size >= 1 and 0 < decay_factor < 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.max_epochs < 1 or self.plateau_patience < 1:
            raise ValueError("max_epochs and plateau_patience must be positive")
        object.__setattr__(self, "pool_shape", check_pool_shape(self.pool_shape))

    def model_config(self, d_p: int, d_h: int) -> ModelConfig:
        return ModelConfig(d_p=d_p, d_h=d_h, encoder=self.encoder, pool_shape=self.pool_shape,
                           max_len=self.max_len)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["pool_shape"] = list(self.pool_shape)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        raw = dict(raw)
        if "encoder" in raw:
            raw["encoder"] = EncoderConfig(**raw["encoder"])
        if "pool_shape" in raw:
            raw["pool_shape"] = tuple(raw["pool_shape"])
        return cls(**raw)


def sgd_momentum_step(params: ParamStore, grads, state: OptimizerState, lr: float,
                      momentum: float = 0.9) -> OptimizerState:
    """``v <- momentum * v + g; theta <- theta - lr * v``, in place."""
    state.kind = "sgd_momentum"
    for name, t in params.items():
        g = grads[name]
        if g.shape != t.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {t.shape}")
        v = state.slots.get(f"velocity/{name}")
        v = g.astype(t.dtype) if v is None else (v * t.dtype.type(momentum) + g).astype(t.dtype)
        state.slots[f"velocity/{name}"] = v
        t.data = t.data - t.dtype.type(lr) * v
    state.step += 1
    return state


def adam_step(params: ParamStore, grads, state: OptimizerState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    """Bias-corrected Adam update, in place."""
    state.kind = "adam"
    state.step += 1
    t_step = state.step
    c1 = 1.0 - beta1 ** t_step
    c2 = 1.0 - beta2 ** t_step
    for name, t in params.items():
        g = grads[name]
        if g.shape != t.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {t.shape}")
        m = state.slots.get(f"m/{name}", np.zeros_like(t.data))
        v = state.slots.get(f"v/{name}", np.zeros_like(t.data))
        m = (beta1 * m + (1 - beta1) * g).astype(t.dtype)
        v = (beta2 * v + (1 - beta2) * g * g).astype(t.dtype)
        state.slots[f"m/{name}"] = m
        state.slots[f"v/{name}"] = v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        t.data = (t.data - update).astype(t.dtype)
    return state


def plateau_update(state: SchedulerState, val_loss: float, patience: int = 2,
                   factor: float = 0.1) -> float:
    """Decay the learning rate after ``patience`` epochs without a strict improvement."""
    if val_loss < state.best_val_loss:
        state.best_val_loss = val_loss
        state.epochs_since_improvement = 0
    else:
        state.epochs_since_improvement += 1
        if state.epochs_since_improvement >= patience:
            state.current_lr *= factor
            state.epochs_since_improvement = 0
    return state.current_lr


def thread_count() -> int:
    raw = os.environ.get("ALIGNVE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"ALIGNVE_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


class _Prepared:
    """Per-example encoder inputs, computed once per dataset."""

    def __init__(self, model: AlignVE, dataset: Dataset):
        self.items = []
        for ex in dataset:
            f_p, tokens, f_h = model.inputs(ex.features, ex.hypothesis)
            self.items.append((f_p, f_h, ex.label, ex.id))

    def __len__(self):
        return len(self.items)


def example_gradient(model: AlignVE, f_p, f_h, label: int):
    """Loss and per-parameter gradients (in parameter order) for one example."""
    loss = cross_entropy(model.forward_prepared(f_p, f_h).logits, label)
    grads = backward(loss, model.params, accumulate=False)
    return loss.item(), [grads[t] for t in model.params.values()]


def _batch_gradients(model: AlignVE, prepared: _Prepared, indices, pool: ThreadPoolExecutor | None):
    def work(i):
        f_p, f_h, label, _ = prepared.items[i]
        try:
            return example_gradient(model, f_p, f_h, label)
        except NonFiniteError as exc:
            return exc

    results = list(pool.map(work, indices)) if pool is not None else [work(i) for i in indices]
    for i, res in zip(indices, results):
        if isinstance(res, Exception) or not math.isfinite(res[0]):
            raise NonFiniteLossError(f"non-finite loss on example {prepared.items[i][3]!r}: {res}")
    # fixed reduction order keeps results independent of the worker count
    total = [g.astype(np.float64) for g in results[0][1]]
    for _, grads in results[1:]:
        for acc, g in zip(total, grads):
            acc += g
    n = len(indices)
    names = model.params.names()
    mean = {name: (acc / n).astype(model.dtype) for name, acc in zip(names, total)}
    return [r[0] for r in results], mean


def evaluate(model: AlignVE, dataset: Dataset, prepared: _Prepared | None = None) -> dict:
    """Accuracy, per-class accuracy, mean loss and confusion matrix (rows = true class)."""
    prepared = prepared or _Prepared(model, dataset)
    C = len(LABELS)
    confusion = np.zeros((C, C), dtype=int)
    losses = []
    for f_p, f_h, label, _ in prepared.items:
        logits = model.forward_prepared(f_p, f_h).logits
        losses.append(cross_entropy(logits, label).item())
        confusion[label, int(np.argmax(logits.data))] += 1
    total = int(confusion.sum())
    per_class = [float(confusion[c, c] / confusion[c].sum()) if confusion[c].sum() else None
                 for c in range(C)]
    return {
        "accuracy": float(np.trace(confusion) / total) if total else 0.0,
        "per_class_accuracy": per_class,
        "mean_loss": float(np.mean(losses)) if losses else 0.0,
        "confusion": confusion.tolist(),
        "count": total,
    }


def snapshot(model: AlignVE, opt: OptimizerState, sched: SchedulerState) -> Checkpoint:
    return Checkpoint(model.params.arrays(),
                      OptimizerState(opt.kind, opt.step, OrderedDict((k, v.copy()) for k, v in opt.slots.items())),
                      replace(sched), model.cfg.digest())


@dataclass
class TrainResult:
    """Per-epoch history, the selected checkpoint and a model holding its parameters."""

    history: list
    best_epoch: int
    best: Checkpoint
    model: AlignVE


def train(cfg: TrainConfig, train_set: Dataset, val_set: Dataset, table: EmbeddingTable,
          out_dir=None, threads: int | None = None) -> TrainResult:
    """Run the full epoch loop and return the best-validation-accuracy checkpoint.

    With ``out_dir`` every epoch's checkpoint, the best checkpoint and the
    history are written there. Ties in validation accuracy keep the earliest
    epoch.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise EmptyDatasetError("training and validation sets must be non-empty")
    d_p = train_set[0].features.d_p
    model_cfg = cfg.model_config(d_p, table.dim)
    rng = np.random.default_rng(cfg.seed)
    model = AlignVE(model_cfg, init_params(model_cfg, rng), table)
    tr = _Prepared(model, train_set)
    va = _Prepared(model, val_set)
    opt = OptimizerState(cfg.optimizer)
    sched = SchedulerState(cfg.lr)
    threads = threads if threads is not None else thread_count()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    history = []
    best, best_epoch, best_acc = None, 0, -1.0
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            order = rng.permutation(len(tr))
            losses = []
            lr = sched.current_lr
            for start in range(0, len(order), cfg.batch_size):
                batch = [int(i) for i in order[start:start + cfg.batch_size]]
                batch_losses, grads = _batch_gradients(model, tr, batch, pool)
                losses.extend(batch_losses)
                if cfg.optimizer == "adam":
                    adam_step(model.params, grads, opt, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
                else:
                    sgd_momentum_step(model.params, grads, opt, lr, cfg.momentum)
            metrics = evaluate(model, val_set, va)
            if not math.isfinite(metrics["mean_loss"]):
                raise NonFiniteLossError(f"validation loss is not finite at epoch {epoch}")
            plateau_update(sched, metrics["mean_loss"], cfg.plateau_patience, cfg.decay_factor)
            ckpt = snapshot(model, opt, sched)
            record = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)),
                      "val_loss": metrics["mean_loss"], "val_accuracy": metrics["accuracy"]}
            history.append(record)
            log.info("epoch %d lr=%.3g train_loss=%.4f val_loss=%.4f val_acc=%.4f", epoch, lr,
                     record["train_loss"], record["val_loss"], record["val_accuracy"])
            if out is not None:
                save_checkpoint(out / "checkpoints" / f"epoch_{epoch:03d}.avck", ckpt)
            if metrics["accuracy"] > best_acc:
                best, best_epoch, best_acc = ckpt, epoch, metrics["accuracy"]
    finally:
        if pool is not None:
            pool.shutdown()

    model.params.load_arrays(best.params)
    if out is not None:
        save_checkpoint(out / "best.avck", best)
        (out / "history.json").write_text(json.dumps({"best_epoch": best_epoch, "epochs": history}, indent=2))
    return TrainResult(history, best_epoch, best, model)
