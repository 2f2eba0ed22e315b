"""Alignment matrix, dual adaptive pooling and the softmax classifier."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .tensor import ShapeError, Tensor, _result, add, concat, matmul, reshape, transpose

NUM_CLASSES = 3
POOLED_SIZE = 150
DEFAULT_POOL_SHAPE = (10, 15)


def alignment_matrix(p: Tensor, h: Tensor) -> Tensor:
    """``R[i, j] = P[i] . H[j]``, an ``m x n`` matrix."""
    if p.data.ndim != 2 or h.data.ndim != 2 or p.shape[1] != h.shape[1]:
        raise ShapeError(f"alignment: premise {p.shape} and hypothesis {h.shape} differ in width")
    return matmul(p, transpose(h))


def adaptive_bins(size_in: int, size_out: int) -> list[tuple[int, int]]:
    """Half-open ``[floor(i*in/out), ceil((i+1)*in/out))`` ranges."""
    if size_in < 1 or size_out < 1:
        raise ValueError(f"pooling sizes must be positive, got {size_in} -> {size_out}")
    return [((i * size_in) // size_out, -((-(i + 1) * size_in) // size_out)) for i in range(size_out)]


@lru_cache(maxsize=512)
def _pool_plan(m: int, n: int, out_h: int, out_w: int):
    rows, cols = adaptive_bins(m, out_h), adaptive_bins(n, out_w)
    row_avg = np.zeros((out_h, m))
    for i, (a, b) in enumerate(rows):
        row_avg[i, a:b] = 1.0 / (b - a)
    col_avg = np.zeros((out_w, n))
    for j, (a, b) in enumerate(cols):
        col_avg[j, a:b] = 1.0 / (b - a)
    # padded index grids; padding slots repeat the bin's first index and are masked
    lr = max(b - a for a, b in rows)
    lc = max(b - a for a, b in cols)
    r_idx = np.array([[a + min(t, b - a - 1) for t in range(lr)] for a, b in rows])
    c_idx = np.array([[a + min(t, b - a - 1) for t in range(lc)] for a, b in cols])
    r_ok = np.array([[t < b - a for t in range(lr)] for a, b in rows])
    c_ok = np.array([[t < b - a for t in range(lc)] for a, b in cols])
    mask = r_ok[:, None, :, None] & c_ok[None, :, None, :]
    return row_avg, col_avg, r_idx, c_idx, mask.reshape(out_h, out_w, lr * lc), lc


def adaptive_pool_2d(r: Tensor, out_h: int, out_w: int, mode: str = "avg") -> Tensor:
    """Adaptive average or max pooling of a matrix to ``out_h x out_w``.

    Max-pool gradients go to the first maximal element of each bin in
    row-major order.
    """
    if r.data.ndim != 2:
        raise ShapeError(f"adaptive_pool_2d expects a matrix, got {r.shape}")
    m, n = r.shape
    row_avg, col_avg, r_idx, c_idx, mask, lc = _pool_plan(m, n, out_h, out_w)
    R = r.data
    if mode not in ("avg", "max"):
        raise ValueError(f"unknown pooling mode {mode!r}")
    # gathered[i, j, s, t] = R[r_idx[i, s], c_idx[j, t]]
    gathered = R[r_idx[:, None, :, None], c_idx[None, :, None, :]]
    flat = gathered.reshape(out_h, out_w, -1)
    if mode == "avg":
        # sequential row-major sum per bin, so results match a plain loop bit for bit
        vals = np.where(mask, flat, 0).astype(R.dtype)
        acc = np.zeros((out_h, out_w), dtype=R.dtype)
        for t in range(vals.shape[2]):
            acc = acc + vals[..., t]
        out = (acc / mask.sum(axis=2)).astype(R.dtype)
        ra = row_avg.astype(R.dtype)
        ca = col_avg.astype(R.dtype)
        return _result("avgpool", out, (r,), lambda g: (ra.T @ g @ ca,))
    flat = np.where(mask, flat, -np.inf)
    arg = flat.argmax(axis=2)
    out = np.take_along_axis(flat, arg[..., None], axis=2)[..., 0].astype(R.dtype)
    src_r = np.take_along_axis(r_idx, arg // lc, axis=1)
    src_c = c_idx[np.arange(out_w)[None, :], arg % lc]

    def backward(g):
        d = np.zeros_like(R)
        np.add.at(d, (src_r, src_c), g)
        return (d,)

    return _result("maxpool", out, (r,), backward)


def check_pool_shape(pool_shape) -> tuple[int, int]:
    h, w = (int(x) for x in pool_shape)
    if h < 1 or w < 1 or h * w != POOLED_SIZE:
        raise ValueError(f"pool shape {h}x{w} must have {POOLED_SIZE} cells")
    return h, w


def pooled_features(r: Tensor, pool_shape=DEFAULT_POOL_SHAPE) -> Tensor:
    """``concat(flatten(avgpool(R)), flatten(maxpool(R)))``, length 300."""
    h, w = check_pool_shape(pool_shape)
    v_avg = reshape(adaptive_pool_2d(r, h, w, "avg"), (h * w,))
    v_max = reshape(adaptive_pool_2d(r, h, w, "max"), (h * w,))
    return concat([v_avg, v_max], axis=0)


def classifier_logits(r: Tensor, W_v: Tensor, b_v: Tensor, pool_shape=DEFAULT_POOL_SHAPE) -> Tensor:
    v = pooled_features(r, pool_shape)
    if W_v.shape != (v.shape[0], NUM_CLASSES) or b_v.shape != (NUM_CLASSES,):
        raise ShapeError(f"classifier expects W_v {v.shape[0]}x{NUM_CLASSES}, got {W_v.shape}")
    return add(reshape(matmul(reshape(v, (1, v.shape[0])), W_v), (NUM_CLASSES,)), b_v)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def classify(r: Tensor, W_v: Tensor, b_v: Tensor, pool_shape=DEFAULT_POOL_SHAPE) -> np.ndarray:
    """Class probabilities ``softmax(V W_v + b_v)``."""
    return softmax(classifier_logits(r, W_v, b_v, pool_shape).data)
