"""Premise path: precomputed grid/RoI features, resizing, top-k selection, AVEF files.

AVEF layout (little-endian)::

    b"AVEF" | u32 version=1 | u8 kind (0 grid, 1 roi)
    grid: u32 Hf | u32 Wf | u32 d_p | Hf*Wf*d_p f32 (row-major, channel last)
    roi:  u32 k | u32 d_p | u8 has_boxes | k f32 scores | [k*4 f32 boxes] | k*d_p f32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._binary import Reader
from .encoder import EncoderConfig, attenc_forward
from .tensor import ParamStore, ShapeError, Tensor

NUM_REGIONS = 36
GRID_SIDE = 6
AVEF_MAGIC = b"AVEF"
AVEF_VERSION = 1


class FeatureFormatError(ValueError):
    pass


@dataclass
class PremiseFeatures:
    kind: str
    data: np.ndarray
    scores: np.ndarray | None = None
    boxes: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "grid":
            if self.data.ndim != 3 or min(self.data.shape) < 1:
                raise ShapeError(f"grid features must be Hf x Wf x d_p, got {self.data.shape}")
        elif self.kind == "roi":
            if self.data.ndim != 2 or min(self.data.shape) < 1:
                raise ShapeError(f"RoI features must be k x d_p, got {self.data.shape}")
            k = self.data.shape[0]
            if self.scores is None or self.scores.shape != (k,):
                raise ShapeError(f"RoI scores must have length {k}")
            if self.boxes is not None and self.boxes.shape != (k, 4):
                raise ShapeError(f"RoI boxes must be {k} x 4, got {self.boxes.shape}")
        else:
            raise ValueError(f"unknown feature kind {self.kind!r}")

    @property
    def d_p(self) -> int:
        return self.data.shape[-1]


def _axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def bilinear_resize(fmap: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of an ``H x W x C`` array."""
    if fmap.ndim != 3 or min(fmap.shape) < 1 or out_h < 1 or out_w < 1:
        raise ShapeError(f"cannot resize {fmap.shape} to {out_h}x{out_w}")
    h_lo, h_hi, wy = _axis_weights(fmap.shape[0], out_h)
    w_lo, w_hi, wx = _axis_weights(fmap.shape[1], out_w)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = fmap[h_lo][:, w_lo] * (1 - wx) + fmap[h_lo][:, w_hi] * wx
    bottom = fmap[h_hi][:, w_lo] * (1 - wx) + fmap[h_hi][:, w_hi] * wx
    return (top * (1 - wy) + bottom * wy).astype(fmap.dtype)


def prepare_grid_features(fmap: np.ndarray, d_p: int | None = None) -> np.ndarray:
    if d_p is not None and fmap.shape[-1] != d_p:
        raise ShapeError(f"grid has {fmap.shape[-1]} channels, expected {d_p}")
    resized = bilinear_resize(fmap, GRID_SIDE, GRID_SIDE)
    return resized.reshape(NUM_REGIONS, fmap.shape[-1])


def select_rois(scores: np.ndarray, limit: int = NUM_REGIONS) -> np.ndarray:
    """Indices of the top ``limit`` scores, descending; ties keep original order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")[:limit]


def prepare_roi_features(rois: np.ndarray, scores: np.ndarray) -> np.ndarray:
    if rois.ndim != 2 or scores.shape != (rois.shape[0],):
        raise ShapeError(f"RoI features {rois.shape} do not match scores {scores.shape}")
    out = np.zeros((NUM_REGIONS, rois.shape[1]), dtype=rois.dtype)
    keep = select_rois(scores)
    out[: len(keep)] = rois[keep]
    return out


def prepare_features(feats: PremiseFeatures, d_p: int | None = None) -> np.ndarray:
    """The fixed ``36 x d_p`` premise matrix for either feature kind."""
    if d_p is not None and feats.d_p != d_p:
        raise ShapeError(f"premise has d_p={feats.d_p}, model expects {d_p}")
    if feats.kind == "grid":
        return prepare_grid_features(feats.data)
    return prepare_roi_features(feats.data, feats.scores)


def encode_premise(f_p: Tensor, params: ParamStore, cfg: EncoderConfig, prefix: str = "visual") -> Tensor:
    if f_p.data.ndim != 2 or f_p.shape[0] != NUM_REGIONS:
        raise ShapeError(f"premise matrix must be {NUM_REGIONS} x d_p, got {f_p.shape}")
    return attenc_forward(f_p, params, prefix, cfg)


def _f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def encode_avef(feats: PremiseFeatures) -> bytes:
    head = AVEF_MAGIC + struct.pack("<I", AVEF_VERSION)
    if feats.kind == "grid":
        h, w, c = feats.data.shape
        return head + struct.pack("<BIII", 0, h, w, c) + _f32_bytes(feats.data)
    k, c = feats.data.shape
    has_boxes = feats.boxes is not None
    out = head + struct.pack("<BIIB", 1, k, c, int(has_boxes)) + _f32_bytes(feats.scores)
    if has_boxes:
        out += _f32_bytes(feats.boxes)
    return out + _f32_bytes(feats.data)


def decode_avef(buf: bytes) -> PremiseFeatures:
    r = Reader(buf, FeatureFormatError)
    if r.take(4) != AVEF_MAGIC:
        raise FeatureFormatError("bad magic: not an AVEF feature file")
    (version,) = r.unpack("<I")
    if version != AVEF_VERSION:
        raise FeatureFormatError(f"unsupported AVEF version {version}")
    (kind,) = r.unpack("<B")
    if kind == 0:
        h, w, c = r.unpack("<III")
        if min(h, w, c) < 1:
            raise FeatureFormatError(f"invalid grid dims {h}x{w}x{c}")
        feats = PremiseFeatures("grid", r.floats(h, w, c))
    elif kind == 1:
        k, c, has_boxes = r.unpack("<IIB")
        if min(k, c) < 1 or has_boxes not in (0, 1):
            raise FeatureFormatError(f"invalid RoI header k={k} d_p={c} has_boxes={has_boxes}")
        scores = r.floats(k)
        boxes = r.floats(k, 4) if has_boxes else None
        feats = PremiseFeatures("roi", r.floats(k, c), scores, boxes)
    else:
        raise FeatureFormatError(f"unknown feature kind {kind}")
    if not r.at_end():
        raise FeatureFormatError(f"{len(buf) - r.pos} trailing bytes after payload")
    return feats


def read_feature_file(path) -> PremiseFeatures:
    try:
        return decode_avef(Path(path).read_bytes())
    except FeatureFormatError as exc:
        raise FeatureFormatError(f"{path}: {exc}") from None


def write_feature_file(path, feats: PremiseFeatures) -> None:
    Path(path).write_bytes(encode_avef(feats))
