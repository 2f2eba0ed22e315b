"""Per-token alignment heatmaps written as binary PPM images."""

from __future__ import annotations

import math
import re
import warnings
from pathlib import Path

import numpy as np

from .model import AlignVE
from .visual import GRID_SIDE, bilinear_resize, select_rois

HEATMAP_SIZE = 240


def jet_color(t: float) -> tuple[float, float, float]:
    t = min(max(float(t), 0.0), 1.0)
    return tuple(min(max(1.5 - abs(4 * t - k), 0.0), 1.0) for k in (3, 2, 1))


def jet(t: np.ndarray) -> np.ndarray:
    """Vectorised :func:`jet_color`; appends a trailing RGB axis."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)[..., None]
    return np.clip(1.5 - np.abs(4 * t - np.array([3.0, 2.0, 1.0])), 0.0, 1.0)


def to_bytes(rgb: np.ndarray) -> np.ndarray:
    return np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary P6 with maxval 255; ``rgb`` is ``h x w x 3`` uint8."""
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P6\n(\d+) (\d+)\n255\n", raw)
    if m is None:
        raise ValueError(f"{path}: not a P6 image with maxval 255")
    w, h = int(m.group(1)), int(m.group(2))
    body = raw[m.end():]
    if len(body) != 3 * w * h:
        raise ValueError(f"{path}: expected {3 * w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


def normalize_column(col: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant column maps to 0.5 everywhere."""
    col = np.asarray(col, dtype=np.float64)
    lo, hi = col.min(), col.max()
    if hi == lo:
        return np.full_like(col, 0.5)
    return (col - lo) / (hi - lo)


def grid_heatmap(t: np.ndarray, size: int = HEATMAP_SIZE) -> np.ndarray:
    """Intensity field of a 36-value column laid out as the 6x6 grid, upsampled to ``size``."""
    cells = np.asarray(t, dtype=np.float64).reshape(GRID_SIDE, GRID_SIDE, 1)
    return bilinear_resize(cells, size, size)[..., 0]


def strip_heatmap(t: np.ndarray, cell: int = 10, width: int = 40) -> np.ndarray:
    cells = np.asarray(t, dtype=np.float64).reshape(-1, 1, 1)
    return bilinear_resize(cells, cells.shape[0] * cell, width)[..., 0]


def roi_heatmap(t: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Boxes filled with their jet colour over black, later rows painted over earlier ones."""
    w = max(1, int(math.ceil(boxes[:, 2].max())))
    h = max(1, int(math.ceil(boxes[:, 3].max())))
    canvas = np.zeros((h, w, 3))
    for value, (x1, y1, x2, y2) in zip(t, boxes):
        x1, y1 = max(0, int(math.floor(x1))), max(0, int(math.floor(y1)))
        x2, y2 = int(math.ceil(x2)), int(math.ceil(y2))
        canvas[y1:y2, x1:x2] = jet_color(value)
    return canvas


def _safe(token: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", token) or "_"


def render_heatmaps(model: AlignVE, example, out_dir) -> list[Path]:
    """Write one heatmap per hypothesis token plus ``<id>_alignment.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fwd = model.forward(example.features, example.hypothesis)
    R = fwd.alignment.data.astype(np.float64)
    feats = example.features
    written = []
    with open(out / f"{example.id}_alignment.csv", "w") as fh:
        for row in R:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    written.append(out / f"{example.id}_alignment.csv")
    boxes = None
    if feats.kind == "roi":
        keep = select_rois(feats.scores)
        if feats.boxes is None:
            warnings.warn(f"{example.id}: RoI features have no boxes; rendering a strip heatmap", stacklevel=2)
        else:
            boxes = feats.boxes[keep]
    for j, token in enumerate(fwd.tokens):
        t = normalize_column(R[:, j])
        if feats.kind == "grid":
            img = jet(grid_heatmap(t))
        elif boxes is not None:
            img = roi_heatmap(t[: len(boxes)], boxes)
        else:
            img = jet(strip_heatmap(t))
        path = out / f"{example.id}_tok{j}_{_safe(token)}.ppm"
        write_ppm(path, to_bytes(img))
        written.append(path)
    return written
