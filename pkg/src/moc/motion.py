"""Mode-background subtraction and motion priors for grid detectors."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .core import BoundingBox, Frame, box_to_zwhere

DEFAULT_ETA = 0.5
DEFAULT_MIN_AREA = 4


@dataclass(frozen=True, eq=False)
class ModeBackground:
    image: Frame
    scope: str = "global"

    def __post_init__(self):
        if self.scope not in ("global", "local"):
            raise ValueError(f"scope must be 'global' or 'local', got {self.scope!r}")


@dataclass(frozen=True, eq=False)
class MotionPrior:
    """Motion-derived targets for one frame.

    ``loc_hat`` rows are only meaningful where ``pres_hat`` is 1; other rows are 0.
    """

    alpha_hat: np.ndarray
    pres_hat: np.ndarray
    loc_hat: np.ndarray
    boxes: tuple[BoundingBox, ...]
    grid_h: int
    grid_w: int

    @property
    def c_hat(self) -> int:
        return int(self.pres_hat.sum())

    def motion_zwheres(self) -> np.ndarray:
        return np.array([box_to_zwhere(b) for b in self.boxes]).reshape(-1, 4)


def _as_uint8(frames) -> np.ndarray:
    arr = np.stack([f.data if isinstance(f, Frame) else np.asarray(f) for f in frames])
    if arr.dtype == np.uint8:
        return arr
    return np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def compute_mode_background(frames: Sequence, scope: str = "global", chunk: int = 4096) -> ModeBackground:
    """Per-pixel, per-channel mode over a batch of frames.

    Intensities are quantized to 8-bit bins; ties go to the lower bin.
    ``frames`` may hold :class:`Frame` objects or raw (h, w, 3) arrays.
    """
    if len(frames) == 0:
        raise ValueError("mode background needs at least one frame")
    q = _as_uint8(frames)
    n = q.shape[0]
    flat = q.reshape(n, -1)
    mode = np.empty(flat.shape[1], dtype=np.uint8)
    for start in range(0, flat.shape[1], chunk):
        block = flat[:, start : start + chunk].astype(np.int64)
        width = block.shape[1]
        keys = block + 256 * np.arange(width)[None, :]
        counts = np.bincount(keys.ravel(), minlength=256 * width).reshape(width, 256)
        mode[start : start + width] = counts.argmax(axis=1)
    img = mode.reshape(q.shape[1:]).astype(np.float64) / 255.0
    return ModeBackground(Frame(img), scope)


def extract_motion_mask(frame, bg: ModeBackground, eta: float = DEFAULT_ETA) -> np.ndarray:
    data = frame.data if isinstance(frame, Frame) else np.asarray(frame)
    if data.dtype == np.uint8:
        data = data / 255.0
    ref = bg.image.data
    if data.shape != ref.shape:
        raise ValueError(f"frame shape {data.shape} does not match background {ref.shape}")
    return np.abs(data - ref).max(axis=-1) > eta


_EIGHT = np.ones((3, 3), dtype=bool)


def mask_to_boxes(mask: np.ndarray, min_area: int = DEFAULT_MIN_AREA) -> list[BoundingBox]:
    """Tight normalized boxes of the 8-connected components of ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    labels, n = ndimage.label(mask, structure=_EIGHT)
    if n == 0:
        return []
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    boxes = []
    for i, sl in enumerate(ndimage.find_objects(labels), start=1):
        if areas[i] < min_area:
            continue
        rows, cols = sl
        boxes.append(BoundingBox(cols.start / w, rows.start / h, cols.stop / w, rows.stop / h))
    return boxes


def cell_of(x: float, y: float, grid_h: int, grid_w: int) -> tuple[int, int]:
    return min(int(y * grid_h), grid_h - 1), min(int(x * grid_w), grid_w - 1)


def boxes_to_grid(boxes: Sequence[BoundingBox], grid_h: int, grid_w: int) -> tuple[np.ndarray, np.ndarray]:
    """Assign each box to the cell holding its center; the largest box wins a cell.

    Returns ``pres_hat`` (N,) in {0, 1} and ``loc_hat`` (N, 4) in ZWhere layout.
    """
    if grid_h < 1 or grid_w < 1:
        raise ValueError("grid dimensions must be at least 1")
    n = grid_h * grid_w
    pres_hat = np.zeros(n)
    loc_hat = np.zeros((n, 4))
    best_area = np.full(n, -1.0)
    for box in boxes:
        r, c = cell_of(*box.center, grid_h, grid_w)
        i = r * grid_w + c
        if box.area > best_area[i]:
            best_area[i] = box.area
            pres_hat[i] = 1.0
            loc_hat[i] = box_to_zwhere(box)
    return pres_hat, loc_hat


def extract_motion_prior(
    frame,
    bg: ModeBackground,
    eta: float = DEFAULT_ETA,
    grid_h: int = 16,
    grid_w: int = 16,
    min_area: int = DEFAULT_MIN_AREA,
) -> MotionPrior:
    alpha_hat = extract_motion_mask(frame, bg, eta)
    boxes = mask_to_boxes(alpha_hat, min_area)
    pres_hat, loc_hat = boxes_to_grid(boxes, grid_h, grid_w)
    return MotionPrior(alpha_hat, pres_hat, loc_hat, tuple(boxes), grid_h, grid_w)


def local_backgrounds(pixels: np.ndarray) -> ModeBackground:
    """Mode image of a single sequence, for scenes whose background changes."""
    return compute_mode_background(list(pixels), scope="local")
