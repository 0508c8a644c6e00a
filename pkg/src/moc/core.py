"""Shared domain types and bounding-box geometry.

All coordinates are normalized to [0, 1]; pixel coordinates only appear at
raster I/O boundaries.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

DEFAULT_SEQ_LEN = 4
DEFAULT_ENC_DIM = 32


class InvalidGroundTruth(ValueError):
    """Raised when a ground-truth box cannot serve as a reference (zero diagonal)."""


@dataclass(frozen=True, eq=False)
class Frame:
    """RGB raster with intensities in [0, 1], stored as an (h, w, 3) array."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValueError(f"frame must be (h, w, 3), got {data.shape}")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("frame intensities must lie in [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_uint8(cls, pixels: np.ndarray, dtype=np.float32) -> "Frame":
        return cls(np.asarray(pixels, dtype=dtype) / 255.0)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 3

    def __eq__(self, other):
        return isinstance(other, Frame) and np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class FrameSequence:
    frames: tuple[Frame, ...]

    def __post_init__(self):
        frames = tuple(self.frames)
        if frames:
            shape = (frames[0].height, frames[0].width)
            for f in frames[1:]:
                if (f.height, f.width) != shape:
                    raise ValueError("all frames of a sequence must share (height, width)")
        object.__setattr__(self, "frames", frames)

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, t):
        return self.frames[t]

    def as_array(self) -> np.ndarray:
        return np.stack([f.data for f in self.frames])


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise ValueError(f"inverted box: {self}")
        for v in self.as_tuple():
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"box coordinate outside [0, 1]: {self}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)


@dataclass(frozen=True)
class ZWhere:
    """Box parameters in the detector's latent layout: extents plus centers in [-1, 1]."""

    width: float
    height: float
    center_x: float
    center_y: float

    def __post_init__(self):
        if not (0.0 < self.width <= 1.0 and 0.0 < self.height <= 1.0):
            raise ValueError(f"zwhere extents must lie in (0, 1]: {self}")
        if not (-1.0 <= self.center_x <= 1.0 and -1.0 <= self.center_y <= 1.0):
            raise ValueError(f"zwhere centers must lie in [-1, 1]: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.width, self.height, self.center_x, self.center_y])

    @classmethod
    def from_array(cls, v) -> "ZWhere":
        w, h, cx, cy = (float(x) for x in v)
        return cls(w, h, cx, cy)


@dataclass(frozen=True, eq=False)
class GridState:
    """Per-cell latents of a grid detector for one frame.

    ``pres`` is (N,), ``loc`` is (N, 4) in ZWhere layout and ``enc`` is (N, d),
    with N = grid_h * grid_w in row-major cell order. Arrays may be autodiff
    tensors when the state comes out of a taped forward pass.
    """

    grid_h: int
    grid_w: int
    pres: Any
    loc: Any
    enc: Any

    def __post_init__(self):
        n = self.grid_h * self.grid_w
        if _shape(self.pres) != (n,):
            raise ValueError(f"pres must have shape ({n},), got {_shape(self.pres)}")
        if _shape(self.loc) != (n, 4):
            raise ValueError(f"loc must have shape ({n}, 4), got {_shape(self.loc)}")
        if len(_shape(self.enc)) != 2 or _shape(self.enc)[0] != n:
            raise ValueError(f"enc must have shape ({n}, d), got {_shape(self.enc)}")

    @property
    def n_cells(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def enc_dim(self) -> int:
        return _shape(self.enc)[1]

    def values(self) -> "GridState":
        """Same state with plain numpy arrays (drops any autodiff tracking)."""
        return GridState(self.grid_h, self.grid_w, _value(self.pres), _value(self.loc), _value(self.enc))


@dataclass(frozen=True, eq=False)
class DetectedObject:
    cell: int
    box: BoundingBox
    enc: np.ndarray
    pres: float
    loc: np.ndarray = field(default=None)

    def __post_init__(self):
        if not self.pres > 0.5:
            raise ValueError("detected objects require pres > 0.5")


def _value(x):
    return getattr(x, "value", x)


def _shape(x) -> tuple:
    return tuple(np.shape(_value(x)))


def zwhere_to_pos(z) -> list[float]:
    """Unclamped box in the listing's order ``[y_min, y_max, x_min, x_max]``."""
    width, height, center_x, center_y = (float(v) for v in z)
    center_x = (center_x + 1.0) / 2.0
    center_y = (center_y + 1.0) / 2.0
    x_min = center_x - width / 2
    x_max = center_x + width / 2
    y_min = center_y - height / 2
    y_max = center_y + height / 2
    return [y_min, y_max, x_min, x_max]


def zwhere_to_box(z) -> BoundingBox:
    """Convert ``(width, height, center_x, center_y)`` to a clamped BoundingBox.

    Accepts a ZWhere or any length-4 sequence in the same order. Centers are
    mapped from [-1, 1] to [0, 1]; the box is clamped per axis to the frame.
    """
    if isinstance(z, ZWhere):
        z = z.as_array()
    y_min, y_max, x_min, x_max = zwhere_to_pos(z)
    clamp = lambda v: min(1.0, max(0.0, v))
    return BoundingBox(clamp(x_min), clamp(y_min), clamp(x_max), clamp(y_max))


def box_to_zwhere(box: BoundingBox) -> np.ndarray:
    """Inverse of :func:`zwhere_to_box` for boxes inside the frame."""
    cx, cy = box.center
    return np.array([box.width, box.height, 2.0 * cx - 1.0, 2.0 * cy - 1.0])


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def center_divergence(pred: BoundingBox, gt: BoundingBox) -> float:
    """Distance between box centers, normalized by the ground-truth diagonal."""
    diag = gt.diagonal
    if diag <= 0.0:
        raise InvalidGroundTruth(f"ground-truth box has zero diagonal: {gt}")
    (px, py), (gx, gy) = pred.center, gt.center
    return math.hypot(px - gx, py - gy) / diag


def boxes_array(boxes: Sequence[BoundingBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4))
    return np.array([b.as_tuple() for b in boxes], dtype=float)
