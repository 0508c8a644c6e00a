"""Per-epoch motion-supervision scheduling from detector/motion agreement."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import BoundingBox, boxes_array

FULL_FRAME = BoundingBox(0.0, 0.0, 1.0, 1.0)


@dataclass(frozen=True)
class ScheduleParams:
    beta_mismatch: float = 0.1
    beta_underestimation: float = 1.25

    def __post_init__(self):
        if self.beta_mismatch < 0:
            raise ValueError("beta_mismatch must be nonnegative")
        if self.beta_underestimation <= 0:
            raise ValueError("beta_underestimation must be positive")


@dataclass(frozen=True)
class FrameAlignment:
    bbms: float
    c: int
    c_hat: int


@dataclass(frozen=True)
class ScheduleTrace:
    epoch: int
    bbms: float
    c: int
    c_hat: int
    delta_align: float
    lambda_align: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def bbms(pred_boxes: Sequence[BoundingBox], motion_boxes: Sequence[BoundingBox]) -> float:
    """Sum over predicted boxes of the smallest coordinate MSE to any motion box.

    With no motion boxes, each prediction is scored against the full frame.
    """
    if not pred_boxes:
        return 0.0
    pred = boxes_array(pred_boxes)
    ref = boxes_array(motion_boxes) if motion_boxes else boxes_array([FULL_FRAME])
    mse = ((pred[:, None, :] - ref[None, :, :]) ** 2).mean(axis=-1)
    return float(mse.min(axis=1).sum())


def delta_align(bbms_value: float, c: float, c_hat: float, params: ScheduleParams = ScheduleParams()) -> float:
    if c < 0 or c_hat < 0:
        raise ValueError("object counts must be nonnegative")
    return max(bbms_value - params.beta_mismatch, 0.0) + max(c - c_hat * params.beta_underestimation, 0.0)


def lambda_align(delta: float) -> float:
    if delta < 0:
        raise ValueError("delta_align must be nonnegative")
    return 2.0 ** (-delta)


def frame_alignment(pres, pred_boxes, motion_boxes, pres_hat) -> FrameAlignment:
    """Statistics of one frame: counts are sums of rounded presences."""
    c = int(np.rint(np.asarray(pres)).sum())
    c_hat = int(np.rint(np.asarray(pres_hat)).sum())
    return FrameAlignment(bbms(pred_boxes, motion_boxes), c, c_hat)


def epoch_schedule(
    frames: Sequence[FrameAlignment], params: ScheduleParams = ScheduleParams(), epoch: int = 0
) -> ScheduleTrace:
    """Aggregate a batch (mean box score, summed counts) into the epoch's weight."""
    if not frames:
        return ScheduleTrace(epoch, 0.0, 0, 0, 0.0, 1.0)
    mean_bbms = float(np.mean([f.bbms for f in frames]))
    c = sum(f.c for f in frames)
    c_hat = sum(f.c_hat for f in frames)
    d = delta_align(mean_bbms, c, c_hat, params)
    return ScheduleTrace(epoch, mean_bbms, c, c_hat, d, lambda_align(d))
