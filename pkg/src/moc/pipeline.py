"""Train-then-evaluate helpers shared by the CLI, scripts and acceptance tests."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .config import EvalConfig, RunConfig
from .detector import DetectorParams, TrainResult, detect_batch, train
from .evaluation import MetricsReport, evaluate_detections
from .motion import ModeBackground, compute_mode_background
from .synthgen import Dataset


def train_background(dataset: Dataset) -> ModeBackground:
    pixels = np.concatenate([s.pixels for s in dataset.train])
    return compute_mode_background(pixels)


def split_frames(dataset: Dataset, split: str = "test") -> tuple[np.ndarray, list]:
    seqs = dataset.split(split)
    frames = np.concatenate([s.pixels for s in seqs])
    labels = [lab for s in seqs for lab in s.labels]
    return frames, labels


def relevant_classes(dataset: Dataset) -> list[int]:
    return sorted(c.class_id for c in dataset.config.classes)


def evaluate_params(
    params: DetectorParams,
    dataset: Dataset,
    background: ModeBackground,
    eval_config: EvalConfig = EvalConfig(),
    split: str = "test",
    with_ap: bool = True,
    chunk: int = 64,
) -> MetricsReport:
    frames, labels = split_frames(dataset, split)
    dets = []
    for i in range(0, len(frames), chunk):
        dets.extend(detect_batch(params, frames[i : i + chunk], background))
    return evaluate_detections(
        dets,
        labels,
        relevant_classes(dataset),
        eval_config.match_config(),
        eval_config.all_objects,
        eval_config.seed,
        eval_config.few_shot_sizes,
        with_ap,
        eval_config.ami_average,
        eval_config.ridge_alpha,
    )


@dataclass
class RunOutcome:
    mode: str
    seed: int
    result: TrainResult
    report: MetricsReport
    seconds: float


def run(
    config: RunConfig,
    dataset: Dataset,
    mode: str,
    seed: int | None = None,
    steps: int | None = None,
    background: ModeBackground | None = None,
    trace_eval: bool = False,
) -> RunOutcome:
    """Train one detector and evaluate it on the test split.

    With ``trace_eval`` the metrics are also collected every ``eval_every`` steps.
    """
    tc = config.train
    if seed is not None:
        tc = replace(tc, seed=seed)
    if steps is not None:
        tc = replace(tc, steps=steps)
    background = background or train_background(dataset)
    evaluator = None
    if trace_eval:
        evaluator = lambda params, step: evaluate_params(params, dataset, background, config.eval, with_ap=False).as_dict()
    start = time.perf_counter()
    result = train(tc, dataset, mode, evaluator=evaluator, background=background)
    report = evaluate_params(result.params, dataset, background, config.eval)
    return RunOutcome(mode, tc.seed, result, report, time.perf_counter() - start)
