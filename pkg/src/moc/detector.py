"""Minimal trainable grid detector and the MOC training loop.

Each grid cell reads a square patch centred on it (the cell plus a margin),
taken from the frame minus the fixed mode background. One tanh hidden branch
per head, with weights shared across cells, emits ``pres``, ``loc`` and
``enc``. A linear decoder turns ``enc`` plus the cell-relative ``loc`` into
an RGBA window covering the same patch; windows are composited onto the
frame with ``alpha = 1 - prod(1 - pres * a)`` and blended with the
background. ``loc`` never warps the rendering and receives no gradient from
the decoder; ``enc`` is reached through the colour channels only.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .core import DetectedObject, Frame, GridState
from .losses import (
    DEFAULT_LAMBDA_OC,
    GUIDANCE_HORIZON,
    MotionLossWeights,
    combine_motion,
    guidance_weight,
    loc_targets,
    loss_alpha,
    loss_loc_weighted,
    loss_pres,
    oc_from_pairs,
    oc_pairs_fast,
    match_objects,
    detected_objects,
    _pair_weights,
)
from .motion import ModeBackground, compute_mode_background, extract_motion_prior
from .schedule import ScheduleParams, epoch_schedule, frame_alignment

log = logging.getLogger(__name__)

MODES = ("baseline", "motion-only", "full-moc")
PARAM_NAMES = ("w_in", "b_in", "w_pres", "b_pres", "w_loc", "b_loc", "w_enc", "b_enc", "w_rgb", "b_rgb", "w_alpha", "b_alpha")
CHECKPOINT_FORMAT = "moc-checkpoint"
CHECKPOINT_VERSION = 1


class NumericalAbort(RuntimeError):
    def __init__(self, step: int, term: str):
        super().__init__(f"non-finite loss at step {step} in term '{term}'")
        self.step = step
        self.term = term


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    frame_h: int = 128
    frame_w: int = 128
    grid_h: int = 16
    grid_w: int = 16
    patch: int = 16
    hidden: int = 64
    enc_dim: int = 32

    def __post_init__(self):
        if self.frame_h % self.grid_h or self.frame_w % self.grid_w:
            raise ValueError("frame dimensions must be divisible by the grid")
        if self.cell_h != self.cell_w:
            raise ValueError("grid cells must be square")
        if self.patch % self.cell_h or (self.patch - self.cell_h) % 2:
            raise ValueError("patch must be an odd multiple of the cell size")

    @property
    def cell_h(self) -> int:
        return self.frame_h // self.grid_h

    @property
    def cell_w(self) -> int:
        return self.frame_w // self.grid_w

    @property
    def k(self) -> int:
        return self.patch // self.cell_h

    @property
    def margin(self) -> int:
        return (self.patch - self.cell_h) // 2

    @property
    def n_cells(self) -> int:
        return self.grid_h * self.grid_w

    def shapes(self) -> dict[str, tuple[int, ...]]:
        p2 = self.patch * self.patch
        dec_in = self.enc_dim + 4
        return {
            "w_in": (p2 * 3, 3 * self.hidden),
            "b_in": (3 * self.hidden,),
            "w_pres": (self.hidden, 1),
            "b_pres": (1,),
            "w_loc": (self.hidden, 4),
            "b_loc": (4,),
            "w_enc": (self.hidden, self.enc_dim),
            "b_enc": (self.enc_dim,),
            "w_rgb": (dec_in, p2 * 3),
            "b_rgb": (p2 * 3,),
            "w_alpha": (dec_in, p2),
            "b_alpha": (p2,),
        }


@dataclass(frozen=True, eq=False)
class DetectorParams:
    arch: Architecture
    arrays: dict

    def __post_init__(self):
        expected = self.arch.shapes()
        for name in PARAM_NAMES:
            if name not in self.arrays:
                raise CheckpointError(f"missing parameter {name}")
            if tuple(self.arrays[name].shape) != expected[name]:
                raise CheckpointError(
                    f"parameter {name} has shape {tuple(self.arrays[name].shape)}, expected {expected[name]}"
                )

    def __getitem__(self, name):
        return self.arrays[name]

    @property
    def dtype(self):
        return self.arrays["w_in"].dtype

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[n].ravel() for n in PARAM_NAMES])

    def with_arrays(self, arrays: dict) -> "DetectorParams":
        return DetectorParams(self.arch, {n: arrays[n] for n in PARAM_NAMES})

    def equals(self, other: "DetectorParams") -> bool:
        return self.arch == other.arch and all(np.array_equal(self[n], other[n]) for n in PARAM_NAMES)


def init_params(arch: Architecture, seed: int, scale: float = 0.05, dtype=np.float32) -> DetectorParams:
    """All weights and biases uniform in ``[-scale, scale]``."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for n, s in arch.shapes().items():
        w = rng.uniform(-scale, scale, s)
        arrays[n] = w.astype(dtype)
    return DetectorParams(arch, arrays)


def zero_params(arch: Architecture, dtype=np.float32) -> DetectorParams:
    return DetectorParams(arch, {n: np.zeros(s, dtype=dtype) for n, s in arch.shapes().items()})


@dataclass(frozen=True)
class Guidance:
    """Motion targets blended into the decoder inputs with weight ``weight``."""

    weight: float
    pres_hat: np.ndarray  # (B, N)
    loc_hat: np.ndarray  # (B, N, 4)
    alpha_hat: np.ndarray  # (B, H, W)


@dataclass(frozen=True, eq=False)
class ForwardResult:
    pres: object  # (B, N)
    loc: object  # (B, N, 4)
    enc: object  # (B, N, d)
    alpha: object  # (B, H, W)
    recon: object  # (B, H, W, 3)

    def grid(self, arch: Architecture, b: int = 0) -> GridState:
        v = ad.value
        return GridState(arch.grid_h, arch.grid_w, v(self.pres)[b], v(self.loc)[b], v(self.enc)[b])


def extract_patches(frames: np.ndarray, arch: Architecture) -> np.ndarray:
    """(B, H, W, 3) frames to (B * N, patch * patch * 3) zero-padded cell patches."""
    m = arch.margin
    padded = np.pad(frames, ((0, 0), (m, m), (m, m), (0, 0)))
    win = ad.unfold_blocks(padded, arch.k, arch.cell_h)
    return win.reshape(frames.shape[0] * arch.n_cells, -1)


def _cell_indices(arch: Architecture) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.divmod(np.arange(arch.n_cells), arch.grid_w)
    return rows, cols


def _as_batch(frames, dtype) -> np.ndarray:
    if isinstance(frames, Frame):
        frames = frames.data[None]
    frames = np.asarray(frames)
    if frames.dtype == np.uint8:
        frames = frames / 255.0
    if frames.ndim == 3:
        frames = frames[None]
    return frames.astype(dtype, copy=False)


def forward(params, frames, background, guidance: Guidance | None = None) -> ForwardResult:
    """Run the detector on a batch of frames.

    ``params`` is a :class:`DetectorParams` or a mapping of parameter names
    to tensors (for taped passes). ``background`` is the (H, W, 3) image the
    reconstruction falls back to where ``alpha`` is low.
    """
    arch = params.arch if isinstance(params, DetectorParams) else params["arch"]
    p = params.arrays if isinstance(params, DetectorParams) else params
    dtype = ad.value(p["w_in"]).dtype
    x = _as_batch(frames, dtype)
    b, h, w, _ = x.shape
    if (h, w) != (arch.frame_h, arch.frame_w):
        raise ValueError(f"frame size {(h, w)} does not match detector {(arch.frame_h, arch.frame_w)}")
    bg = _as_batch(background.image if isinstance(background, ModeBackground) else background, dtype)[0]
    n, gh, gw, cell = arch.n_cells, arch.grid_h, arch.grid_w, arch.cell_h

    # the encoder sees the frame relative to the fixed background
    patches = extract_patches(x - bg, arch)
    # one hidden branch per head, computed as a single wide layer
    hidden = ad.tanh(patches @ p["w_in"] + p["b_in"])
    nh = arch.hidden
    h_pres, h_loc, h_enc = hidden[:, :nh], hidden[:, nh : 2 * nh], hidden[:, 2 * nh :]
    pres = ad.sigmoid(h_pres @ p["w_pres"] + p["b_pres"]).reshape(b, n)
    raw = h_loc @ p["w_loc"] + p["b_loc"]
    extent = ad.sigmoid(raw[:, :2])
    offset = ad.tanh(raw[:, 2:])
    rows, cols = _cell_indices(arch)
    base = np.tile(np.stack([(2 * cols + 1) / gw - 1.0, (2 * rows + 1) / gh - 1.0], axis=1), (b, 1)).astype(dtype)
    scale = np.array([1.0 / gw, 1.0 / gh], dtype=dtype)
    loc = ad.concat([extent, base + offset * scale], axis=1)
    enc = h_enc @ p["w_enc"] + p["b_enc"]

    pres_used, loc_used = pres, loc
    if guidance is not None and guidance.weight > 0:
        lam = guidance.weight
        pres_used = pres * (1.0 - lam) + lam * guidance.pres_hat.astype(dtype)
        on = guidance.pres_hat.reshape(b * n, 1).astype(dtype) * lam
        loc_used = loc * (1.0 - on) + on * guidance.loc_hat.reshape(b * n, 4).astype(dtype)
    # decoder sees loc relative to its own cell, centers back in [-1, 1] cell units;
    # loc is trained by the location loss only, and only rgb reconstruction reaches enc
    lv = ad.value(loc_used)
    local = np.concatenate([lv[:, :2], (lv[:, 2:] - base) / scale], axis=1)
    rgb_in = ad.concat([enc, local], axis=1)
    alpha_in = np.concatenate([ad.value(enc), local], axis=1)
    rgb = ad.sigmoid(rgb_in @ p["w_rgb"] + p["b_rgb"]).reshape(b, gh, gw, arch.patch, arch.patch, 3)
    a = ad.sigmoid(alpha_in @ p["w_alpha"] + p["b_alpha"]).reshape(b, gh, gw, arch.patch, arch.patch)

    alpha, fg = ad.composite(ad.reshape(pres_used, (b, gh, gw)), a, rgb, arch.k, cell, arch.margin)

    alpha_used = alpha
    if guidance is not None and guidance.weight > 0:
        lam = guidance.weight
        alpha_hat = guidance.alpha_hat.astype(dtype)
        alpha_used = alpha_hat if lam == 1.0 else alpha * (1.0 - lam) + lam * alpha_hat
    a3 = ad.reshape(alpha_used, (b, h, w, 1))
    recon = a3 * fg + (1.0 - a3) * bg
    return ForwardResult(pres, loc.reshape(b, n, 4), enc.reshape(b, n, arch.enc_dim), alpha, recon)


def forward_frame(params: DetectorParams, frame, background) -> tuple[GridState, np.ndarray, Frame]:
    out = forward(params, frame, background)
    recon = np.clip(ad.value(out.recon)[0].astype(np.float64), 0.0, 1.0)
    return out.grid(params.arch), ad.value(out.alpha)[0], Frame(recon)


def base_loss(recon, frame) -> ad.Tensor:
    """Mean squared reconstruction error over pixels and channels."""
    target = _as_batch(frame, ad.value(recon).dtype)
    if target.shape != np.shape(ad.value(recon)) and target.shape[1:] == np.shape(ad.value(recon)):
        target = target[0]
    if target.shape != np.shape(ad.value(recon)):
        raise ValueError("reconstruction and frame shapes differ")
    d = ad.sub(recon, target)
    return ad.mean(d * d)


def detect(params: DetectorParams, frame, background=None) -> list[DetectedObject]:
    """Objects for every cell with ``pres > 0.5``; boxes come from ``loc``."""
    return detect_batch(params, frame, background)[0]


def detect_batch(params: DetectorParams, frames, background=None) -> list[list[DetectedObject]]:
    arch = params.arch
    if background is None:
        background = np.zeros((arch.frame_h, arch.frame_w, 3))
    out = forward(params, frames, background)
    return [detected_objects(out.grid(arch, b)) for b in range(np.shape(ad.value(out.pres))[0])]


# --- training ----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 16
    steps: int = 5000
    seed: int = 0
    grid_size: int = 16
    patch: int = 16
    hidden: int = 64
    enc_dim: int = 32
    motion_weights: MotionLossWeights = MotionLossWeights()
    schedule: ScheduleParams = ScheduleParams()
    lambda_oc: float = DEFAULT_LAMBDA_OC
    eta: float = 0.5
    min_area: int = 4
    guidance_horizon: int = GUIDANCE_HORIZON
    optimizer: str = "sgd"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 1000.0
    init_scale: float = 0.05
    dtype: str = "float32"
    fast_oc: bool = False
    log_every: int = 100
    eval_every: int = 200

    def __post_init__(self):
        if isinstance(self.motion_weights, dict):
            object.__setattr__(self, "motion_weights", MotionLossWeights(**self.motion_weights))
        if isinstance(self.schedule, dict):
            object.__setattr__(self, "schedule", ScheduleParams(**self.schedule))
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.batch_size < 1 or self.steps < 0 or self.learning_rate <= 0:
            raise ValueError("batch_size >= 1, steps >= 0 and learning_rate > 0 are required")
        for name in ("init_scale", "grad_clip", "lambda_oc"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")

    def architecture(self, frame_h: int, frame_w: int) -> Architecture:
        return Architecture(frame_h, frame_w, self.grid_size, self.grid_size, self.patch, self.hidden, self.enc_dim)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class PriorCache:
    """Motion priors for every training frame, indexed by (sequence, t)."""

    alpha_hat: np.ndarray  # (S, T, H, W) bool
    pres_hat: np.ndarray  # (S, T, N)
    loc_hat: np.ndarray  # (S, T, N, 4)
    zwheres: list  # [S][T] -> (k, 4)
    boxes: list  # [S][T] -> tuple of boxes

    @classmethod
    def build(cls, pixels: np.ndarray, bg: ModeBackground, arch: Architecture, eta: float, min_area: int):
        s, t = pixels.shape[:2]
        priors = [[extract_motion_prior(pixels[i, j], bg, eta, arch.grid_h, arch.grid_w, min_area) for j in range(t)] for i in range(s)]
        return cls(
            np.array([[p.alpha_hat for p in row] for row in priors]).reshape(s, t, arch.frame_h, arch.frame_w),
            np.array([[p.pres_hat for p in row] for row in priors]).reshape(s, t, arch.n_cells),
            np.array([[p.loc_hat for p in row] for row in priors]).reshape(s, t, arch.n_cells, 4),
            [[p.motion_zwheres() for p in row] for row in priors],
            [[p.boxes for p in row] for row in priors],
        )


@dataclass
class TrainResult:
    params: DetectorParams
    config: TrainConfig
    mode: str
    steps: int
    background: ModeBackground
    trace: list = field(default_factory=list)
    schedule_trace: list = field(default_factory=list)
    eval_trace: list = field(default_factory=list)


class _Adam:
    def __init__(self, betas, lr):
        self.b1, self.b2 = betas
        self.lr = lr
        self.m, self.v, self.t = {}, {}, 0

    def step(self, arrays, grads):
        self.t += 1
        out = {}
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for n, g in grads.items():
            m = self.m.get(n, 0.0) * self.b1 + (1.0 - self.b1) * g
            v = self.v.get(n, 0.0) * self.b2 + (1.0 - self.b2) * g * g
            self.m[n], self.v[n] = m, v
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + 1e-8)
            out[n] = (arrays[n] - upd).astype(arrays[n].dtype)
        return out


def _stack_pixels(sequences) -> np.ndarray:
    return np.stack([s.pixels for s in sequences])


def batch_losses(
    params,
    arch: Architecture,
    frames: np.ndarray,
    n_seq: int,
    seq_len: int,
    background: np.ndarray,
    mode: str,
    config: TrainConfig,
    priors: dict | None,
    lambda_guid: float,
    lambda_align: float,
) -> dict:
    """All loss terms for a batch of ``n_seq`` sequences (frames flattened in order)."""
    guidance = None
    if mode != "baseline" and lambda_guid > 0:
        guidance = Guidance(lambda_guid, priors["pres_hat"], priors["loc_hat"], priors["alpha_hat"])
    out = forward(params, frames, background, guidance)
    b = frames.shape[0]
    terms = {"base": base_loss(out.recon, frames)}
    total = terms["base"]
    if mode != "baseline":
        dtype = ad.value(out.pres).dtype
        l_alpha = ad.mul(loss_alpha(out.alpha, priors["alpha_hat"].astype(dtype)), 1.0 / b)
        l_pres = ad.mul(loss_pres(out.pres, priors["pres_hat"]), 1.0 / b)
        pres_v, loc_v = ad.value(out.pres), ad.value(out.loc)
        tgt, wts = zip(*(
            loc_targets(loc_v[i], priors["loc_hat"][i], pres_v[i], priors["pres_hat"][i], priors["zwheres"][i])
            for i in range(b)
        ))
        l_loc = ad.mul(loss_loc_weighted(out.loc, np.stack(tgt), np.stack(wts)), 1.0 / b)
        terms.update(alpha=l_alpha, pres=l_pres, loc=l_loc)
        terms["motion"] = combine_motion(l_alpha, l_pres, l_loc, config.motion_weights)
        lambda_oc = config.lambda_oc if mode == "full-moc" else 0.0
        if lambda_oc > 0 and seq_len > 1:
            terms["oc"] = ad.mul(oc_batch(out, arch, n_seq, seq_len, config.fast_oc), 1.0 / (n_seq * (seq_len - 1)))
        else:
            terms["oc"] = ad.Tensor(np.zeros((), dtype=dtype))
        total = total + terms["motion"] * (1.0 - lambda_align) + terms["oc"] * (lambda_align * lambda_oc)
    terms["total"] = total
    terms["_forward"] = out
    return terms


def oc_batch(out: ForwardResult, arch: Architecture, n_seq: int, seq_len: int, fast: bool = True) -> ad.Tensor:
    """Continuity loss summed over consecutive frame pairs of every sequence."""
    n = arch.n_cells
    enc_flat = ad.reshape(out.enc, (-1, arch.enc_dim))
    all_i, all_j, all_lam = [], [], []
    for s in range(n_seq):
        for t in range(seq_len - 1):
            f0, f1 = s * seq_len + t, s * seq_len + t + 1
            g0, g1 = out.grid(arch, f0), out.grid(arch, f1)
            if fast:
                ii, jj, lam, _ = oc_pairs_fast(g0, g1)
            else:
                o0, o1 = detected_objects(g0), detected_objects(g1)
                pi, pj, lam = _pair_weights(match_objects(o0, o1))
                ii = np.array([o0[k].cell for k in pi], dtype=np.intp)
                jj = np.array([o1[k].cell for k in pj], dtype=np.intp)
            all_i.append(ii + f0 * n)
            all_j.append(jj + f1 * n)
            all_lam.append(lam)
    ii, jj, lam = (np.concatenate(x) if x else np.zeros(0) for x in (all_i, all_j, all_lam))
    return oc_from_pairs(enc_flat, enc_flat, ii.astype(np.intp), jj.astype(np.intp), lam)


def _batch_priors(cache: PriorCache, idx: np.ndarray) -> dict:
    s, t = cache.pres_hat.shape[:2]
    flat = lambda a: a[idx].reshape((len(idx) * t,) + a.shape[2:])
    return {
        "alpha_hat": flat(cache.alpha_hat),
        "pres_hat": flat(cache.pres_hat),
        "loc_hat": flat(cache.loc_hat),
        "zwheres": [cache.zwheres[i][j] for i in idx for j in range(t)],
        "boxes": [cache.boxes[i][j] for i in idx for j in range(t)],
    }


def schedule_statistics(out: ForwardResult, arch: Architecture, priors: dict) -> list:
    pres = ad.value(out.pres)
    stats = []
    for f in range(pres.shape[0]):
        pred = [o.box for o in detected_objects(out.grid(arch, f))]
        stats.append(frame_alignment(pres[f], pred, priors["boxes"][f], priors["pres_hat"][f]))
    return stats


def train(
    config: TrainConfig,
    dataset,
    mode: str = "full-moc",
    evaluator: Callable[[DetectorParams, int], dict] | None = None,
    background: ModeBackground | None = None,
    prior_factory: Callable = PriorCache.build,
) -> TrainResult:
    """Train a detector on the dataset's train split.

    ``evaluator(params, step)`` is called every ``eval_every`` steps and after
    the last step; its dicts are collected in ``eval_trace``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if len(dataset.train) == 0:
        raise ValueError("training needs a non-empty dataset")
    pixels = _stack_pixels(dataset.train)
    n_seqs, seq_len, fh, fw = pixels.shape[:4]
    arch = config.architecture(fh, fw)
    dtype = np.dtype(config.dtype)
    params = init_params(arch, config.seed, config.init_scale, dtype)
    if background is None:
        background = compute_mode_background(pixels.reshape(-1, fh, fw, 3))
    bg = background.image.data.astype(dtype)
    cache = None if mode == "baseline" else prior_factory(pixels, background, arch, config.eta, config.min_area)

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    # batch_size counts frames; whole sequences are sampled so pairs stay consecutive
    batch = min(max(1, config.batch_size // seq_len), n_seqs)
    per_epoch = math.ceil(n_seqs / batch)
    adam = _Adam(config.adam_betas, config.learning_rate) if config.optimizer == "adam" else None
    result = TrainResult(params, config, mode, 0, background)
    order = None
    lam_align = 1.0
    for step in range(config.steps):
        epoch, k = divmod(step, per_epoch)
        if k == 0:
            order = rng.permutation(n_seqs)
        idx = np.sort(order[k * batch : (k + 1) * batch])
        frames = (pixels[idx].reshape(-1, fh, fw, 3) / 255.0).astype(dtype)
        priors = None if cache is None else _batch_priors(cache, idx)
        lam_guid = 0.0 if mode == "baseline" else guidance_weight(step, config.guidance_horizon)
        if k == 0 and mode != "baseline":
            probe = forward(params, frames, bg)
            tr = epoch_schedule(schedule_statistics(probe, arch, priors), config.schedule, epoch)
            lam_align = tr.lambda_align
            result.schedule_trace.append(tr)

        with ad.Tape() as tape:
            watched = {n: tape.watch(params[n]) for n in PARAM_NAMES}
            watched["arch"] = arch
            terms = batch_losses(watched, arch, frames, len(idx), seq_len, bg, mode, config, priors, lam_guid, lam_align)
        for name, t in terms.items():
            if not name.startswith("_") and not np.isfinite(ad.value(t)).all():
                raise NumericalAbort(step, name)
        grads = dict(zip(PARAM_NAMES, tape.gradients(terms["total"], [watched[n] for n in PARAM_NAMES])))
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise NumericalAbort(step, f"gradient of {name}")
        if config.grad_clip > 0:
            norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if norm > config.grad_clip:
                grads = {n: (g * (config.grad_clip / norm)).astype(dtype) for n, g in grads.items()}
        if adam is not None:
            new = adam.step(params.arrays, grads)
        else:
            new = {n: (params[n] - config.learning_rate * grads[n]).astype(dtype) for n in PARAM_NAMES}
        params = params.with_arrays(new)
        result.steps = step + 1

        if step % config.log_every == 0 or step == config.steps - 1:
            row = {"step": step, "mode": mode, "lambda_align": lam_align, "lambda_guid": lam_guid}
            row.update({f"loss_{n}": float(ad.value(t)) for n, t in terms.items() if not n.startswith("_")})
            result.trace.append(row)
            log.info("step %d %s", step, row)
        if evaluator is not None and ((step + 1) % config.eval_every == 0 or step == config.steps - 1):
            result.eval_trace.append({"step": step + 1, **evaluator(params, step + 1)})
    result.params = params
    return result


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(path, params: DetectorParams, config: TrainConfig | None = None, step: int = 0, extra: dict | None = None) -> Path:
    shapes = params.arch.shapes()
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": dataclasses.asdict(params.arch),
        "config": None if config is None else config.to_dict(),
        "seed": None if config is None else config.seed,
        "step": step,
        "dtype": str(params.dtype),
        "shapes": {n: list(shapes[n]) for n in PARAM_NAMES},
        "params": [float(x) for x in params.flat()],
    }
    if extra:
        blob.update(extra)
    path = Path(path)
    path.write_text(json.dumps(blob, sort_keys=True) + "\n")
    return path


def load_checkpoint(path, expected: Architecture | None = None) -> tuple[DetectorParams, dict]:
    path = Path(path)
    try:
        blob = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from e
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a detector checkpoint")
    arch = Architecture(**blob["architecture"])
    if expected is not None and arch != expected:
        raise CheckpointError(f"{path}: architecture {arch} does not match expected {expected}")
    shapes = arch.shapes()
    for n in PARAM_NAMES:
        if tuple(blob["shapes"].get(n, ())) != shapes[n]:
            raise CheckpointError(f"{path}: shape manifest for {n} does not match the architecture")
    flat = np.array(blob["params"], dtype=blob.get("dtype", "float64"))
    sizes = [int(np.prod(shapes[n])) for n in PARAM_NAMES]
    if flat.size != sum(sizes):
        raise CheckpointError(f"{path}: expected {sum(sizes)} parameters, found {flat.size}")
    arrays, off = {}, 0
    for n, size in zip(PARAM_NAMES, sizes):
        arrays[n] = flat[off : off + size].reshape(shapes[n])
        off += size
    return DetectorParams(arch, arrays), blob
