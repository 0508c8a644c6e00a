"""Motion-supervision and object-continuity losses.

Every loss accepts numpy arrays or autodiff tensors and returns a
:class:`~moc.autodiff.Tensor` (use ``float(...)`` for a plain number).
Hard indicators such as ``pres > 0.5`` and the matching argselects are
evaluated on values and treated as constants during differentiation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .core import DetectedObject, GridState, zwhere_to_box
from .motion import MotionPrior

MATCH_WEIGHT = -5.0
MISMATCH_WEIGHT = 1.0
DEFAULT_LAMBDA_OC = 10.0
GUIDANCE_HORIZON = 3000


@dataclass(frozen=True)
class MotionLossWeights:
    lambda_alpha: float = 100.0
    lambda_pres: float = 1000.0
    lambda_loc: float = 10000.0

    def __post_init__(self):
        for name in ("lambda_alpha", "lambda_pres", "lambda_loc"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")


@dataclass(frozen=True)
class MatchPair:
    t_index: int
    t1_index: int
    matched: bool
    similarity: float


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[MatchPair, ...]
    evaluations: int = 0

    def matched(self) -> list[MatchPair]:
        return [p for p in self.pairs if p.matched]


def _check_same_shape(a, b, what):
    if np.shape(ad.value(a)) != np.shape(ad.value(b)):
        raise ValueError(f"{what}: shape mismatch {np.shape(ad.value(a))} vs {np.shape(ad.value(b))}")


def loss_alpha(alpha, alpha_hat) -> ad.Tensor:
    """Sum of squared differences between the mixing map and the motion mask."""
    _check_same_shape(alpha, alpha_hat, "loss_alpha")
    d = ad.sub(alpha, np.asarray(ad.value(alpha_hat), dtype=ad.value(alpha).dtype))
    return ad.sum(d * d)


def loss_pres(pres, pres_hat) -> ad.Tensor:
    _check_same_shape(pres, pres_hat, "loss_pres")
    d = ad.sub(pres, np.asarray(pres_hat, dtype=ad.value(pres).dtype))
    return ad.sum(d * d)


def loc_targets(loc, loc_hat, pres, pres_hat, motion_zwheres=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell regression target and weight for the location loss.

    The weight counts both indicator terms: a cell with ``pres_hat > 0.5``
    regresses onto ``loc_hat`` once, plus once more if ``pres > 0.5``. A cell
    the model marks present but motion does not regresses onto the nearest
    motion box (in ZWhere space), or contributes nothing when there is none.
    """
    loc = np.asarray(ad.value(loc))
    pres = np.asarray(ad.value(pres))
    pres_hat = np.asarray(pres_hat)
    loc_hat = np.asarray(loc_hat, dtype=float)
    if not (loc.shape == loc_hat.shape and pres.shape == pres_hat.shape == loc.shape[:1]):
        raise ValueError("loss_loc: length mismatch between loc, loc_hat, pres, pres_hat")
    on_model = pres > 0.5
    on_motion = pres_hat > 0.5
    targets = np.where(on_motion[:, None], loc_hat, 0.0)
    weights = on_model.astype(float) + on_motion.astype(float)
    stray = on_model & ~on_motion
    if stray.any():
        zs = np.zeros((0, 4)) if motion_zwheres is None else np.asarray(motion_zwheres, dtype=float).reshape(-1, 4)
        if len(zs) == 0:
            weights[stray] = 0.0
        else:
            d2 = ((loc[stray][:, None, :] - zs[None, :, :]) ** 2).sum(-1)
            targets[stray] = zs[d2.argmin(axis=1)]
    return targets, weights


def loss_loc_weighted(loc, targets, weights) -> ad.Tensor:
    dtype = ad.value(loc).dtype
    d = ad.sub(loc, targets.astype(dtype))
    return ad.sum(ad.sum(d * d, axis=-1) * weights.astype(dtype))


def loss_loc(loc, loc_hat, pres, pres_hat, motion_zwheres=None) -> ad.Tensor:
    targets, weights = loc_targets(loc, loc_hat, pres, pres_hat, motion_zwheres)
    return loss_loc_weighted(loc, targets, weights)


def combine_motion(l_alpha, l_pres, l_loc, weights: MotionLossWeights) -> ad.Tensor:
    return (
        ad.mul(l_alpha, weights.lambda_alpha)
        + ad.mul(l_pres, weights.lambda_pres)
        + ad.mul(l_loc, weights.lambda_loc)
    )


def motion_loss(grid: GridState, prior: MotionPrior, alpha, weights: MotionLossWeights = MotionLossWeights()) -> ad.Tensor:
    """Weighted sum of the mixing-map, presence and location losses for one frame."""
    return combine_motion(
        loss_alpha(alpha, prior.alpha_hat.astype(float)),
        loss_pres(grid.pres, prior.pres_hat),
        loss_loc(grid.loc, prior.loc_hat, grid.pres, prior.pres_hat, prior.motion_zwheres()),
        weights,
    )


def guidance_weight(step: int, horizon: int = GUIDANCE_HORIZON) -> float:
    """Linear decay from 1 at step 0 to 0 at ``horizon``, then 0."""
    if horizon <= 0:
        return 0.0
    return max(0.0, 1.0 - step / horizon)


def guidance_mix(v, v_hat, lambda_guid: float):
    """Convex blend ``lambda_guid * v_hat + (1 - lambda_guid) * v``."""
    if not 0.0 <= lambda_guid <= 1.0:
        raise ValueError(f"lambda_guid must lie in [0, 1], got {lambda_guid}")
    _check_same_shape(v, v_hat, "guidance_mix")
    if lambda_guid == 0.0:
        return v
    v_hat = np.asarray(ad.value(v_hat), dtype=ad.value(v).dtype)
    if lambda_guid == 1.0:
        return v_hat if not isinstance(v, ad.Tensor) else ad.Tensor(v_hat)
    mixed = ad.add(ad.mul(v, 1.0 - lambda_guid), lambda_guid * v_hat)
    return mixed if isinstance(v, ad.Tensor) else mixed.value


# --- object continuity -----------------------------------------------------


def cosine_similarity(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def detected_objects(grid: GridState) -> list[DetectedObject]:
    g = grid.values()
    objs = []
    for i in np.flatnonzero(g.pres > 0.5):
        objs.append(DetectedObject(int(i), zwhere_to_box(g.loc[i]), g.enc[i], float(g.pres[i]), g.loc[i]))
    return objs


def _cos_matrix(e_t: np.ndarray, e_t1: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(e_t, axis=1)
    nb = np.linalg.norm(e_t1, axis=1)
    safe = lambda n: np.where(n > 0, n, 1.0)
    cos = (e_t / safe(na)[:, None]) @ (e_t1 / safe(nb)[:, None]).T
    cos[na == 0, :] = 0.0
    cos[:, nb == 0] = 0.0
    return cos


def _centers(objs: Sequence[DetectedObject]) -> np.ndarray:
    return np.array([o.box.center for o in objs], dtype=float).reshape(-1, 2)


def _match(objs_t, objs_t1, candidates: list[np.ndarray]) -> MatchResult:
    """Shared matcher: ``candidates[a]`` lists t+1 positions visible to object a."""
    if not objs_t or not objs_t1:
        return MatchResult((), 0)
    order = np.argsort([o.cell for o in objs_t1], kind="stable")
    rank = np.empty(len(objs_t1), dtype=int)
    rank[order] = np.arange(len(objs_t1))
    enc_t = np.array([np.asarray(o.enc, dtype=float) for o in objs_t]).reshape(len(objs_t), -1)
    enc_t1 = np.array([np.asarray(o.enc, dtype=float) for o in objs_t1]).reshape(len(objs_t1), -1)
    ct, ct1 = _centers(objs_t), _centers(objs_t1)
    pairs, evals = [], 0
    for a, cand in enumerate(candidates):
        if len(cand) == 0:
            continue
        cand = cand[np.argsort(rank[cand], kind="stable")]  # lowest cell first wins ties
        sims = _cos_matrix(enc_t[a : a + 1], enc_t1[cand])[0]
        dists = np.hypot(*(ct1[cand] - ct[a]).T)
        evals += len(cand)
        best_enc = cand[int(np.argmax(sims))]
        best_loc = cand[int(np.argmin(dists))]
        for b, s in zip(cand, sims):
            pairs.append(MatchPair(a, int(b), bool(b == best_enc == best_loc), float(s)))
    return MatchResult(tuple(pairs), evals)


def match_objects(omega_t: Sequence[DetectedObject], omega_t1: Sequence[DetectedObject]) -> MatchResult:
    """Pair every object at t with every object at t+1 and flag the matches.

    An object is matched to the t+1 object that is both its most similar
    encoding (cosine) and its nearest box center; ties go to the lowest cell.
    """
    if omega_t and omega_t1 and len(omega_t[0].enc) != len(omega_t1[0].enc):
        raise ValueError("encoding dimensions differ between frames")
    everything = np.arange(len(omega_t1))
    return _match(omega_t, omega_t1, [everything] * len(omega_t))


def match_objects_3x3(omega_t, omega_t1, grid_w: int) -> MatchResult:
    """Matching restricted to t+1 objects in the 3x3 cell neighborhood."""
    by_cell = {o.cell: j for j, o in enumerate(omega_t1)}
    candidates = []
    for o in omega_t:
        r, c = divmod(o.cell, grid_w)
        near = [
            by_cell[(r + dr) * grid_w + (c + dc)]
            for dr in (-1, 0, 1)
            for dc in (-1, 0, 1)
            if 0 <= c + dc < grid_w and ((r + dr) * grid_w + (c + dc)) in by_cell
        ]
        candidates.append(np.array(near, dtype=int))
    return _match(omega_t, omega_t1, candidates)


def _pair_weights(result: MatchResult):
    ii = np.array([p.t_index for p in result.pairs], dtype=np.intp)
    jj = np.array([p.t1_index for p in result.pairs], dtype=np.intp)
    lam = np.array([MATCH_WEIGHT if p.matched else MISMATCH_WEIGHT for p in result.pairs])
    return ii, jj, lam


def oc_from_pairs(enc_t, enc_t1, ii, jj, lam, eps: float = 1e-12) -> ad.Tensor:
    """``sum(lam * cos(enc_t[ii], enc_t1[jj]))``, differentiable in both encodings."""
    if len(ii) == 0:
        return ad.Tensor(np.zeros((), dtype=ad.value(enc_t).dtype))
    dtype = ad.value(enc_t).dtype
    a = ad.take_rows(enc_t, ii)
    b = ad.take_rows(enc_t1, jj)
    inv_a = 1.0 / ad.sqrt(ad.maximum(ad.sum(a * a, axis=1), eps * eps))
    inv_b = 1.0 / ad.sqrt(ad.maximum(ad.sum(b * b, axis=1), eps * eps))
    cos = ad.sum(a * b, axis=1) * inv_a * inv_b
    return ad.sum(cos * lam.astype(dtype))


def _objects_and_enc(x):
    if isinstance(x, GridState):
        objs = detected_objects(x)
        return objs, x.enc, np.array([o.cell for o in objs], dtype=np.intp)
    objs = list(x)
    if not objs:
        return objs, np.zeros((0, 0)), np.zeros(0, dtype=np.intp)
    enc = np.array([np.asarray(o.enc, dtype=float) for o in objs]).reshape(len(objs), -1)
    return objs, enc, np.arange(len(objs))


def oc_loss_naive(omega_t, omega_t1) -> ad.Tensor:
    """Contrastive continuity loss over all pairs of consecutive-frame objects.

    Accepts lists of :class:`DetectedObject` or :class:`GridState` values; with
    grid states whose ``enc`` is a tensor, the result is differentiable.
    """
    objs_t, enc_t, rows_t = _objects_and_enc(omega_t)
    objs_t1, enc_t1, rows_t1 = _objects_and_enc(omega_t1)
    ii, jj, lam = _pair_weights(match_objects(objs_t, objs_t1))
    return oc_from_pairs(enc_t, enc_t1, rows_t[ii], rows_t1[jj], lam)


def oc_pairs_fast(grid_t: GridState, grid_t1: GridState):
    """Cell-index pairs, weights and evaluation count for the 3x3 variant."""
    if (grid_t.grid_h, grid_t.grid_w) != (grid_t1.grid_h, grid_t1.grid_w):
        raise ValueError("grids must share dimensions")
    objs_t, objs_t1 = detected_objects(grid_t), detected_objects(grid_t1)
    result = match_objects_3x3(objs_t, objs_t1, grid_t.grid_w)
    ii, jj, lam = _pair_weights(result)
    rows_t = np.array([o.cell for o in objs_t], dtype=np.intp)
    rows_t1 = np.array([o.cell for o in objs_t1], dtype=np.intp)
    return rows_t[ii] if len(ii) else ii, rows_t1[jj] if len(jj) else jj, lam, result.evaluations


def oc_loss_fast(grid_t: GridState, grid_t1: GridState) -> ad.Tensor:
    ii, jj, lam, _ = oc_pairs_fast(grid_t, grid_t1)
    return oc_from_pairs(grid_t.enc, grid_t1.enc, ii, jj, lam)


def moc_loss(base_loss, motion, oc, lambda_align: float, lambda_oc: float = DEFAULT_LAMBDA_OC):
    """Baseline loss plus motion and continuity terms balanced by ``lambda_align``."""
    if not 0.0 <= lambda_align <= 1.0:
        raise ValueError(f"lambda_align must lie in [0, 1], got {lambda_align}")
    return ad.add(ad.add(base_loss, ad.mul(motion, 1.0 - lambda_align)), ad.mul(oc, lambda_align * lambda_oc))
