"""Concept masks: self-attention clustering, IoU-driven refinement and rescaling."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from sklearn.cluster import KMeans

from .errors import ConfigError, ContractError, InitializationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RefineConfig:
    window: tuple[int, int] = (50, 80)  # inclusive sampler steps
    cadence: int = 5
    cluster_layer: str = "dec.5.self"
    kmeans_seed: int = 0
    max_iter: int = 100
    tol: float = 1e-6
    n_init: int = 1

    def __post_init__(self):
        if self.cadence < 1 or self.window[0] < 0 or self.window[1] < self.window[0]:
            raise ConfigError(f"bad refinement schedule window={self.window} cadence={self.cadence}")

    def cluster_range(self, n_concepts: int) -> tuple[int, int]:
        lo = max(n_concepts, 2)
        return lo, max(2 * n_concepts, lo)

    def is_refine_step(self, step: int) -> bool:
        lo, hi = self.window
        return lo <= step <= hi and (step - lo) % self.cadence == 0


@dataclass(frozen=True)
class SegmentationMap:
    labels: np.ndarray  # int grid, labels numbered by first appearance in raster order
    k: int

    def segments(self) -> list[np.ndarray]:
        return [self.labels == j for j in range(self.k)]


def _grid_shape(n_positions: int, grid_shape) -> tuple[int, int]:
    if grid_shape is not None:
        if grid_shape[0] * grid_shape[1] != n_positions:
            raise ContractError(f"grid {grid_shape} does not hold {n_positions} positions")
        return tuple(grid_shape)
    side = int(round(np.sqrt(n_positions)))
    if side * side != n_positions:
        raise ContractError(f"{n_positions} positions is not a square grid; pass grid_shape")
    return side, side


def _canonical(labels: np.ndarray) -> tuple[np.ndarray, int]:
    order = {}
    for lab in labels:
        order.setdefault(int(lab), len(order))
    return np.array([order[int(lab)] for lab in labels], dtype=np.int64), len(order)


def cluster_self_attention(A, k: int, grid_shape=None, seed: int = 0, max_iter: int = 100,
                           tol: float = 1e-6, n_init: int = 1) -> SegmentationMap:
    """K-Means (k-means++ init) over the rows of a self-attention matrix."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractError(f"self-attention must be square, got {A.shape}")
    shape = _grid_shape(A.shape[0], grid_shape)
    if k < 1 or k > A.shape[0]:
        raise ContractError(f"cluster count {k} outside [1, {A.shape[0]}]")
    distinct = len(np.unique(A, axis=0))
    if k > distinct:
        log.warning("only %d distinct attention rows; clustering with k=%d instead of %d", distinct, distinct, k)
        k = distinct
    if k == 1:
        return SegmentationMap(np.zeros(shape, dtype=np.int64), 1)
    km = KMeans(n_clusters=k, init="k-means++", n_init=n_init, max_iter=max_iter, tol=tol,
                random_state=seed, algorithm="lloyd")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        raw = km.fit_predict(A)
    labels, found = _canonical(raw)
    return SegmentationMap(labels.reshape(shape), found)


def matching_degree(S, M) -> float:
    """Intersection over union of two binary masks (0 when both are empty)."""
    S, M = np.asarray(S, dtype=bool), np.asarray(M, dtype=bool)
    if S.shape != M.shape:
        raise ContractError(f"mask shapes differ: {S.shape} vs {M.shape}")
    union = np.count_nonzero(S | M)
    return np.count_nonzero(S & M) / union if union else 0.0


def candidate_segments(A, n_concepts: int, config: RefineConfig, grid_shape=None) -> list[np.ndarray]:
    """Every cluster of every clustering with k in the configured range, k ascending."""
    lo, hi = config.cluster_range(n_concepts)
    out = []
    for k in range(lo, hi + 1):
        seg = cluster_self_attention(A, k, grid_shape, config.kmeans_seed, config.max_iter, config.tol, config.n_init)
        out.extend(seg.segments())
    return out


def best_match(candidates: Sequence[np.ndarray], prev) -> tuple[np.ndarray | None, float]:
    """Highest-IoU candidate against ``prev``; the first one wins ties; None if every IoU is 0."""
    best, best_iou = None, 0.0
    for cand in candidates:
        iou = matching_degree(cand, prev)
        if iou > best_iou:
            best, best_iou = cand, iou
    return best, best_iou


def resolve_overlaps(new_masks: Mapping[str, np.ndarray], old_masks: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Cells claimed by more than one new mask fall back to the old masks."""
    ids = list(new_masks)
    if not ids:
        return {}
    total = np.sum([np.asarray(new_masks[c], dtype=np.int64) for c in ids], axis=0)
    overlap = total > 1
    return {c: np.where(overlap, old_masks[c], new_masks[c]).astype(bool) for c in ids}


@dataclass
class RefineResult:
    masks: dict[str, np.ndarray]
    details: dict[str, dict] = field(default_factory=dict)


def refine_masks(A_base, A_customs: Sequence, prev_masks: Mapping[str, np.ndarray], config: RefineConfig,
                 grid_shape=None) -> RefineResult:
    """Update each concept mask from fresh self-attention clusterings.

    ``A_customs`` follows the order of ``prev_masks``. For every concept the
    best-IoU cluster against its previous mask is taken from the custom
    branch and from the base branch; their union is the candidate mask, and
    cells claimed by several concepts keep their previous assignment.
    """
    ids = list(prev_masks)
    if len(A_customs) != len(ids):
        raise ContractError(f"{len(A_customs)} custom attention maps for {len(ids)} concepts")
    n = len(ids)
    base_cands = candidate_segments(A_base, n, config, grid_shape) if n else []
    merged, details = {}, {}
    for cid, A_custom in zip(ids, A_customs):
        prev = np.asarray(prev_masks[cid], dtype=bool)
        custom, iou_c = best_match(candidate_segments(A_custom, n, config, grid_shape), prev)
        base, iou_b = best_match(base_cands, prev)
        if custom is None and base is None:
            log.warning("concept %s: every candidate has zero IoU with its previous mask; keeping it", cid)
            merged[cid] = prev
            details[cid] = {"custom_iou": 0.0, "base_iou": 0.0, "fallback": True}
            continue
        parts = [m for m in (custom, base) if m is not None]
        merged[cid] = np.logical_or.reduce(parts).reshape(prev.shape)
        details[cid] = {"custom_iou": iou_c, "base_iou": iou_b, "fallback": False}
    masks = resolve_overlaps(merged, {c: np.asarray(prev_masks[c], dtype=bool) for c in ids})
    return RefineResult(masks, details)


def disjoint_seeds(seeds: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Drop cells claimed by more than one seed region from all of them."""
    ids = list(seeds)
    if not ids:
        return {}
    total = np.sum([np.asarray(seeds[c], dtype=np.int64) for c in ids], axis=0)
    return {c: np.asarray(seeds[c], dtype=bool) & (total <= 1) for c in ids}


def init_masks_from_inversion(A_ref, seed_regions: Mapping[str, np.ndarray], config: RefineConfig,
                              grid_shape=None) -> dict[str, np.ndarray]:
    """Initial concept masks from the reference inversion's self-attention.

    Each concept takes the reference cluster that best overlaps its seed region;
    contested cells are settled by the seed regions.
    """
    if not seed_regions:
        return {}
    seeds = disjoint_seeds(seed_regions)
    cands = candidate_segments(A_ref, len(seeds), config, grid_shape)
    chosen = {}
    for cid, seed in seeds.items():
        if seed.shape != cands[0].shape:
            raise ContractError(f"seed region for {cid} is {seed.shape}, attention grid is {cands[0].shape}")
        mask, iou = best_match(cands, seed)
        if mask is None:
            raise InitializationError(f"concept {cid!r}: no reference cluster overlaps its seed region")
        chosen[cid] = mask
    return resolve_overlaps(chosen, seeds)


def rescale_mask(M, target: tuple[int, int]) -> np.ndarray:
    """Area-average resample to ``target`` then threshold at 0.5 (ties go to 1)."""
    M = np.asarray(M, dtype=np.float64)
    return _area_average(M, target) >= 0.5


def _scale_factor(src: int, dst: int) -> tuple[str, int]:
    if dst == src:
        return "same", 1
    big, small = max(src, dst), min(src, dst)
    f = big // small
    if small * f != big or f & (f - 1):
        raise ContractError(f"cannot rescale {src} -> {dst}: not a power-of-two factor")
    return ("down" if dst < src else "up"), f


def _area_average(M: np.ndarray, target) -> np.ndarray:
    h, w = M.shape
    th, tw = target
    out = M
    mode_h, fh = _scale_factor(h, th)
    mode_w, fw = _scale_factor(w, tw)
    if mode_h == "down":
        out = out.reshape(th, fh, out.shape[1]).mean(axis=1)
    elif mode_h == "up":
        out = np.repeat(out, fh, axis=0)
    if mode_w == "down":
        out = out.reshape(out.shape[0], tw, fw).mean(axis=2)
    elif mode_w == "up":
        out = np.repeat(out, fw, axis=1)
    return out


def rescale_mask_set(masks: Mapping[str, np.ndarray], target: tuple[int, int]) -> dict[str, np.ndarray]:
    """Rescale all concept masks together so they stay pairwise disjoint.

    A coarse cell that two concepts both reach 0.5 on goes to the one with the
    larger coverage, or the earlier-declared one on a tie.
    """
    ids = list(masks)
    if not ids:
        return {}
    cover = np.stack([_area_average(np.asarray(masks[c], dtype=np.float64), target) for c in ids])
    above = cover >= 0.5
    winner = np.argmax(np.where(above, cover, -1.0), axis=0)
    return {c: above[i] & (winner == i) for i, c in enumerate(ids)}


def base_mask(masks: Mapping[str, np.ndarray], shape=None) -> np.ndarray:
    """Complement of the union of all concept masks."""
    if not masks:
        if shape is None:
            raise ContractError("need a shape for the base mask of an empty mask set")
        return np.ones(shape, dtype=bool)
    return ~np.logical_or.reduce([np.asarray(m, dtype=bool) for m in masks.values()])


def pairwise_disjoint(masks: Mapping[str, np.ndarray]) -> bool:
    if not masks:
        return True
    total = np.sum([np.asarray(m, dtype=np.int64) for m in masks.values()], axis=0)
    return bool(np.all(total <= 1))
