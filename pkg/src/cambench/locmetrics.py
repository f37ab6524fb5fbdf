"""Mask construction and localization scoring: pixel, bounding-box, loose hit.

Only lesion-positive slices are scored; slices where prediction and ground
truth are both empty carry no overlap information and are excluded from
per-slice averages.  Global aggregation pools raw pixel counts across the
dataset before applying the overlap formulas.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

TAU_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    row_min: int
    col_min: int
    row_max: int
    col_max: int


@dataclass
class EvalRecord:
    slice_id: str
    loose_hit: int
    pixel_dice: float
    pixel_iou: float
    bbox_dice: float
    bbox_iou: float
    # raw counts, pooled for global aggregation
    px_inter: int
    px_pred: int
    px_gt: int
    bb_inter: int
    bb_pred: int
    bb_gt: int


@dataclass
class Summary:
    mode: str
    loose_hit_rate: float
    pixel_dice: float
    pixel_iou: float
    bbox_dice: float
    bbox_iou: float


def binarize(heatmap: np.ndarray, tau: float) -> np.ndarray:
    """Strictly-greater threshold, so tau=1 always yields an empty mask."""
    if not 0.0 <= tau <= 1.0:
        raise MetricError(f"tau must be in [0, 1], got {tau}")
    return np.asarray(heatmap) > tau


def connected_components(mask: np.ndarray) -> list[np.ndarray]:
    """8-connected components as (m, 2) pixel index arrays.

    Components are ordered by their bounding box's (row_min, col_min);
    pixels within a component are in scan order.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    comps: list[list[tuple[int, int]]] = []
    for sr in range(h):
        for sc in range(w):
            if not mask[sr, sc] or labels[sr, sc]:
                continue
            comps.append([])
            label = len(comps)
            labels[sr, sc] = label
            queue = deque([(sr, sc)])
            while queue:
                r, c = queue.popleft()
                comps[-1].append((r, c))
                for nr in range(max(r - 1, 0), min(r + 2, h)):
                    for nc in range(max(c - 1, 0), min(c + 2, w)):
                        if mask[nr, nc] and not labels[nr, nc]:
                            labels[nr, nc] = label
                            queue.append((nr, nc))
    out = [np.array(sorted(px), dtype=np.int64) for px in comps]
    out.sort(key=lambda px: (px[:, 0].min(), px[:, 1].min()))
    return out


def tight_bbox(pixels: np.ndarray) -> BBox:
    return BBox(
        row_min=int(pixels[:, 0].min()),
        col_min=int(pixels[:, 1].min()),
        row_max=int(pixels[:, 0].max()),
        col_max=int(pixels[:, 1].max()),
    )


def box_union_mask(mask: np.ndarray) -> np.ndarray:
    """Rasterize the union of tight boxes around each connected region."""
    out = np.zeros_like(np.asarray(mask, dtype=bool))
    for pixels in connected_components(mask):
        b = tight_bbox(pixels)
        out[b.row_min : b.row_max + 1, b.col_min : b.col_max + 1] = True
    return out


def pixel_overlap(m: np.ndarray, g: np.ndarray):
    """Dice and IoU plus the raw counts (inter, |M|, |G|, union)."""
    m = np.asarray(m, dtype=bool)
    g = np.asarray(g, dtype=bool)
    if m.shape != g.shape:
        raise MetricError(f"mask shapes differ: {m.shape} vs {g.shape}")
    inter = int((m & g).sum())
    nm = int(m.sum())
    ng = int(g.sum())
    union = nm + ng - inter
    dice = 2.0 * inter / (nm + ng) if nm + ng else 0.0
    iou = inter / union if union else 0.0
    return dice, iou, (inter, nm, ng, union)


def bbox_overlap(m: np.ndarray, g: np.ndarray):
    """Overlap of the rasterized box unions of the two masks."""
    return pixel_overlap(box_union_mask(m), box_union_mask(g))


def loose_hit(m: np.ndarray, g: np.ndarray) -> int:
    m = np.asarray(m, dtype=bool)
    g = np.asarray(g, dtype=bool)
    if m.shape != g.shape:
        raise MetricError(f"mask shapes differ: {m.shape} vs {g.shape}")
    return int((m & g).any())


def evaluate_slice(slice_id: str, pred: np.ndarray, gt: np.ndarray) -> EvalRecord:
    pd, pi, (inter, nm, ng, _) = pixel_overlap(pred, gt)
    bd, bi, (binter, bm, bg, _) = bbox_overlap(pred, gt)
    return EvalRecord(
        slice_id=slice_id,
        loose_hit=loose_hit(pred, gt),
        pixel_dice=pd,
        pixel_iou=pi,
        bbox_dice=bd,
        bbox_iou=bi,
        px_inter=inter,
        px_pred=nm,
        px_gt=ng,
        bb_inter=binter,
        bb_pred=bm,
        bb_gt=bg,
    )


def _pooled(inter: int, nm: int, ng: int):
    union = nm + ng - inter
    dice = 2.0 * inter / (nm + ng) if nm + ng else 0.0
    iou = inter / union if union else 0.0
    return dice, iou


def aggregate(records: list[EvalRecord], mode: str) -> Summary:
    if not records:
        raise MetricError("cannot aggregate an empty record list")
    if mode not in ("global", "per-slice"):
        raise MetricError(f"unknown aggregation mode {mode!r}")
    hit_rate = sum(r.loose_hit for r in records) / len(records)
    scored = [r for r in records if r.px_pred + r.px_gt > 0]
    if mode == "global":
        pd, pi = _pooled(sum(r.px_inter for r in scored), sum(r.px_pred for r in scored),
                         sum(r.px_gt for r in scored))
        bd, bi = _pooled(sum(r.bb_inter for r in scored), sum(r.bb_pred for r in scored),
                         sum(r.bb_gt for r in scored))
    else:
        n = len(scored)
        pd = sum(r.pixel_dice for r in scored) / n if n else 0.0
        pi = sum(r.pixel_iou for r in scored) / n if n else 0.0
        bd = sum(r.bbox_dice for r in scored) / n if n else 0.0
        bi = sum(r.bbox_iou for r in scored) / n if n else 0.0
    return Summary(mode=mode, loose_hit_rate=hit_rate, pixel_dice=pd, pixel_iou=pi,
                   bbox_dice=bd, bbox_iou=bi)


def calibrate_threshold(pairs, taus=TAU_GRID):
    """Pick the threshold maximizing global pixel Dice over (heatmap, gt) pairs.

    Ties break toward the smaller threshold.  Returns (tau, dice).
    """
    counts = {t: [0, 0, 0] for t in taus}
    n_positive = 0
    for heatmap, gt in pairs:
        gt = np.asarray(gt, dtype=bool)
        if gt.any():
            n_positive += 1
        for t in taus:
            pred = binarize(heatmap, t)
            c = counts[t]
            c[0] += int((pred & gt).sum())
            c[1] += int(pred.sum())
            c[2] += int(gt.sum())
    if n_positive == 0:
        raise MetricError("calibration split has no positive slices")
    best_tau, best_dice = None, -1.0
    for t in taus:
        dice, _ = _pooled(*counts[t])
        if dice > best_dice:
            best_tau, best_dice = t, dice
    return best_tau, best_dice
