"""End-to-end benchmark orchestration shared by the CLI and the service.

A run has two passes over lesion-positive slices: an optional calibration
pass that sweeps thresholds on one split and pools pixel counts, then an
evaluation pass that scores the other split at the chosen threshold.  Slices
are independent, so both passes fan out over a thread pool; results are
reduced in manifest order, which keeps outputs byte-identical for any
``jobs`` value.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cams import CAM_METHODS, compute_cam, postprocess
from .classify import ScoredSlice
from .dataset import SliceRecord, load_slice, read_manifest, window_hu
from .engine import forward, gradients_at, make_rescorer
from .locmetrics import (EvalRecord, TAU_GRID, aggregate, binarize,
                         calibrate_threshold, evaluate_slice)
from .modelio import Network, load_network

AGG_MODES = ("global", "per-slice")


class BenchmarkError(ValueError):
    pass


@dataclass
class RunConfig:
    spec_path: str = ""
    weights_path: str = ""
    manifest_path: str = ""
    methods: list[str] = field(default_factory=lambda: list(CAM_METHODS))
    layers: list[str] = field(default_factory=lambda: ["-1", "-2", "-3"])
    class_index: int = 1
    tau: str = "calibrate"  # "calibrate" or a fixed value like "0.5"
    calibration_split: str = "train"
    modes: list[str] = field(default_factory=lambda: list(AGG_MODES))
    jobs: int = 0  # 0 = one per available core
    out_dir: str = ""

    def validate(self) -> None:
        for m in self.methods:
            if m not in CAM_METHODS:
                raise BenchmarkError(f"unknown CAM method {m!r}")
        for mode in self.modes:
            if mode not in AGG_MODES:
                raise BenchmarkError(f"unknown aggregation mode {mode!r}")
        if self.calibration_split not in ("train", "test"):
            raise BenchmarkError(f"unknown calibration split {self.calibration_split!r}")
        if self.tau != "calibrate":
            try:
                v = float(self.tau)
            except ValueError:
                raise BenchmarkError(f"tau must be 'calibrate' or a number, got {self.tau!r}")
            if not 0.0 <= v <= 1.0:
                raise BenchmarkError(f"fixed tau {v} not in [0, 1]")
        if not self.methods:
            raise BenchmarkError("no CAM methods selected")
        if not self.layers:
            raise BenchmarkError("no target layers selected")


@dataclass
class SummaryRow:
    method: str
    layer: str
    mode: str
    loose_hit_rate: float
    pixel_dice: float
    pixel_iou: float
    bbox_dice: float
    bbox_iou: float
    tau: float


@dataclass
class BenchmarkResult:
    rows: list[SummaryRow]
    per_slice: list[tuple[str, str, float, EvalRecord]]  # (method, layer, tau, record)
    taus: dict[tuple[str, str], float]
    best: dict[str, tuple[str, str, float]]  # metric -> (method, layer, value)
    n_eval_slices: int


def _positive_records(records: list[SliceRecord], split: str) -> list[SliceRecord]:
    return [r for r in records if r.split == split and r.label == 1]


def slice_heatmaps(net: Network, manifest_path, record: SliceRecord,
                   layer_map: dict[str, str], methods: list[str], class_index: int):
    """Compute every requested (method, layer) heatmap for one slice.

    Returns ({(method, layer_ref): heatmap}, gt_mask).
    """
    hu, mask = load_slice(manifest_path, record)
    x = window_hu(hu)[None, None, :, :]
    trace = forward(net, x, record=set(layer_map.values()))
    target = net.spec.input_shape[1:]
    out = {}
    need_grads = any(m not in ("eigen_cam", "ablation_cam") for m in methods)
    for ref, layer in layer_map.items():
        acts = trace.activations[layer][0]
        grads = None
        if need_grads:
            grads = gradients_at(trace, net, layer, class_index)[0]
        for method in methods:
            if method == "ablation_cam":
                raw = compute_cam(
                    method, acts,
                    rescore=make_rescorer(net, trace, layer, 0, class_index),
                    y_c=float(trace.logits[0, class_index]),
                )
            else:
                raw = compute_cam(method, acts, grads)
            out[(method, ref)] = postprocess(raw, target)
    return out, mask


def _resolve_layers(net: Network, refs: list[str]) -> dict[str, str]:
    try:
        return {ref: net.spec.resolve_layer(ref) for ref in refs}
    except KeyError as e:
        raise BenchmarkError(str(e.args[0]))


def run_benchmark(cfg: RunConfig) -> BenchmarkResult:
    cfg.validate()
    net = load_network(cfg.spec_path, cfg.weights_path)
    layer_map = _resolve_layers(net, cfg.layers)
    records = read_manifest(cfg.manifest_path)
    eval_split = "test"
    eval_slices = _positive_records(records, eval_split)
    if not eval_slices:
        raise BenchmarkError("no positive slices in the test split")
    jobs = cfg.jobs if cfg.jobs > 0 else (os.cpu_count() or 1)
    keys = [(m, ref) for m in cfg.methods for ref in cfg.layers]

    def heatmaps_for(record):
        return slice_heatmaps(net, cfg.manifest_path, record, layer_map,
                              cfg.methods, cfg.class_index)

    if cfg.tau == "calibrate":
        calib_slices = _positive_records(records, cfg.calibration_split)
        if not calib_slices:
            raise BenchmarkError(
                f"no positive slices in the {cfg.calibration_split} split to calibrate on")

        def sweep(record):
            maps, mask = heatmaps_for(record)
            counts = {}
            for key, hm in maps.items():
                per_tau = []
                for t in TAU_GRID:
                    pred = binarize(hm, t)
                    per_tau.append((int((pred & mask).sum()), int(pred.sum())))
                counts[key] = per_tau
            return counts, int(mask.sum())

        pooled = {key: [[0, 0, 0] for _ in TAU_GRID] for key in keys}
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for counts, gt_count in pool.map(sweep, calib_slices):
                for key, per_tau in counts.items():
                    for i, (inter, pred) in enumerate(per_tau):
                        pooled[key][i][0] += inter
                        pooled[key][i][1] += pred
                        pooled[key][i][2] += gt_count
        taus = {}
        for key in keys:
            best_tau, best_dice = TAU_GRID[0], -1.0
            for t, (inter, pred, gt) in zip(TAU_GRID, pooled[key]):
                dice = 2.0 * inter / (pred + gt) if pred + gt else 0.0
                if dice > best_dice:
                    best_tau, best_dice = t, dice
            taus[key] = best_tau
    else:
        taus = {key: float(cfg.tau) for key in keys}

    def score(record):
        maps, mask = heatmaps_for(record)
        return {key: evaluate_slice(record.slice_id, binarize(hm, taus[key]), mask)
                for key, hm in maps.items()}

    by_key: dict[tuple[str, str], list[EvalRecord]] = {key: [] for key in keys}
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        for result in pool.map(score, eval_slices):
            for key, rec in result.items():
                by_key[key].append(rec)

    rows = []
    per_slice = []
    for method, ref in keys:
        recs = by_key[(method, ref)]
        per_slice.extend((method, ref, taus[(method, ref)], r) for r in recs)
        for mode in cfg.modes:
            s = aggregate(recs, mode)
            rows.append(SummaryRow(method, ref, mode, s.loose_hit_rate, s.pixel_dice,
                                   s.pixel_iou, s.bbox_dice, s.bbox_iou, taus[(method, ref)]))

    best_mode = "global" if "global" in cfg.modes else cfg.modes[0]
    best = {}
    for metric in ("pixel_dice", "bbox_iou"):
        top = max((r for r in rows if r.mode == best_mode), key=lambda r: getattr(r, metric))
        best[metric] = (top.method, top.layer, getattr(top, metric))
    return BenchmarkResult(rows=rows, per_slice=per_slice, taus=taus, best=best,
                           n_eval_slices=len(eval_slices))


def write_summary_csv(path: str | Path, rows: list[SummaryRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "layer", "mode", "loose_hit_rate", "pixel_dice",
                         "pixel_iou", "bbox_dice", "bbox_iou", "tau"])
        for r in rows:
            writer.writerow([r.method, r.layer, r.mode, f"{r.loose_hit_rate:.6f}",
                             f"{r.pixel_dice:.6f}", f"{r.pixel_iou:.6f}",
                             f"{r.bbox_dice:.6f}", f"{r.bbox_iou:.6f}", f"{r.tau:.2f}"])


def write_per_slice_csv(path: str | Path, per_slice) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["slice_id", "method", "layer", "tau", "loose_hit", "pixel_dice",
                         "pixel_iou", "bbox_dice", "bbox_iou", "px_inter", "px_pred",
                         "px_gt", "bb_inter", "bb_pred", "bb_gt"])
        for method, layer, tau, r in per_slice:
            writer.writerow([r.slice_id, method, layer, f"{tau:.2f}", r.loose_hit,
                             f"{r.pixel_dice:.6f}", f"{r.pixel_iou:.6f}",
                             f"{r.bbox_dice:.6f}", f"{r.bbox_iou:.6f}",
                             r.px_inter, r.px_pred, r.px_gt,
                             r.bb_inter, r.bb_pred, r.bb_gt])


def best_footer(result: BenchmarkResult) -> str:
    pd = result.best["pixel_dice"]
    bi = result.best["bbox_iou"]
    return (f"best pixel_dice: {pd[0]} layer {pd[1]} ({pd[2]:.4f}); "
            f"best bbox_iou: {bi[0]} layer {bi[1]} ({bi[2]:.4f})")


def render_overlay(gray01: np.ndarray, pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Paint prediction-only red, ground-truth-only green, intersection
    yellow, blended 50% over the grayscale base.  Returns (H, W, 3) uint8."""
    base = np.asarray(gray01, dtype=np.float64) * 255.0
    rgb = np.repeat(base[:, :, None], 3, axis=2)
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    colors = [
        (pred & ~gt, (255.0, 0.0, 0.0)),
        (~pred & gt, (0.0, 255.0, 0.0)),
        (pred & gt, (255.0, 255.0, 0.0)),
    ]
    for mask, color in colors:
        for ch in range(3):
            plane = rgb[:, :, ch]
            plane[mask] = 0.5 * base[mask] + 0.5 * color[ch]
    return np.floor(rgb + 0.5).clip(0, 255).astype(np.uint8)


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def make_overlay(cfg: RunConfig, slice_id: str):
    """Compute the overlay image for one positive slice.

    Returns (rgb array, EvalRecord, tau).  tau follows the config: fixed, or
    calibrated for the (single) requested method and layer.
    """
    cfg.validate()
    if len(cfg.methods) != 1 or len(cfg.layers) != 1:
        raise BenchmarkError("overlay needs exactly one method and one layer")
    net = load_network(cfg.spec_path, cfg.weights_path)
    layer_map = _resolve_layers(net, cfg.layers)
    records = read_manifest(cfg.manifest_path)
    matches = [r for r in records if r.slice_id == slice_id]
    if not matches:
        raise BenchmarkError(f"slice {slice_id!r} not found in manifest")
    record = matches[0]
    if record.label != 1:
        raise BenchmarkError(f"slice {slice_id!r} has no ground-truth lesion")

    method, ref = cfg.methods[0], cfg.layers[0]
    if cfg.tau == "calibrate":
        calib = _positive_records(records, cfg.calibration_split)
        if not calib:
            raise BenchmarkError(
                f"no positive slices in the {cfg.calibration_split} split to calibrate on")
        pairs = []
        for r in calib:
            maps, mask = slice_heatmaps(net, cfg.manifest_path, r, layer_map,
                                        [method], cfg.class_index)
            pairs.append((maps[(method, ref)], mask))
        tau, _ = calibrate_threshold(pairs)
    else:
        tau = float(cfg.tau)

    maps, mask = slice_heatmaps(net, cfg.manifest_path, record, layer_map,
                                [method], cfg.class_index)
    pred = binarize(maps[(method, ref)], tau)
    hu, _ = load_slice(cfg.manifest_path, record)
    rgb = render_overlay(window_hu(hu), pred, mask)
    rec = evaluate_slice(slice_id, pred, mask)
    return rgb, rec, tau


def scores_from_network(cfg: RunConfig, split: str = "test") -> list[ScoredSlice]:
    """Softmax class probability for each slice in a split (demo helper)."""
    net = load_network(cfg.spec_path, cfg.weights_path)
    records = [r for r in read_manifest(cfg.manifest_path) if not split or r.split == split]
    out = []
    for r in records:
        hu, _ = load_slice(cfg.manifest_path, r)
        trace = forward(net, window_hu(hu)[None, None, :, :])
        z = trace.logits[0]
        e = np.exp(z - z.max())
        prob = float((e / e.sum())[cfg.class_index])
        out.append(ScoredSlice(r.slice_id, prob, r.label))
    return out
