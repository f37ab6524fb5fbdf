"""Slice-level classification scoring: confusion counts, P/R/F1, PR curves."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path


class ScoreFileError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredSlice:
    slice_id: str
    score: float
    label: int

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ScoreFileError(f"slice {self.slice_id!r}: score {self.score} not in [0, 1]")
        if self.label not in (0, 1):
            raise ScoreFileError(f"slice {self.slice_id!r}: label must be 0 or 1")


def confusion_at(slices: list[ScoredSlice], t: float):
    """Counts (tp, fp, fn, tn) with the inclusive rule: positive iff score >= t."""
    tp = fp = fn = tn = 0
    for s in slices:
        pred = s.score >= t
        if pred and s.label == 1:
            tp += 1
        elif pred and s.label == 0:
            fp += 1
        elif not pred and s.label == 1:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def prf(counts):
    tp, fp, fn, _ = counts
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def pr_curve(slices: list[ScoredSlice], thresholds: list[float]):
    """(recall, precision) points ordered by descending threshold."""
    if not thresholds:
        raise ScoreFileError("pr_curve needs at least one threshold")
    points = []
    for t in sorted(thresholds, reverse=True):
        p, r, _ = prf(confusion_at(slices, t))
        points.append((r, p))
    return points


def read_scores(path: str | Path) -> list[ScoredSlice]:
    out = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"slice_id", "score", "label"} <= set(reader.fieldnames):
            raise ScoreFileError(f"{path}: expected header slice_id,score,label")
        for i, row in enumerate(reader, start=2):
            try:
                out.append(ScoredSlice(row["slice_id"], float(row["score"]), int(row["label"])))
            except (TypeError, ValueError) as e:
                raise ScoreFileError(f"{path}:{i}: {e}")
    if not out:
        raise ScoreFileError(f"{path}: no scored slices")
    return out


def write_pr_table(path: str | Path, slices: list[ScoredSlice], thresholds: list[float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "precision", "recall", "f1"])
        for t in sorted(thresholds, reverse=True):
            p, r, f1 = prf(confusion_at(slices, t))
            writer.writerow([f"{t:g}", f"{p:.6f}", f"{r:.6f}", f"{f1:.6f}"])
