"""Detection counting rules, precision/recall/F1, Jaccard/Dice, and
synthetic-count sweep reports, for externally produced model outputs."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError

__all__ = [
    "Detection",
    "MetricCounts",
    "SegPair",
    "match_frame",
    "prf1",
    "jaccard_dice",
    "dataset_jaccard_dice",
    "SweepRow",
    "SweepReport",
    "sweep_report",
    "load_detections",
    "split_polyps",
]


@dataclass(frozen=True)
class Detection:
    frame_id: str
    x1: float
    y1: float
    x2: float
    y2: float
    score: float = 1.0

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise DataError(
                f"malformed box ({self.x1},{self.y1},{self.x2},{self.y2}) "
                f"in frame {self.frame_id!r}"
            )

    def center(self) -> Tuple[int, int]:
        """Integer (row, col) of the box center pixel."""
        return int((self.y1 + self.y2) / 2.0), int((self.x1 + self.x2) / 2.0)


@dataclass
class MetricCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise DataError("counts must be non-negative")

    def __add__(self, other: "MetricCounts") -> "MetricCounts":
        return MetricCounts(
            self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn
        )


def match_frame(dets: Sequence[Detection], gt_masks: Sequence[np.ndarray]) -> MetricCounts:
    """Score one frame's detections against its per-polyp masks.

    A detection hits a polyp iff its box center pixel lies inside that
    polyp's mask; each polyp yields at most one TP and extra hits on it
    are ignored. Detections hitting nothing are FPs, unhit polyps FNs,
    and a negative frame with no detections is the one TN case.
    """
    gt_masks = [np.asarray(m, dtype=bool) for m in gt_masks]
    gt_masks = [m for m in gt_masks if m.any()]
    matched = [False] * len(gt_masks)
    counts = MetricCounts()
    for det in dets:
        row, col = det.center()
        hit_any = False
        for j, mask in enumerate(gt_masks):
            h, w = mask.shape
            inside = 0 <= row < h and 0 <= col < w and mask[row, col]
            if inside:
                hit_any = True
                if not matched[j]:
                    matched[j] = True
                    counts.tp += 1
                    break
                # inside a matched polyp: keep scanning for an unmatched one;
                # if none takes it, the duplicate is neither TP nor FP
        if not hit_any:
            counts.fp += 1
    counts.fn += sum(1 for m in matched if not m)
    if not gt_masks and not dets:
        counts.tn += 1
    return counts


def prf1(c: MetricCounts) -> Tuple[Optional[float], Optional[float], Optional[float]]:
    """Precision, recall and F1 in percent; undefined entries are None."""
    pre = 100.0 * c.tp / (c.tp + c.fp) if c.tp + c.fp > 0 else None
    rec = 100.0 * c.tp / (c.tp + c.fn) if c.tp + c.fn > 0 else None
    if pre is None or rec is None:
        f1 = None
    elif pre + rec == 0.0:
        f1 = 0.0
    else:
        f1 = 2.0 * pre * rec / (pre + rec)
    return pre, rec, f1


@dataclass
class SegPair:
    predicted: np.ndarray  # float scores or binary
    truth: np.ndarray  # binary

    def __post_init__(self):
        if self.predicted.shape != self.truth.shape:
            raise DataError(
                f"SegPair: extent mismatch {self.predicted.shape} vs {self.truth.shape}"
            )


def jaccard_dice(p: SegPair, threshold: float = 0.5) -> Tuple[float, float]:
    """Intersection-over-union and Dice of the thresholded prediction.

    Both are defined as 1 when prediction and truth are both empty.
    """
    a = np.asarray(p.predicted) >= threshold
    b = np.asarray(p.truth, dtype=bool)
    inter = float(np.count_nonzero(a & b))
    union = float(np.count_nonzero(a | b))
    if union == 0.0:
        return 1.0, 1.0
    j = inter / union
    dice = 2.0 * inter / (np.count_nonzero(a) + np.count_nonzero(b))
    return j, dice


def dataset_jaccard_dice(pairs: Sequence[SegPair], threshold: float = 0.5) -> Tuple[float, float]:
    """Unweighted mean of per-image Jaccard and Dice."""
    if not pairs:
        raise DataError("dataset_jaccard_dice: no pairs")
    scores = [jaccard_dice(p, threshold) for p in pairs]
    return float(np.mean([s[0] for s in scores])), float(np.mean([s[1] for s in scores]))


# ---------------------------------------------------------------------
# sweep reports
# ---------------------------------------------------------------------

@dataclass
class SweepRow:
    n_synthetic: int
    counts: Optional[MetricCounts] = None
    precision: Optional[float] = None
    recall: Optional[float] = None
    f1: Optional[float] = None

    def resolved(self) -> "SweepRow":
        if self.counts is not None:
            pre, rec, f1 = prf1(self.counts)
            return SweepRow(self.n_synthetic, self.counts, pre, rec, f1)
        return self


@dataclass
class SweepReport:
    rows: List[SweepRow]
    saturation_n: Optional[int]

    FIELDS = ("n_synthetic", "precision", "recall", "f1", "saturated")

    def _cells(self) -> List[List[str]]:
        out = []
        for r in self.rows:
            out.append(
                [
                    str(r.n_synthetic),
                    *(f"{v:.2f}" if v is not None else "-" for v in (r.precision, r.recall, r.f1)),
                    "*" if r.n_synthetic == self.saturation_n else "",
                ]
            )
        return out

    def to_text(self) -> str:
        rows = [list(self.FIELDS)] + self._cells()
        widths = [max(len(r[i]) for r in rows) for i in range(len(self.FIELDS))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
        return "\n".join(lines)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.FIELDS)
            writer.writerows(self._cells())


def sweep_report(rows: Sequence[SweepRow], f1_window: float = 0.5) -> SweepReport:
    """Per-row metrics plus the saturation point: the first row whose F1
    is within ``f1_window`` of the sweep's maximum."""
    resolved = [r.resolved() for r in rows]
    ns = [r.n_synthetic for r in resolved]
    if len(set(ns)) != len(ns):
        raise DataError(f"sweep_report: duplicate n_synthetic in {ns}")
    if ns != sorted(ns):
        raise DataError("sweep_report: rows must be sorted by n_synthetic")
    defined = [r for r in resolved if r.f1 is not None]
    saturation = None
    if defined:
        best = max(r.f1 for r in defined)
        saturation = next(r.n_synthetic for r in defined if r.f1 >= best - f1_window)
    return SweepReport(rows=resolved, saturation_n=saturation)


# ---------------------------------------------------------------------
# ingestion helpers
# ---------------------------------------------------------------------

def load_detections(path) -> Dict[str, List[Detection]]:
    """CSV with header frame_id,x1,y1,x2,y2,score -> per-frame lists."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"detections file not found: {path}")
    out: Dict[str, List[Detection]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        needed = {"frame_id", "x1", "y1", "x2", "y2"}
        if reader.fieldnames is None or not needed.issubset(reader.fieldnames):
            raise DataError(f"detections CSV must have columns {sorted(needed)}")
        for rec in reader:
            det = Detection(
                frame_id=rec["frame_id"],
                x1=float(rec["x1"]),
                y1=float(rec["y1"]),
                x2=float(rec["x2"]),
                y2=float(rec["y2"]),
                score=float(rec.get("score", 1.0) or 1.0),
            )
            out.setdefault(det.frame_id, []).append(det)
    return out


def split_polyps(mask: np.ndarray) -> List[np.ndarray]:
    """Connected components (8-connectivity) of a frame mask, one per polyp."""
    from scipy import ndimage

    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return []
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    return [labels == i for i in range(1, n + 1)]
