"""Detection-style evaluation of annotation files.

Matching is greedy and one-to-one: predictions in descending score order,
each taking the highest-IoU unmatched reference at or above the threshold.
Average precision integrates the full interpolated precision envelope over
all operating points (no fixed recall grid). Cells with zero references are
reported as absent, never as zero.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import iou3d, iou_bev
from .scene_io import Annotation, AnnotationSet, read_annotations

FULL_BAND = None  # marker for the unfiltered distance cell
AGNOSTIC = "all"


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation protocol: IoU kind, thresholds, class mode, distance bands.

    Bands bucket boxes by their stored ego range; they must not overlap.
    A full-range cell is always computed in addition to the explicit bands.
    """

    kind: str = "3d"                         # "3d" | "bev"
    thresholds: tuple[float, ...] = (0.25, 0.5)
    class_agnostic: bool = False
    bands: tuple[tuple[float, float], ...] = ((0.0, 30.0), (30.0, 50.0), (50.0, 80.0))

    def __post_init__(self) -> None:
        if self.kind not in ("3d", "bev"):
            raise ValueError(f"kind must be '3d' or 'bev', got {self.kind!r}")
        if not self.thresholds:
            raise ValueError("at least one IoU threshold is required")
        for t in self.thresholds:
            if not (0.0 < t <= 1.0):
                raise ValueError(f"IoU thresholds must be in (0, 1], got {t}")
        spans = sorted(self.bands)
        for lo, hi in spans:
            if hi <= lo:
                raise ValueError(f"band ({lo}, {hi}) is empty")
        for (lo1, hi1), (lo2, hi2) in zip(spans, spans[1:]):
            if lo2 < hi1:
                raise ValueError("distance bands must not overlap")


@dataclass
class MatchResult:
    """Scored decisions for one frame: (score, is_tp) per prediction, plus
    the reference count."""

    scores: np.ndarray
    is_tp: np.ndarray
    n_ref: int


def _iou_fn(kind: str):
    return iou3d if kind == "3d" else iou_bev


def match(predictions: list[Annotation], references: list[Annotation],
          kind: str = "3d", threshold: float = 0.25) -> MatchResult:
    """Greedy one-to-one matching within a single frame."""
    iou = _iou_fn(kind)
    order = sorted(range(len(predictions)),
                   key=lambda i: (-predictions[i].score, predictions[i].track_id, i))
    taken = np.zeros(len(references), dtype=bool)
    scores = np.empty(len(predictions))
    is_tp = np.zeros(len(predictions), dtype=bool)
    for row, pi in enumerate(order):
        pred = predictions[pi]
        best_iou = 0.0
        best_ref = -1
        for ri, ref in enumerate(references):
            if taken[ri]:
                continue
            value = iou(pred.box, ref.box)
            if value >= threshold and value > best_iou:
                best_iou = value
                best_ref = ri
        scores[row] = pred.score
        if best_ref >= 0:
            taken[best_ref] = True
            is_tp[row] = True
    return MatchResult(scores=scores, is_tp=is_tp, n_ref=len(references))


def average_precision(matches: list[MatchResult]) -> float | None:
    """All-point interpolated AP over pooled per-frame decisions.

    None when the pooled reference count is zero (an absent cell).
    """
    n_ref = sum(m.n_ref for m in matches)
    if n_ref == 0:
        return None
    scores = np.concatenate([m.scores for m in matches])
    is_tp = np.concatenate([m.is_tp for m in matches])
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(is_tp[order])
    fp = np.cumsum(~is_tp[order])
    recall = tp / n_ref
    precision = tp / np.maximum(tp + fp, 1)
    # Precision envelope from the right, integrated over recall increments.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, envelope):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def _pr_curve(matches: list[MatchResult]) -> list[tuple[float, float, float]]:
    """(score, recall, precision) at each pooled operating point."""
    n_ref = sum(m.n_ref for m in matches)
    scores = np.concatenate([m.scores for m in matches]) if matches else np.empty(0)
    is_tp = (np.concatenate([m.is_tp for m in matches]) if matches
             else np.empty(0, bool))
    if len(scores) == 0 or n_ref == 0:
        return []
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(is_tp[order])
    fp = np.cumsum(~is_tp[order])
    recall = tp / n_ref
    precision = tp / np.maximum(tp + fp, 1)
    return [(float(scores[order][i]), float(recall[i]), float(precision[i]))
            for i in range(len(order))]


@dataclass(frozen=True)
class CellKey:
    class_label: str
    band: tuple[float, float] | None
    threshold: float


@dataclass
class CellResult:
    ap: float | None
    tp: int
    fp: int
    fn: int
    n_pred: int
    n_ref: int
    curve: list[tuple[float, float, float]] = field(default_factory=list)


@dataclass
class EvalReport:
    kind: str
    class_agnostic: bool
    cells: dict[CellKey, CellResult]
    frames: list[int]

    def to_text(self) -> str:
        out = io.StringIO()
        mode = "class-agnostic" if self.class_agnostic else "per-class"
        out.write(f"evaluation: {self.kind} IoU, {mode}, {len(self.frames)} frames\n")
        header = f"{'class':<22}{'band':<14}{'thr':<7}{'AP':<10}{'TP':>6}{'FP':>6}{'FN':>6}\n"
        out.write(header)
        out.write("-" * len(header) + "\n")
        for key in sorted(self.cells, key=lambda k: (k.class_label,
                                                     k.band if k.band else (-1.0, -1.0),
                                                     k.threshold)):
            cell = self.cells[key]
            band = "all" if key.band is None else f"{key.band[0]:g}-{key.band[1]:g}m"
            ap = "absent" if cell.ap is None else f"{cell.ap:.4f}"
            out.write(f"{key.class_label:<22}{band:<14}{key.threshold:<7.2f}{ap:<10}"
                      f"{cell.tp:>6}{cell.fp:>6}{cell.fn:>6}\n")
        return out.getvalue()

    def curves_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["class", "band_min", "band_max", "threshold",
                         "score", "recall", "precision"])
        for key in sorted(self.cells, key=lambda k: (k.class_label,
                                                     k.band if k.band else (-1.0, -1.0),
                                                     k.threshold)):
            cell = self.cells[key]
            lo = "" if key.band is None else f"{key.band[0]:g}"
            hi = "" if key.band is None else f"{key.band[1]:g}"
            for score, recall, precision in cell.curve:
                writer.writerow([key.class_label, lo, hi, f"{key.threshold:g}",
                                 f"{score:.6f}", f"{recall:.6f}", f"{precision:.6f}"])
        return out.getvalue()


def _band_filter(anns: list[Annotation], band: tuple[float, float] | None,
                 role: str) -> list[Annotation]:
    if band is None:
        return anns
    lo, hi = band
    out = []
    for a in anns:
        if a.ego_distance is None:
            raise EvalError(
                f"{role} annotation (frame {a.frame}, track {a.track_id}) has no "
                "ego_distance; distance-band evaluation needs it")
        if lo <= a.ego_distance < hi:
            out.append(a)
    return out


def evaluate(predictions: AnnotationSet | str | Path,
             references: AnnotationSet | str | Path,
             config: EvalConfig = EvalConfig()) -> EvalReport:
    """Evaluate a prediction file against a reference file."""
    preds = (predictions if isinstance(predictions, AnnotationSet)
             else read_annotations(predictions))
    refs = (references if isinstance(references, AnnotationSet)
            else read_annotations(references))

    pred_frames = set(preds.frames)
    ref_frames = set(refs.frames)
    if pred_frames != ref_frames:
        missing_in_pred = sorted(ref_frames - pred_frames)
        missing_in_ref = sorted(pred_frames - ref_frames)
        raise EvalError(
            "frame index mismatch between files: "
            f"missing in predictions {missing_in_pred}, "
            f"missing in references {missing_in_ref}")
    for role, aset in (("prediction", preds), ("reference", refs)):
        stray = sorted({a.frame for a in aset.annotations} - pred_frames)
        if stray:
            raise EvalError(f"{role} annotations reference undeclared frames {stray}")

    if config.class_agnostic:
        classes = [AGNOSTIC]
    else:
        classes = sorted({a.class_label for a in refs.annotations}
                         | {a.class_label for a in preds.annotations})

    frames = sorted(pred_frames)
    bands: list[tuple[float, float] | None] = [FULL_BAND] + list(config.bands)

    cells: dict[CellKey, CellResult] = {}
    for label in classes:
        def of_class(anns: list[Annotation]) -> list[Annotation]:
            if label == AGNOSTIC:
                return anns
            return [a for a in anns if a.class_label == label]

        for band in bands:
            pred_pool = _band_filter(of_class(preds.annotations), band, "prediction")
            ref_pool = _band_filter(of_class(refs.annotations), band, "reference")
            pred_by_frame: dict[int, list[Annotation]] = {f: [] for f in frames}
            ref_by_frame: dict[int, list[Annotation]] = {f: [] for f in frames}
            for a in pred_pool:
                pred_by_frame.setdefault(a.frame, []).append(a)
            for a in ref_pool:
                ref_by_frame.setdefault(a.frame, []).append(a)
            for threshold in config.thresholds:
                matches = [match(pred_by_frame[f], ref_by_frame[f],
                                 kind=config.kind, threshold=threshold)
                           for f in frames]
                ap = average_precision(matches)
                tp = int(sum(m.is_tp.sum() for m in matches))
                n_pred = int(sum(len(m.scores) for m in matches))
                n_ref = int(sum(m.n_ref for m in matches))
                cells[CellKey(label, band, threshold)] = CellResult(
                    ap=ap, tp=tp, fp=n_pred - tp, fn=n_ref - tp,
                    n_pred=n_pred, n_ref=n_ref, curve=_pr_curve(matches))
    return EvalReport(kind=config.kind, class_agnostic=config.class_agnostic,
                      cells=cells, frames=frames)
