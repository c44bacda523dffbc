"""Detection and segmentation metrics: AP/mAP, CorLoc, pixel precision/recall
with box-to-mask conversion, the five-way error-mode histogram, and report files.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import BBox, BinaryMask, box_iou

MODE_NAMES = ("correct", "inside_gt", "contains_gt", "low_overlap", "no_overlap")


@dataclass(frozen=True)
class Detection:
    """One scored box prediction on one image."""

    image_id: int
    box: BBox
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


GroundTruths = dict[int, list[tuple[int, BBox]]]  # image id -> [(class, box)]


def average_precision(
    detections: list[Detection],
    gts: GroundTruths,
    class_id: int,
    iou_thresh: float = 0.5,
    use_07_metric: bool = False,
) -> float | None:
    """Area under the precision/recall curve for one class.

    Detections are ranked by descending score and greedily matched, each
    ground truth at most once. All-points interpolation by default; the
    legacy 11-point variant sits behind a flag. Returns None when the class
    has no ground-truth instances.
    """
    gt_boxes = {
        img: [b for c, b in items if c == class_id] for img, items in gts.items()
    }
    n_gt = sum(len(v) for v in gt_boxes.values())
    if n_gt == 0:
        return None
    dets = sorted(
        (d for d in detections if d.class_id == class_id),
        key=lambda d: (-d.score, d.image_id),
    )
    used: dict[int, list[bool]] = {img: [False] * len(v) for img, v in gt_boxes.items()}
    tp = np.zeros(len(dets))
    fp = np.zeros(len(dets))
    for i, d in enumerate(dets):
        candidates = gt_boxes.get(d.image_id, [])
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(candidates):
            iou = box_iou(d.box, g)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_thresh and not used[d.image_id][best_j]:
            used[d.image_id][best_j] = True
            tp[i] = 1
        else:
            fp[i] = 1
    if len(dets) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(fp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1e-12)
    if use_07_metric:
        ap = 0.0
        for t in np.arange(0.0, 1.01, 0.1):
            mask = recall >= t
            ap += (precision[mask].max() if mask.any() else 0.0) / 11.0
        return float(ap)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]).sum())


def mean_average_precision(
    detections: list[Detection],
    gts: GroundTruths,
    n_classes: int,
    iou_thresh: float = 0.5,
    use_07_metric: bool = False,
) -> tuple[float, list[float | None]]:
    """mAP over the classes that have ground truth; per-class APs alongside."""
    aps = [
        average_precision(detections, gts, k, iou_thresh, use_07_metric)
        for k in range(n_classes)
    ]
    present = [a for a in aps if a is not None]
    return (float(np.mean(present)) if present else 0.0), aps


def corloc(detections: list[Detection], gts: GroundTruths, class_id: int) -> float | None:
    """Fraction of images containing the class whose top-scoring detection of
    that class overlaps some ground truth at IoU >= 0.5. Images with no such
    detection count as failures. None when the class appears nowhere."""
    images = [img for img, items in gts.items() if any(c == class_id for c, _ in items)]
    if not images:
        return None
    hits = 0
    for img in images:
        best: Detection | None = None
        for d in detections:
            if d.image_id == img and d.class_id == class_id:
                if best is None or d.score > best.score:
                    best = d
        if best is None:
            continue
        gt_boxes = [b for c, b in gts[img] if c == class_id]
        if any(box_iou(best.box, g) >= 0.5 for g in gt_boxes):
            hits += 1
    return hits / len(images)


def boxes_to_segmap(
    detections: list[Detection],
    class_id: int,
    image_size: tuple[int, int],
    score_thresh: float,
) -> BinaryMask:
    """Union of all boxes of one class scoring at or above the threshold."""
    w, h = image_size
    bits = np.zeros((h, w), dtype=bool)
    for d in detections:
        if d.class_id == class_id and d.score >= score_thresh:
            bits[d.box.y0 : d.box.y1, d.box.x0 : d.box.x1] = True
    return BinaryMask(bits)


def pixel_precision_recall(
    pred_masks: list[np.ndarray], gt_masks: list[np.ndarray]
) -> tuple[float | None, float]:
    """Micro-averaged pixel precision and recall over paired masks."""
    tp = fp = fn = 0
    for pred, gt in zip(pred_masks, gt_masks):
        pred = np.asarray(pred, dtype=bool)
        gt = np.asarray(gt, dtype=bool)
        if pred.shape != gt.shape:
            raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
        tp += int((pred & gt).sum())
        fp += int((pred & ~gt).sum())
        fn += int((~pred & gt).sum())
    precision = tp / (tp + fp) if (tp + fp) > 0 else None
    recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    return precision, recall


def pixel_precision_recall_macro(
    per_class_pred: dict[int, list[np.ndarray]], per_class_gt: dict[int, list[np.ndarray]]
) -> tuple[float | None, float]:
    """Macro variant: average the per-class micro metrics."""
    precisions, recalls = [], []
    for k in per_class_pred:
        p, r = pixel_precision_recall(per_class_pred[k], per_class_gt[k])
        if p is not None:
            precisions.append(p)
        recalls.append(r)
    return (float(np.mean(precisions)) if precisions else None), (
        float(np.mean(recalls)) if recalls else 0.0
    )


@dataclass
class ErrorModeHistogram:
    """Counts of the five detection outcomes, per class and pooled.

    Modes, in assignment precedence: correct localization (IoU >= 0.5),
    hypothesis completely inside the ground truth, ground truth completely
    inside the hypothesis, nonzero overlap, no overlap.
    """

    per_class: dict[int, np.ndarray] = field(default_factory=dict)

    def frequencies(self, class_id: int) -> np.ndarray | None:
        counts = self.per_class.get(class_id)
        if counts is None or counts.sum() == 0:
            return None
        return counts / counts.sum()

    def pooled_frequencies(self) -> np.ndarray | None:
        if not self.per_class:
            return None
        total = sum(self.per_class.values())
        return total / total.sum() if total.sum() > 0 else None


def classify_error_mode(det_box: BBox, gt_boxes: list[BBox]) -> int:
    """Assign exactly one mode index against the best-IoU ground truth."""
    if not gt_boxes:
        return 4
    ious = [box_iou(det_box, g) for g in gt_boxes]
    j = int(np.argmax(ious))
    best = gt_boxes[j]
    iou = ious[j]
    if iou >= 0.5:
        return 0
    if best.contains(det_box):
        return 1
    if det_box.contains(best):
        return 2
    if iou > 0.0:
        return 3
    return 4


def error_modes(
    detections: list[Detection], gts: GroundTruths, score_thresh: float
) -> ErrorModeHistogram:
    """Histogram of error modes over all detections at or above the threshold."""
    hist = ErrorModeHistogram()
    for d in detections:
        if d.score < score_thresh:
            continue
        gt_boxes = [b for c, b in gts.get(d.image_id, []) if c == d.class_id]
        mode = classify_error_mode(d.box, gt_boxes)
        if d.class_id not in hist.per_class:
            hist.per_class[d.class_id] = np.zeros(5)
        hist.per_class[d.class_id][mode] += 1
    return hist


def write_detections_jsonl(path: str | Path, detections: list[Detection]) -> None:
    with open(path, "w") as f:
        for d in detections:
            f.write(
                json.dumps(
                    {
                        "image_id": d.image_id,
                        "class": d.class_id,
                        "x0": d.box.x0,
                        "y0": d.box.y0,
                        "x1": d.box.x1,
                        "y1": d.box.y1,
                        "score": d.score,
                    }
                )
                + "\n"
            )


def read_detections_jsonl(path: str | Path) -> list[Detection]:
    out = []
    with open(path) as f:
        for line in f:
            r = json.loads(line)
            out.append(
                Detection(
                    image_id=r["image_id"],
                    box=BBox(r["x0"], r["y0"], r["x1"], r["y1"]),
                    class_id=r["class"],
                    score=r["score"],
                )
            )
    return out


@dataclass
class MetricsBundle:
    """Everything one evaluation run produces, ready for reporting."""

    n_classes: int
    map_value: float
    per_class_ap: list[float | None]
    per_class_corloc: list[float | None]
    pixel_precision: float | None
    pixel_recall: float
    seg_pixel_precision: float | None = None
    seg_pixel_recall: float | None = None
    modes: ErrorModeHistogram = field(default_factory=ErrorModeHistogram)
    extra: dict = field(default_factory=dict)


def report(bundle: MetricsBundle, out_dir: str | Path) -> dict[str, Path]:
    """Emit per-class CSV, JSON summary, and an SVG error-mode chart."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "metrics.csv"
    json_path = out / "summary.json"
    svg_path = out / "error_modes.svg"

    def fmt(v):
        return "" if v is None else f"{v:.6f}"

    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["class", "ap", "corloc", "pix_precision", "pix_recall"]
            + [f"mode{i + 1}" for i in range(5)]
        )
        for k in range(bundle.n_classes):
            freqs = bundle.modes.frequencies(k)
            writer.writerow(
                [
                    k,
                    fmt(bundle.per_class_ap[k]),
                    fmt(bundle.per_class_corloc[k]),
                    "",
                    "",
                ]
                + [fmt(None if freqs is None else freqs[i]) for i in range(5)]
            )
        pooled = bundle.modes.pooled_frequencies()
        writer.writerow(
            [
                "mean",
                fmt(bundle.map_value),
                fmt(_mean_or_none(bundle.per_class_corloc)),
                fmt(bundle.pixel_precision),
                fmt(bundle.pixel_recall),
            ]
            + [fmt(None if pooled is None else pooled[i]) for i in range(5)]
        )

    summary = {
        "map": bundle.map_value,
        "per_class_ap": bundle.per_class_ap,
        "per_class_corloc": bundle.per_class_corloc,
        "pixel_precision": bundle.pixel_precision,
        "pixel_recall": bundle.pixel_recall,
        "seg_pixel_precision": bundle.seg_pixel_precision,
        "seg_pixel_recall": bundle.seg_pixel_recall,
        "error_modes": {
            str(k): v.tolist() for k, v in sorted(bundle.modes.per_class.items())
        },
        "extra": bundle.extra,
    }
    json_path.write_text(json.dumps(summary, indent=1, sort_keys=True))
    svg_path.write_text(_error_mode_svg(bundle.modes))
    return {"csv": csv_path, "json": json_path, "svg": svg_path}


def _mean_or_none(values) -> float | None:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def _error_mode_svg(modes: ErrorModeHistogram) -> str:
    """Minimal deterministic bar chart of pooled error-mode frequencies."""
    pooled = modes.pooled_frequencies()
    freqs = [0.0] * 5 if pooled is None else [float(v) for v in pooled]
    width, height, base = 360, 200, 160
    bars = []
    for i, (name, v) in enumerate(zip(MODE_NAMES, freqs)):
        x = 20 + i * 66
        bh = int(round(v * 120))
        bars.append(
            f'<rect x="{x}" y="{base - bh}" width="48" height="{bh}" fill="#4477aa"/>'
            f'<text x="{x + 24}" y="{base + 14}" font-size="9" text-anchor="middle">{name}</text>'
            f'<text x="{x + 24}" y="{base - bh - 4}" font-size="9" text-anchor="middle">{v:.2f}</text>'
        )
    body = "".join(bars)
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
        f'<rect width="{width}" height="{height}" fill="white"/>{body}</svg>\n'
    )
