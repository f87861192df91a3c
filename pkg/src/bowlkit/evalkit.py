"""Average-recall evaluation for open-world proposals.

Recall is measured per image: the top-k detections by score (ties by
insertion order) are matched greedily, each ground-truth box taking the
highest-scoring unmatched detection with IoU at or above the threshold.
AR averages recall over the ten IoU thresholds 0.50 to 0.95. Novel-class
AR first links detections to base-class boxes (greedy, IoU >= 0.5) and
removes them, so base detections do not consume the budget.

Annotations and detections use COCO-style JSON. Ground truth:

    {"images": [{"id", "width", "height"}],
     "annotations": [{"image_id", "bbox": [x, y, w, h], "category_id"}],
     "categories": [{"id", "name", "split": "base"|"novel"}]}

Detections are a list of {"image_id", "bbox", "score"}. A missing "split"
field marks the category as base.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .errors import ConfigError, FormatError
from .geometry import Box, GtBox, iou

# Exact decimal thresholds; arithmetic like 0.5 + 2 * 0.05 would not compare
# equal to an IoU of exactly 0.6.
IOU_THRESHOLDS = (0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95)

BASE_LINK_IOU = 0.5

# COCO area conventions for the scale split.
SMALL_AREA = 32.0 * 32.0
LARGE_AREA = 96.0 * 96.0


@dataclass(frozen=True)
class Detection:
    image_id: int
    box: Box
    score: float


@dataclass
class ArReport:
    budget: int
    ar_all: Optional[float] = None
    ar_novel: Optional[float] = None
    ar_small: Optional[float] = None
    ar_medium: Optional[float] = None
    ar_large: Optional[float] = None
    per_threshold: list = field(default_factory=list)


def _group_by_image(items, key):
    grouped: dict[int, list] = {}
    for item in items:
        grouped.setdefault(key(item), []).append(item)
    return grouped


def _top_k(dets: Sequence[Detection], k: int) -> list[Detection]:
    # Stable sort: equal scores keep insertion order.
    return sorted(dets, key=lambda d: -d.score)[:k]


def _greedy_match_count(
    dets: Sequence[Detection], gt_boxes: Sequence[Box], threshold: float
) -> int:
    """Each gt takes the highest-scoring unmatched detection with IoU >= threshold."""
    taken = [False] * len(dets)
    matched = 0
    for gt in gt_boxes:
        for di, det in enumerate(dets):
            if taken[di]:
                continue
            if iou(det.box, gt) >= threshold:
                taken[di] = True
                matched += 1
                break
    return matched


def recall_at(
    dets: Sequence[Detection],
    gts: Sequence[tuple[int, GtBox]],
    k: int,
    iou_threshold: float,
) -> Optional[float]:
    """Fraction of ground truth matched within a per-image budget of k.

    Returns None when there is no ground truth at all (undefined recall,
    excluded from averages).
    """
    if k < 1:
        raise ConfigError(f"budget k must be >= 1, got {k}")
    gts_by_image = _group_by_image(gts, key=lambda g: g[0])
    if not gts_by_image:
        return None
    dets_by_image = _group_by_image(dets, key=lambda d: d.image_id)
    total = 0
    matched = 0
    for image_id, image_gts in gts_by_image.items():
        total += len(image_gts)
        image_dets = _top_k(dets_by_image.get(image_id, []), k)
        matched += _greedy_match_count(
            image_dets, [g[1].box for g in image_gts], iou_threshold
        )
    return matched / total


def average_recall(
    dets: Sequence[Detection], gts: Sequence[tuple[int, GtBox]], k: int
) -> Optional[float]:
    """Mean of recall_at over the ten IoU thresholds."""
    recalls = [recall_at(dets, gts, k, thr) for thr in IOU_THRESHOLDS]
    if recalls[0] is None:
        return None
    return sum(recalls) / len(recalls)


def per_threshold_recall(
    dets: Sequence[Detection], gts: Sequence[tuple[int, GtBox]], k: int
) -> list[Optional[float]]:
    return [recall_at(dets, gts, k, thr) for thr in IOU_THRESHOLDS]


def _remove_base_linked(
    dets: Sequence[Detection], gts_base: Sequence[tuple[int, GtBox]]
) -> list[Detection]:
    """Drop detections greedily linked to base-class boxes at IoU >= BASE_LINK_IOU.

    Linking scans detections in score order (all of them, before any budget
    cut); the survivors keep their original insertion order.
    """
    base_by_image = _group_by_image(gts_base, key=lambda g: g[0])
    removed: set[int] = set()
    dets_by_image: dict[int, list[tuple[int, Detection]]] = {}
    for idx, det in enumerate(dets):
        dets_by_image.setdefault(det.image_id, []).append((idx, det))
    for image_id, base_gts in base_by_image.items():
        candidates = sorted(
            dets_by_image.get(image_id, []), key=lambda pair: -pair[1].score
        )
        taken = [False] * len(candidates)
        for _, gt in base_gts:
            for ci, (idx, det) in enumerate(candidates):
                if taken[ci]:
                    continue
                if iou(det.box, gt.box) >= BASE_LINK_IOU:
                    taken[ci] = True
                    removed.add(idx)
                    break
    return [det for idx, det in enumerate(dets) if idx not in removed]


def ar_novel(
    dets: Sequence[Detection],
    gts_base: Sequence[tuple[int, GtBox]],
    gts_novel: Sequence[tuple[int, GtBox]],
    k: int,
) -> Optional[float]:
    """Novel-class AR with base-linked detections omitted from the budget."""
    remaining = _remove_base_linked(dets, gts_base)
    return average_recall(remaining, gts_novel, k)


def ar_by_scale(
    dets: Sequence[Detection], gts: Sequence[tuple[int, GtBox]], k: int
) -> tuple[Optional[float], Optional[float], Optional[float]]:
    """AR over the small / medium / large ground-truth area partitions."""
    small = [g for g in gts if g[1].box.area < SMALL_AREA]
    medium = [g for g in gts if SMALL_AREA <= g[1].box.area < LARGE_AREA]
    large = [g for g in gts if g[1].box.area >= LARGE_AREA]
    return (
        average_recall(dets, small, k),
        average_recall(dets, medium, k),
        average_recall(dets, large, k),
    )


def negative_precision(
    negative_anchors: Sequence[tuple[int, Box]],
    gts_all_classes: Sequence[tuple[int, GtBox]],
    iou_threshold: float = 0.1,
    anchor_size: Optional[float] = None,
) -> Optional[float]:
    """Share of mined negatives that overlap no ground truth of any class.

    An anchor counts as correct when its IoU with every same-image box stays
    strictly below the threshold. ``anchor_size`` restricts the population to
    square anchors of that side length. None when no negatives qualify.
    """
    if anchor_size is not None:
        negative_anchors = [
            (img, box)
            for img, box in negative_anchors
            if abs(box.w - anchor_size) < 1e-6 and abs(box.h - anchor_size) < 1e-6
        ]
    if not negative_anchors:
        return None
    gts_by_image = _group_by_image(gts_all_classes, key=lambda g: g[0])
    clean = 0
    for image_id, box in negative_anchors:
        hits = gts_by_image.get(image_id, [])
        if all(iou(box, g[1].box) < iou_threshold for g in hits):
            clean += 1
    return clean / len(negative_anchors)


def evaluate_all(
    dets: Sequence[Detection],
    gts: Sequence[tuple[int, GtBox]],
    k: int,
) -> ArReport:
    """Full report: overall AR, novel AR, and the scale split."""
    base = [g for g in gts if g[1].is_base]
    novel = [g for g in gts if not g[1].is_base]
    small, medium, large = ar_by_scale(dets, gts, k)
    return ArReport(
        budget=k,
        ar_all=average_recall(dets, gts, k),
        ar_novel=ar_novel(dets, base, novel, k) if novel else None,
        ar_small=small,
        ar_medium=medium,
        ar_large=large,
        per_threshold=per_threshold_recall(dets, gts, k),
    )


# ---------------------------------------------------------------------------
# COCO-style annotation I/O


def load_coco_ground_truth(path):
    """Returns (images, gts): image dims by id and a flat (image_id, GtBox) list."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if not isinstance(payload, dict) or "annotations" not in payload:
        raise FormatError(f"{path}: expected a COCO-style annotation object")
    base_ids = set()
    seen_categories = set()
    for cat in payload.get("categories", []):
        seen_categories.add(cat["id"])
        if cat.get("split", "base") == "base":
            base_ids.add(cat["id"])
    images = {}
    for img in payload.get("images", []):
        images[int(img["id"])] = (int(img["width"]), int(img["height"]))
    gts = []
    for ann in payload["annotations"]:
        x, y, w, h = ann["bbox"]
        category = int(ann.get("category_id", 0))
        is_base = category in base_ids if seen_categories else True
        gts.append(
            (
                int(ann["image_id"]),
                GtBox(box=Box(x, y, w, h), class_id=category, is_base=is_base),
            )
        )
    return images, gts


def load_coco_detections(path) -> list[Detection]:
    """COCO results format: a JSON list of {image_id, bbox, score}."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if not isinstance(payload, list):
        raise FormatError(f"{path}: expected a JSON list of detections")
    dets = []
    for entry in payload:
        x, y, w, h = entry["bbox"]
        dets.append(
            Detection(
                image_id=int(entry["image_id"]),
                box=Box(x, y, w, h),
                score=float(entry["score"]),
            )
        )
    return dets


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.6f}"


def report_text(report: ArReport) -> str:
    lines = [
        f"budget_k\t{report.budget}",
        f"ar_all\t{_fmt(report.ar_all)}",
        f"ar_novel\t{_fmt(report.ar_novel)}",
        f"ar_small\t{_fmt(report.ar_small)}",
        f"ar_medium\t{_fmt(report.ar_medium)}",
        f"ar_large\t{_fmt(report.ar_large)}",
    ]
    for thr, rec in zip(IOU_THRESHOLDS, report.per_threshold):
        lines.append(f"recall@{thr:.2f}\t{_fmt(rec)}")
    return "\n".join(lines) + "\n"


def write_report(report: ArReport, text_path, json_path) -> None:
    with open(text_path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(report_text(report))
    payload = {
        "budget_k": report.budget,
        "ar_all": report.ar_all,
        "ar_novel": report.ar_novel,
        "ar_small": report.ar_small,
        "ar_medium": report.ar_medium,
        "ar_large": report.ar_large,
        "iou_thresholds": list(IOU_THRESHOLDS),
        "per_threshold_recall": report.per_threshold,
    }
    with open(json_path, "w", encoding="ascii", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
