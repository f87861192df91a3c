"""Training targets and loss terms for objectness supervision.

Positive anchors supervise both box regression (distances to the four sides
of the matched box) and objectness (centerness of the anchor center inside
it). Negative anchors supervise objectness only, with target zero. The
objectness term is an L1 penalty on sigmoid(logit) against the target,
normalized over positives plus negatives; the regression term is a mean
absolute error over the four components, normalized over positives alone.
With no negatives the combined loss reduces exactly to the positives-only
objective.

Target files are line-delimited text:

    image_id,anchor_index,role,objectness[,l,r,t,b]

with floats at 9 significant digits; regression fields appear only on
positive records.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ConsistencyError,
    CoverageError,
    ParseError,
    RoleError,
)
from .geometry import AnchorBox, GtBox, centerness, ltrb_target
from .labeler import NEGATIVE, POSITIVE, AnchorLabel

_FLOAT_FMT = "{:.9g}"


@dataclass(frozen=True)
class TargetRecord:
    image_id: int
    anchor_index: int
    role: str
    regression_target: Optional[tuple[float, float, float, float]]
    objectness_target: float


@dataclass(frozen=True)
class PredictionRecord:
    image_id: int
    anchor_index: int
    objectness_logit: float
    regression_pred: Optional[tuple[float, float, float, float]] = None


def sigmoid(z):
    """Numerically stable logistic function."""
    arr = np.asarray(z, dtype=np.float64)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ez = np.exp(arr[~pos])
    out[~pos] = ez / (1.0 + ez)
    return float(out[0]) if scalar else out


def assign_targets(
    labels: Sequence[AnchorLabel],
    anchors: Sequence[AnchorBox],
    gts: Sequence[GtBox],
    image_id: int = 0,
    per_role_cap: Optional[int] = None,
) -> list[TargetRecord]:
    """One record per positive and per negative anchor; ignored anchors emit none.

    A positive whose anchor center does not fall strictly inside its matched
    box has no valid regression target; such anchors are dropped rather than
    emitted with fabricated values. ``per_role_cap`` keeps at most that many
    positives and negatives each, lowest anchor index first.
    """
    records = []
    n_pos = 0
    n_neg = 0
    for label in labels:
        anchor = anchors[label.anchor_index]
        if label.role == POSITIVE:
            if label.matched_gt is None:
                raise ConsistencyError(
                    f"positive anchor {label.anchor_index} has no matched gt"
                )
            if per_role_cap is not None and n_pos >= per_role_cap:
                continue
            gt = gts[label.matched_gt]
            location = (anchor.cx, anchor.cy)
            ltrb = ltrb_target(location, gt.box)
            if ltrb is None:
                continue
            records.append(
                TargetRecord(
                    image_id=image_id,
                    anchor_index=label.anchor_index,
                    role=POSITIVE,
                    regression_target=ltrb,
                    objectness_target=centerness(location, gt.box),
                )
            )
            n_pos += 1
        elif label.role == NEGATIVE:
            if per_role_cap is not None and n_neg >= per_role_cap:
                continue
            records.append(
                TargetRecord(
                    image_id=image_id,
                    anchor_index=label.anchor_index,
                    role=NEGATIVE,
                    regression_target=None,
                    objectness_target=0.0,
                )
            )
            n_neg += 1
    return records


def _prediction_map(preds: Sequence[PredictionRecord]):
    return {(p.image_id, p.anchor_index): p for p in preds}


def objectness_loss(
    preds: Sequence[PredictionRecord], targets: Sequence[TargetRecord]
) -> float:
    """Mean L1 between sigmoid(logit) and the objectness target.

    Normalized by the number of target records (positives plus negatives).
    Every target must have a prediction.
    """
    if not targets:
        return 0.0
    pred_map = _prediction_map(preds)
    logits = np.empty(len(targets))
    wanted = np.empty(len(targets))
    for i, tgt in enumerate(targets):
        key = (tgt.image_id, tgt.anchor_index)
        if key not in pred_map:
            raise CoverageError(f"no prediction for target anchor {key}")
        logits[i] = pred_map[key].objectness_logit
        wanted[i] = tgt.objectness_target
    return float(np.abs(sigmoid(logits) - wanted).sum() / len(targets))


def objectness_logit_grads(
    preds: Sequence[PredictionRecord], targets: Sequence[TargetRecord]
) -> np.ndarray:
    """d(objectness_loss)/d(logit), one entry per target record."""
    if not targets:
        return np.zeros(0)
    pred_map = _prediction_map(preds)
    logits = np.empty(len(targets))
    wanted = np.empty(len(targets))
    for i, tgt in enumerate(targets):
        key = (tgt.image_id, tgt.anchor_index)
        if key not in pred_map:
            raise CoverageError(f"no prediction for target anchor {key}")
        logits[i] = pred_map[key].objectness_logit
        wanted[i] = tgt.objectness_target
    s = sigmoid(logits)
    return np.sign(s - wanted) * s * (1.0 - s) / len(targets)


def regression_loss(
    preds: Sequence[PredictionRecord], targets: Sequence[TargetRecord]
) -> float:
    """Mean absolute error over (l, r, t, b), averaged over positive anchors."""
    if not targets:
        return 0.0
    pred_map = _prediction_map(preds)
    total = 0.0
    for tgt in targets:
        if tgt.role != POSITIVE:
            raise RoleError(
                f"regression loss received a {tgt.role} record "
                f"(anchor {tgt.anchor_index})"
            )
        key = (tgt.image_id, tgt.anchor_index)
        if key not in pred_map:
            raise CoverageError(f"no prediction for target anchor {key}")
        pred = pred_map[key]
        if pred.regression_pred is None:
            raise CoverageError(f"no regression prediction for anchor {key}")
        diff = np.abs(
            np.asarray(pred.regression_pred, dtype=np.float64)
            - np.asarray(tgt.regression_target, dtype=np.float64)
        )
        total += float(diff.mean())
    return total / len(targets)


def bowl_loss(
    preds: Sequence[PredictionRecord], targets: Sequence[TargetRecord]
) -> tuple[float, float, float]:
    """(total, regression component, objectness component).

    Regression runs over positives only; objectness over positives and
    negatives together. Empty sets contribute 0 for their component.
    """
    positives = [t for t in targets if t.role == POSITIVE]
    reg = regression_loss(preds, positives)
    obj = objectness_loss(preds, targets)
    return (reg + obj, reg, obj)


def oln_loss(
    preds: Sequence[PredictionRecord], targets: Sequence[TargetRecord]
) -> tuple[float, float, float]:
    """Positives-only objective: negatives are dropped before evaluating."""
    positives = [t for t in targets if t.role == POSITIVE]
    return bowl_loss(preds, positives)


def classification_loss(
    preds: Sequence[PredictionRecord], targets: Sequence[TargetRecord]
) -> float:
    """Reference closed-world objective: binary cross-entropy on role labels.

    Positives count as class 1, negatives as class 0, averaged over all
    provided records.
    """
    if not targets:
        return 0.0
    pred_map = _prediction_map(preds)
    total = 0.0
    eps = 1e-12
    for tgt in targets:
        key = (tgt.image_id, tgt.anchor_index)
        if key not in pred_map:
            raise CoverageError(f"no prediction for target anchor {key}")
        p = sigmoid(pred_map[key].objectness_logit)
        label = 1.0 if tgt.role == POSITIVE else 0.0
        total += -(label * np.log(p + eps) + (1.0 - label) * np.log(1.0 - p + eps))
    return total / len(targets)


def write_targets(records: Sequence[TargetRecord], path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for rec in records:
            fields = [
                str(rec.image_id),
                str(rec.anchor_index),
                rec.role,
                _FLOAT_FMT.format(rec.objectness_target),
            ]
            if rec.regression_target is not None:
                fields.extend(_FLOAT_FMT.format(v) for v in rec.regression_target)
            fh.write(",".join(fields) + "\n")


def read_targets(path) -> list[TargetRecord]:
    records = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) not in (4, 8):
                raise ParseError(
                    f"expected 4 or 8 fields, got {len(parts)}", lineno
                )
            role = parts[2]
            if role not in (POSITIVE, NEGATIVE):
                raise ParseError(f"unknown role {role!r}", lineno)
            if role == POSITIVE and len(parts) != 8:
                raise ParseError("positive record missing regression fields", lineno)
            if role == NEGATIVE and len(parts) != 4:
                raise ParseError("negative record carries regression fields", lineno)
            try:
                image_id = int(parts[0])
                anchor_index = int(parts[1])
                objectness = float(parts[3])
                regression = (
                    tuple(float(v) for v in parts[4:8]) if len(parts) == 8 else None
                )
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from exc
            records.append(
                TargetRecord(
                    image_id=image_id,
                    anchor_index=anchor_index,
                    role=role,
                    regression_target=regression,
                    objectness_target=objectness,
                )
            )
    return records
