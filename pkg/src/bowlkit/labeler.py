"""Anchor classification: IoU-matched positives and exemplar-mined negatives.

Positives come from IoU matching against base-class ground truth. Negatives
are anchors whose pooled embedding is similar to the background exemplar set
above a threshold resolved per image (fixed, or Otsu over that image's
anchor similarities), guarded so that no negative overlaps a base-class box
at IoU >= 0.1. Everything else is ignored.

Also provides the self-correlation baseline labeler: patches whose mean
similarity to the rest of their image is high are treated as background.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .codebook import ExemplarSet, batch_s_max
from .embedding_store import PatchGrid
from .errors import ConfigError, DegenerateInputError
from .geometry import AnchorBox, Box, GtBox, iou

log = logging.getLogger("bowlkit.labeler")

POSITIVE = "positive"
NEGATIVE = "negative"
IGNORED = "ignored"

ROLES = (POSITIVE, NEGATIVE, IGNORED)

# No negative may overlap a base-class box above this IoU, regardless of
# its exemplar similarity.
NEGATIVE_GT_GUARD_IOU = 0.1


@dataclass(frozen=True)
class AnchorLabel:
    anchor_index: int
    role: str
    matched_gt: Optional[int] = None
    similarity: Optional[float] = None


@dataclass(frozen=True)
class GammaPolicy:
    """How the non-object similarity threshold is chosen.

    mode "fixed" uses ``value``; mode "otsu" thresholds each image's anchor
    similarity distribution by maximum between-class variance.
    """

    mode: str = "otsu"
    value: Optional[float] = None
    bins: int = 256

    def __post_init__(self):
        if self.mode not in ("fixed", "otsu"):
            raise ConfigError(f"unknown gamma mode {self.mode!r}")
        if self.mode == "fixed":
            if self.value is None:
                raise ConfigError("fixed gamma policy requires a value")
        if self.bins < 2:
            raise ConfigError(f"otsu needs at least 2 bins, got {self.bins}")


def pool_anchor_embedding(anchor: Box, grid: PatchGrid) -> Optional[np.ndarray]:
    """Unit mean of the normalized patch embeddings whose centers fall in the anchor.

    Containment is half-open: x in [anchor.x, anchor.x + w). Returns None when
    no patch center lies inside (the anchor carries no usable embedding).
    """
    pooled = pool_anchor_embeddings([anchor], grid)[0]
    return pooled


def pool_anchor_embeddings(
    anchors: Sequence[Box], grid: PatchGrid
) -> list[Optional[np.ndarray]]:
    """Vectorized pooling over many anchors of one normalized grid."""
    half = grid.patch_size / 2.0
    col_centers = np.arange(grid.grid_w) * grid.stride + half
    row_centers = np.arange(grid.grid_h) * grid.stride + half
    flat = grid.data.reshape(-1, grid.dim).astype(np.float64)
    out: list[Optional[np.ndarray]] = []
    for anchor in anchors:
        cols = (col_centers >= anchor.x) & (col_centers < anchor.x + anchor.w)
        rows = (row_centers >= anchor.y) & (row_centers < anchor.y + anchor.h)
        if not cols.any() or not rows.any():
            out.append(None)
            continue
        idx = (np.nonzero(rows)[0][:, None] * grid.grid_w + np.nonzero(cols)[0]).ravel()
        mean = flat[idx].mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0.0:
            out.append(None)
            continue
        out.append((mean / norm).astype(np.float32))
    return out


def otsu_gamma(similarities, bins: int = 256) -> float:
    """Bin-edge threshold maximizing between-class variance.

    Histograms the values into equal-width bins over [min, max]; candidate
    thresholds are the interior bin edges; ties resolve to the lowest
    threshold. All-equal inputs are degenerate.
    """
    values = np.asarray(similarities, dtype=np.float64).ravel()
    if values.size < 2:
        raise DegenerateInputError("otsu needs at least two values")
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        raise DegenerateInputError("otsu needs at least two distinct values")
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    counts = hist.astype(np.float64)
    centers = (edges[:-1] + edges[1:]) / 2.0
    # Left-to-right accumulation throughout, so results are reproducible
    # against a plain sequential scan over the same histogram.
    cum_counts = np.cumsum(counts)
    cum_mass = np.cumsum(counts * centers)
    total = cum_counts[-1]
    w0 = cum_counts[:-1]
    w1 = total - w0
    m0 = cum_mass[:-1]
    m1 = cum_mass[-1] - m0
    variance = np.zeros(bins - 1)
    valid = (w0 > 0) & (w1 > 0)
    mu0 = np.divide(m0, w0, out=np.zeros_like(m0), where=valid)
    mu1 = np.divide(m1, w1, out=np.zeros_like(m1), where=valid)
    variance[valid] = (w0 * w1)[valid] * (mu0 - mu1)[valid] ** 2
    split = int(np.argmax(variance))  # first max = lowest threshold
    return float(edges[split + 1])


def match_positives(
    anchors: Sequence[AnchorBox],
    gts: Sequence[GtBox],
    iou_threshold: float = 0.3,
) -> list[AnchorLabel]:
    """Label anchors positive when their best base-class IoU exceeds the threshold.

    Only base-class boxes participate; ``matched_gt`` indexes into the full
    ``gts`` sequence, ties resolved to the lower index. Non-positive anchors
    come back ignored.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ConfigError(f"iou threshold must be in (0, 1), got {iou_threshold}")
    labels = []
    base = [(gi, gt) for gi, gt in enumerate(gts) if gt.is_base]
    for ai, anchor in enumerate(anchors):
        best_iou = 0.0
        best_gt = None
        for gi, gt in base:
            value = iou(anchor.box, gt.box)
            if value > best_iou:  # strict: ties keep the lower gt index
                best_iou = value
                best_gt = gi
        if best_gt is not None and best_iou > iou_threshold:
            labels.append(AnchorLabel(ai, POSITIVE, matched_gt=best_gt))
        else:
            labels.append(AnchorLabel(ai, IGNORED))
    return labels


def label_negatives(
    anchors: Sequence[AnchorBox],
    grid: PatchGrid,
    exemplars: ExemplarSet,
    policy: GammaPolicy,
    gts: Sequence[GtBox],
    positives: Optional[Sequence[AnchorLabel]] = None,
    iou_pos: float = 0.3,
    levels: Optional[Sequence[int]] = None,
    return_similarities: bool = False,
):
    """Complete the anchor partition for one image.

    Computes pooled-embedding similarity to the exemplar set per anchor,
    resolves gamma per the policy over this image's similarity values, and
    labels negative every anchor that (a) is not positive, (b) has
    similarity strictly above gamma, and (c) has IoU below the guard with
    every base-class box. The remainder is ignored. ``levels`` restricts
    which pyramid levels may produce negatives.

    With ``return_similarities`` additionally returns the per-anchor
    similarity array (NaN where no embedding could be pooled) and the gamma
    actually used.
    """
    if len(exemplars) == 0:
        raise ConfigError("negative mining requires a nonempty exemplar set")
    if positives is None:
        positives = match_positives(anchors, gts, iou_threshold=iou_pos)
    if len(positives) != len(anchors):
        raise ConfigError("positive labels must cover every anchor")

    pooled = pool_anchor_embeddings([a.box for a in anchors], grid)
    have = [i for i, vec in enumerate(pooled) if vec is not None]
    sims = np.full(len(anchors), np.nan)
    if have:
        stacked = np.stack([pooled[i] for i in have])
        sims[have] = batch_s_max(stacked, exemplars)

    gamma = _resolve_gamma(policy, sims[have], grid.image_id)

    level_ok = (
        np.ones(len(anchors), dtype=bool)
        if levels is None
        else np.array([a.level in set(levels) for a in anchors])
    )
    base_boxes = [gt.box for gt in gts if gt.is_base]

    labels = []
    for ai, anchor in enumerate(anchors):
        if positives[ai].role == POSITIVE:
            labels.append(positives[ai])
            continue
        sim = sims[ai]
        if (
            gamma is not None
            and level_ok[ai]
            and not np.isnan(sim)
            and sim > gamma
            and all(iou(anchor.box, b) < NEGATIVE_GT_GUARD_IOU for b in base_boxes)
        ):
            labels.append(AnchorLabel(ai, NEGATIVE, similarity=float(sim)))
        else:
            labels.append(AnchorLabel(ai, IGNORED))
    if return_similarities:
        return labels, sims, gamma
    return labels


def _resolve_gamma(policy, sims, image_id):
    if policy.mode == "fixed":
        return float(policy.value)
    if sims.size < 2:
        log.warning("image %s: too few anchor similarities for otsu", image_id)
        return None
    try:
        return otsu_gamma(sims, bins=policy.bins)
    except DegenerateInputError:
        # All similarities equal: cannot separate, mine nothing on this image.
        log.warning("image %s: degenerate similarity distribution", image_id)
        return None


def label_anchors(
    anchors: Sequence[AnchorBox],
    grid: PatchGrid,
    exemplars: ExemplarSet,
    policy: GammaPolicy,
    gts: Sequence[GtBox],
    iou_pos: float = 0.3,
    levels: Optional[Sequence[int]] = None,
    return_similarities: bool = False,
):
    """Positive matching followed by negative mining; the full partition."""
    positives = match_positives(anchors, gts, iou_threshold=iou_pos)
    return label_negatives(
        anchors,
        grid,
        exemplars,
        policy,
        gts,
        positives=positives,
        iou_pos=iou_pos,
        levels=levels,
        return_similarities=return_similarities,
    )


def self_correlation_labels(grid: PatchGrid, quantile: float) -> np.ndarray:
    """Background mask from per-patch mean similarity to the rest of the image.

    The top floor(M * (1 - quantile)) patches by mean cosine similarity are
    background, ties resolved by lower row-major index. Requires
    0 < quantile < 1 and at least two patches.
    """
    if not 0.0 < quantile < 1.0:
        raise ConfigError(f"quantile must be in (0, 1), got {quantile}")
    m = grid.grid_h * grid.grid_w
    if m < 2:
        raise DegenerateInputError("self-correlation needs at least two patches")
    flat = grid.data.reshape(m, grid.dim).astype(np.float64)
    flat = flat / np.linalg.norm(flat, axis=1, keepdims=True)
    sims = flat @ flat.T
    means = (sims.sum(axis=1) - np.diag(sims)) / (m - 1)
    keep = int(np.floor(m * (1.0 - quantile)))
    order = np.argsort(-means, kind="stable")
    mask = np.zeros(m, dtype=bool)
    mask[order[:keep]] = True
    return mask.reshape(grid.grid_h, grid.grid_w)


def mask_to_negative_anchors(
    mask: np.ndarray,
    grid: PatchGrid,
    anchors: Sequence[AnchorBox],
    overlap_fraction: float = 0.9,
) -> list[AnchorLabel]:
    """Anchors covered by masked pixels at or above ``overlap_fraction``.

    The mask lives in the grid's patch geometry; masked patches paint their
    full (possibly overlapping) pixel rectangles. Overlap is exact area of
    the anchor against the painted region, denominated by the full anchor
    area (parts outside the image count as uncovered).
    """
    height = grid.pixel_height
    width = grid.pixel_width
    painted = np.zeros((height, width), dtype=np.float64)
    rows, cols = np.nonzero(np.asarray(mask, dtype=bool))
    s = grid.patch_size
    for r, c in zip(rows, cols):
        painted[r * grid.stride : r * grid.stride + s,
                c * grid.stride : c * grid.stride + s] = 1.0

    labels = []
    for ai, anchor in enumerate(anchors):
        box = anchor.box
        wy = _cell_weights(box.y, box.y + box.h, height)
        wx = _cell_weights(box.x, box.x + box.w, width)
        overlap = float(wy @ painted @ wx)
        if overlap / box.area >= overlap_fraction:
            labels.append(AnchorLabel(ai, NEGATIVE))
        else:
            labels.append(AnchorLabel(ai, IGNORED))
    return labels


def _cell_weights(lo: float, hi: float, n: int) -> np.ndarray:
    """Overlap length of [lo, hi] with each unit pixel cell [i, i+1)."""
    i = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(hi, i + 1.0) - np.maximum(lo, i), 0.0, 1.0)
