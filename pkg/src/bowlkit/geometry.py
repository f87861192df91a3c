"""Boxes, IoU, multi-scale anchor generation, and centerness."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError, FormatError

# Standard five-level pyramid configuration.
DEFAULT_STRIDES = (4, 8, 16, 32, 64)
DEFAULT_SCALES = (32, 64, 128, 256, 512)
DEFAULT_RATIOS = (0.5, 1.0, 2.0)


@dataclass(frozen=True)
class Box:
    """Axis-aligned pixel box: top-left corner plus extents."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise FormatError(f"box extents must be positive, got {self.w}x{self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)


@dataclass(frozen=True)
class GtBox:
    """Ground-truth box with class id and base (known) vs novel flag."""

    box: Box
    class_id: int
    is_base: bool = True

    def __post_init__(self):
        if self.class_id < 0:
            raise FormatError(f"class_id must be >= 0, got {self.class_id}")


@dataclass(frozen=True)
class AnchorBox:
    """Generated anchor: box plus pyramid level and center location."""

    box: Box
    level: int
    cx: float
    cy: float


@dataclass(frozen=True)
class AnchorConfig:
    strides: tuple[int, ...] = DEFAULT_STRIDES
    scales: tuple[int, ...] = DEFAULT_SCALES
    aspect_ratios: tuple[float, ...] = DEFAULT_RATIOS

    def __post_init__(self):
        if len(self.strides) != len(self.scales):
            raise ConfigError("strides and scales must have the same length")
        if not self.strides:
            raise ConfigError("at least one pyramid level is required")
        if not self.aspect_ratios or any(r <= 0 for r in self.aspect_ratios):
            raise ConfigError("aspect ratios must be nonempty and positive")


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area; 0 for disjoint boxes."""
    ix0 = max(a.x, b.x)
    iy0 = max(a.y, b.y)
    ix1 = min(a.x + a.w, b.x + b.w)
    iy1 = min(a.y + a.h, b.y + b.h)
    iw = ix1 - ix0
    ih = iy1 - iy0
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def generate_anchors(
    image_w: int, image_h: int, config: AnchorConfig = AnchorConfig()
) -> list[AnchorBox]:
    """One anchor per (cell, aspect ratio) per level.

    Cells tile each level at its stride with ceil(dim / stride) cells per
    axis; centers sit at (col * stride + stride / 2, row * stride + stride / 2).
    Anchors may extend past the image border; none are clipped or removed.
    Ordering is level-major, then row, col, ratio.
    """
    if image_w < min(config.strides) or image_h < min(config.strides):
        raise ConfigError(
            f"image {image_w}x{image_h} smaller than the smallest stride"
        )
    anchors = []
    for level, (stride, scale) in enumerate(zip(config.strides, config.scales)):
        rows = math.ceil(image_h / stride)
        cols = math.ceil(image_w / stride)
        shapes = [
            (scale * math.sqrt(ratio), scale / math.sqrt(ratio))
            for ratio in config.aspect_ratios
        ]
        for row in range(rows):
            cy = row * stride + stride / 2.0
            for col in range(cols):
                cx = col * stride + stride / 2.0
                for w, h in shapes:
                    anchors.append(
                        AnchorBox(
                            box=Box(cx - w / 2.0, cy - h / 2.0, w, h),
                            level=level,
                            cx=cx,
                            cy=cy,
                        )
                    )
    return anchors


def ltrb_target(location: tuple[float, float], gt: Box):
    """Distances (l, r, t, b) from a location to the four sides of ``gt``.

    Returns None when the location is not strictly inside the box (no
    regression target can be formed there).
    """
    x, y = location
    l = x - gt.x
    r = gt.x + gt.w - x
    t = y - gt.y
    b = gt.y + gt.h - y
    if min(l, r, t, b) <= 0:
        return None
    return (l, r, t, b)


def centerness(location: tuple[float, float], gt: Box) -> float:
    """Localization quality of a location inside ``gt``.

    1 at the box center, 0 on the boundary or outside:
    sqrt((min(l, r) / max(l, r)) * (min(t, b) / max(t, b))).
    """
    ltrb = ltrb_target(location, gt)
    if ltrb is None:
        return 0.0
    l, r, t, b = ltrb
    return math.sqrt((min(l, r) / max(l, r)) * (min(t, b) / max(t, b)))
