"""Axis-aligned bounding-box arithmetic: IoU, crop-frame transforms, clamping.

Conventions used everywhere in this package:

- (xmin, ymin) is the top-left corner, x grows rightward, y grows downward.
- Coordinates are half-open pixel intervals: area = (xmax - xmin) * (ymax - ymin).
- Boxes are real-valued (rescaled model outputs are fractional).
- Boxes that merely touch along an edge have IoU 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


class GeometryError(ValueError):
    """Base class for invalid geometric inputs."""


class ZeroAreaAfterClamp(GeometryError):
    """Clamping to image bounds left no positive-area box."""


class NoPositiveOverlap(GeometryError):
    """Two boxes were required to intersect with positive area but do not."""


@dataclass(frozen=True)
class BBox:
    """Axis-aligned rectangle with strictly positive area and finite coordinates."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        for v in (self.xmin, self.ymin, self.xmax, self.ymax):
            if not math.isfinite(v):
                raise GeometryError(f"non-finite coordinate in {self.as_tuple()}")
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise GeometryError(f"degenerate box {self.as_tuple()}: needs xmin < xmax and ymin < ymax")

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.xmin, self.ymin, self.xmax, self.ymax)

    def translate(self, dx: float, dy: float) -> BBox:
        return BBox(self.xmin + dx, self.ymin + dy, self.xmax + dx, self.ymax + dy)

    def expand(self, fraction: float) -> BBox:
        """Grow each side outward by `fraction` of the box's own width/height."""
        dx = self.width * fraction
        dy = self.height * fraction
        return BBox(self.xmin - dx, self.ymin - dy, self.xmax + dx, self.ymax + dy)

    def contains(self, other: BBox, tol: float = 0.0) -> bool:
        return (
            other.xmin >= self.xmin - tol
            and other.ymin >= self.ymin - tol
            and other.xmax <= self.xmax + tol
            and other.ymax <= self.ymax + tol
        )


@dataclass(frozen=True)
class ImageDims:
    """Pixel dimensions of an image."""

    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"image dims must be >= 1, got {self.width}x{self.height}")

    def as_box(self) -> BBox:
        return BBox(0.0, 0.0, float(self.width), float(self.height))


def intersect(a: BBox, b: BBox) -> BBox | None:
    """Intersection box, or None when overlap has zero area (incl. edge touching)."""
    x0 = max(a.xmin, b.xmin)
    y0 = max(a.ymin, b.ymin)
    x1 = min(a.xmax, b.xmax)
    y1 = min(a.ymax, b.ymax)
    if x1 <= x0 or y1 <= y0:
        return None
    return BBox(x0, y0, x1, y1)


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union in [0, 1]; 0 for disjoint or edge-touching boxes."""
    inter = intersect(a, b)
    if inter is None:
        return 0.0
    ai = inter.area
    union = a.area + b.area - ai
    return ai / union


def clamp(box: BBox, dims: ImageDims) -> BBox:
    """Limit coordinates to [0, width] x [0, height].

    Raises ZeroAreaAfterClamp when the box lies entirely outside the image.
    """
    x0 = min(max(box.xmin, 0.0), float(dims.width))
    y0 = min(max(box.ymin, 0.0), float(dims.height))
    x1 = min(max(box.xmax, 0.0), float(dims.width))
    y1 = min(max(box.ymax, 0.0), float(dims.height))
    if x1 <= x0 or y1 <= y0:
        raise ZeroAreaAfterClamp(f"{box.as_tuple()} has no area inside {dims.width}x{dims.height}")
    return BBox(x0, y0, x1, y1)


def crop_to_original(crop_region: BBox, local: BBox, dims: ImageDims | None = None) -> BBox:
    """Map a box from a crop's coordinate frame back to the original image frame.

    `local` is expressed with its origin at crop_region's top-left corner at the
    same pixel scale. The result is the pure translation by the crop offset,
    clamped to the image bounds when `dims` is given (raising ZeroAreaAfterClamp
    if nothing remains).
    """
    moved = local.translate(crop_region.xmin, crop_region.ymin)
    if dims is not None:
        moved = clamp(moved, dims)
    return moved


def original_to_crop(crop_region: BBox, global_box: BBox) -> BBox:
    """Map a box from the original image frame into a crop's coordinate frame.

    The box is first restricted to the crop window (it must intersect it with
    positive area), then translated so the crop's top-left corner becomes the
    origin. Inverse of crop_to_original for boxes fully inside the crop.
    """
    visible = intersect(crop_region, global_box)
    if visible is None:
        raise NoPositiveOverlap(
            f"{global_box.as_tuple()} does not intersect crop {crop_region.as_tuple()}"
        )
    return visible.translate(-crop_region.xmin, -crop_region.ymin)
