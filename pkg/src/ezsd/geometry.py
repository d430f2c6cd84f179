"""Box arithmetic shared by every stage of the pipeline.

Boxes are ``(x1, y1, x2, y2)`` in continuous pixel coordinates. Scalar helpers
accept a :class:`Box` or any length-4 sequence; the ``pairwise_*`` and array
helpers work on ``(N, 4)`` float arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np


class DegenerateBoxError(ValueError):
    """A box with zero or negative area where a usable region is required."""


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise DegenerateBoxError(f"invalid box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.as_tuple(), dtype=np.float64)

    def __iter__(self):
        return iter(self.as_tuple())

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(x, y, x + w, y + h)


BoxLike = Union[Box, Sequence[float], np.ndarray]


def _coords(box: BoxLike) -> tuple[float, float, float, float]:
    x1, y1, x2, y2 = (float(v) for v in box)
    return x1, y1, x2, y2


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor grid layout. ``ratios`` are height / width."""

    stride: float = 32
    sizes: tuple[float, ...] = (32, 64, 128, 256, 512)
    ratios: tuple[float, ...] = (1.0, 2.0, 0.5)

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(float(s) for s in self.sizes))
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if self.stride <= 0 or not self.sizes or not self.ratios:
            raise ValueError("anchor config needs a positive stride and nonempty sizes/ratios")
        if min(self.sizes) <= 0 or min(self.ratios) <= 0:
            raise ValueError("anchor sizes and ratios must be positive")

    @property
    def num_shapes(self) -> int:
        return len(self.sizes) * len(self.ratios)


@dataclass(frozen=True)
class ResizeSpec:
    max_long_edge: int = 1333
    max_short_edge: int = 800

    def __post_init__(self):
        if not self.max_long_edge >= self.max_short_edge > 0:
            raise ValueError("need max_long_edge >= max_short_edge > 0")


def area(box: BoxLike) -> float:
    x1, y1, x2, y2 = _coords(box)
    return max(0.0, x2 - x1) * max(0.0, y2 - y1)


def clip_box(box: BoxLike, bounds: BoxLike) -> tuple[float, float, float, float]:
    x1, y1, x2, y2 = _coords(box)
    bx1, by1, bx2, by2 = _coords(bounds)
    return (min(max(x1, bx1), bx2), min(max(y1, by1), by2),
            min(max(x2, bx1), bx2), min(max(y2, by1), by2))


def enlarge(box: BoxLike, factor: float, bounds: BoxLike | None = None) -> Box:
    """Scale a box about its center, optionally clipping to ``bounds``.

    Raises:
        DegenerateBoxError: the clipped result has zero area.
    """
    if factor <= 0:
        raise ValueError(f"enlarge factor must be positive, got {factor}")
    x1, y1, x2, y2 = _coords(box)
    cx, cy = 0.5 * (x1 + x2), 0.5 * (y1 + y2)
    hw, hh = 0.5 * (x2 - x1) * factor, 0.5 * (y2 - y1) * factor
    out = (cx - hw, cy - hh, cx + hw, cy + hh)
    if bounds is not None:
        out = clip_box(out, bounds)
    if not (out[0] < out[2] and out[1] < out[3]):
        raise DegenerateBoxError(f"enlarged box {out} has no area inside bounds")
    return Box(*out)


def _intersection(a: BoxLike, b: BoxLike) -> float:
    ax1, ay1, ax2, ay2 = _coords(a)
    bx1, by1, bx2, by2 = _coords(b)
    w = min(ax2, bx2) - max(ax1, bx1)
    h = min(ay2, by2) - max(ay1, by1)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: BoxLike, b: BoxLike) -> float:
    inter = _intersection(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (area(a) + area(b) - inter)


def iogt(proposal: BoxLike, gt: BoxLike) -> float:
    """Fraction of ``gt`` covered by ``proposal``."""
    return _intersection(proposal, gt) / area(gt)


def as_boxes(boxes: Iterable[BoxLike] | np.ndarray) -> np.ndarray:
    arr = np.asarray([tuple(b) for b in boxes] if not isinstance(boxes, np.ndarray) else boxes,
                     dtype=np.float64)
    return arr.reshape(-1, 4)


def box_areas(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.clip(boxes[:, 2] - boxes[:, 0], 0, None) * np.clip(boxes[:, 3] - boxes[:, 1], 0, None)


def pairwise_intersection(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_boxes(a)
    b = as_boxes(b)
    w = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    h = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    return np.clip(w, 0, None) * np.clip(h, 0, None)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N, M) IoU matrix."""
    inter = pairwise_intersection(a, b)
    union = box_areas(as_boxes(a))[:, None] + box_areas(as_boxes(b))[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def pairwise_iogt(proposals: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """(N, M) matrix of intersection over the area of each GT column."""
    inter = pairwise_intersection(proposals, gts)
    return inter / box_areas(as_boxes(gts))[None, :]


def nms(boxes, scores, iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression.

    Boxes are visited by descending score (ties broken by lower index); a box is
    dropped when its IoU with an already kept box exceeds ``iou_threshold``.

    Returns:
        Kept indices in selection order.
    """
    boxes = as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) != len(scores):
        raise ValueError("boxes and scores differ in length")
    if len(boxes) == 0:
        return []
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    order = np.argsort(-scores, kind="stable")
    areas = box_areas(boxes)
    alive = np.ones(len(order), dtype=bool)
    keep: list[int] = []
    for pos, idx in enumerate(order):
        if not alive[pos]:
            continue
        keep.append(int(idx))
        rest = order[pos + 1:]
        if len(rest) == 0:
            break
        b = boxes[idx]
        w = np.minimum(b[2], boxes[rest, 2]) - np.maximum(b[0], boxes[rest, 0])
        h = np.minimum(b[3], boxes[rest, 3]) - np.maximum(b[1], boxes[rest, 1])
        inter = np.clip(w, 0, None) * np.clip(h, 0, None)
        ious = inter / (areas[idx] + areas[rest] - inter)
        alive[pos + 1:] &= ~(ious > iou_threshold)
    return keep


def batched_nms(boxes, scores, labels, iou_threshold: float) -> list[int]:
    """Class-wise NMS; returns kept indices sorted by descending score."""
    boxes = as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    keep: list[int] = []
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        keep.extend(int(idx[k]) for k in nms(boxes[idx], scores[idx], iou_threshold))
    keep.sort(key=lambda i: (-scores[i], i))
    return keep


def anchor_shapes(cfg: AnchorConfig) -> np.ndarray:
    """(S, 2) array of (width, height) per (size, ratio), sizes outer."""
    shapes = []
    for s in cfg.sizes:
        for r in cfg.ratios:
            root = math.sqrt(r)
            shapes.append((s / root, s * root))
    return np.asarray(shapes, dtype=np.float64)


def generate_anchors(image_w: float, image_h: float, cfg: AnchorConfig = AnchorConfig(),
                     clip: bool = True) -> np.ndarray:
    """Anchor boxes over a stride grid, ordered row, column, size, ratio.

    Every grid cell that overlaps the image contributes one anchor per
    (size, ratio). Anchors are clipped to the image and any that collapse to
    zero area are dropped.
    """
    if image_w <= 0 or image_h <= 0:
        raise ValueError("image dimensions must be positive")
    nx = math.ceil(image_w / cfg.stride)
    ny = math.ceil(image_h / cfg.stride)
    cx = cfg.stride * (np.arange(nx) + 0.5)
    cy = cfg.stride * (np.arange(ny) + 0.5)
    shapes = anchor_shapes(cfg)
    gy, gx = np.meshgrid(cy, cx, indexing="ij")
    centers = np.stack([gx.ravel(), gy.ravel()], axis=1)
    c = centers[:, None, :]
    half = 0.5 * shapes[None, :, :]
    anchors = np.concatenate([c - half, c + half], axis=2).reshape(-1, 4)
    if clip:
        anchors[:, [0, 2]] = np.clip(anchors[:, [0, 2]], 0, image_w)
        anchors[:, [1, 3]] = np.clip(anchors[:, [1, 3]], 0, image_h)
        good = (anchors[:, 2] > anchors[:, 0]) & (anchors[:, 3] > anchors[:, 1])
        anchors = anchors[good]
    return anchors


def resize_keep_ratio(w: int, h: int, spec: ResizeSpec = ResizeSpec()) -> tuple[int, int, float]:
    """Scale so the long edge fits ``max_long_edge`` and the short edge ``max_short_edge``."""
    if w <= 0 or h <= 0:
        raise ValueError("image dimensions must be positive")
    long_edge, short_edge = max(w, h), min(w, h)
    scale = min(spec.max_long_edge / long_edge, spec.max_short_edge / short_edge)
    return int(math.floor(w * scale + 0.5)), int(math.floor(h * scale + 0.5)), scale


def encode_deltas(proposals: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """(dx, dy, dw, dh) taking each proposal onto its target box."""
    p = as_boxes(proposals)
    g = as_boxes(targets)
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    gw, gh = g[:, 2] - g[:, 0], g[:, 3] - g[:, 1]
    dx = ((g[:, 0] + 0.5 * gw) - (p[:, 0] + 0.5 * pw)) / pw
    dy = ((g[:, 1] + 0.5 * gh) - (p[:, 1] + 0.5 * ph)) / ph
    return np.stack([dx, dy, np.log(gw / pw), np.log(gh / ph)], axis=1)


# exp() overflow guard for predicted size deltas
MAX_LOG_SCALE = math.log(1000.0 / 16)


def decode_deltas(proposals: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    p = as_boxes(proposals)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    cx = p[:, 0] + 0.5 * pw + d[:, 0] * pw
    cy = p[:, 1] + 0.5 * ph + d[:, 1] * ph
    w = pw * np.exp(np.minimum(d[:, 2], MAX_LOG_SCALE))
    h = ph * np.exp(np.minimum(d[:, 3], MAX_LOG_SCALE))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    out = as_boxes(boxes).copy()
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0, width)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0, height)
    return out
