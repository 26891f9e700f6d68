"""Box representations, overlap measures and box regression losses.

Boxes are exchanged in corner form ``(x1, y1, x2, y2)`` in absolute pixels.
Regression heads work on normalized center-size ``(cx, cy, w, h)`` vectors;
the tensor helpers at the bottom of this module operate on those.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch

SMALL_AREA = 64 * 64
LARGE_AREA = 128 * 128


class DegenerateBoxError(ValueError):
    """Raised for boxes with non-positive width/height or non-finite coordinates."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in corner convention.

    ``image_size`` is the optional ``(width, height)`` of the image the box
    lives in; it is only needed for normalization.
    """

    x1: float
    y1: float
    x2: float
    y2: float
    image_size: Optional[tuple[float, float]] = None

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise DegenerateBoxError(f"non-finite box coordinates {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise DegenerateBoxError(f"box {coords} has non-positive width or height")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def to_center_size(self) -> tuple[float, float, float, float]:
        return convert_box(self.as_list(), "corner")

    @classmethod
    def from_center_size(cls, cx, cy, w, h, image_size=None) -> "Box":
        x1, y1, x2, y2 = convert_box((cx, cy, w, h), "center")
        return cls(x1, y1, x2, y2, image_size)

    def normalized(self) -> "Box":
        """Return the box scaled into the unit square of its image."""
        if self.image_size is None:
            raise ValueError("normalization needs the box's image_size")
        w, h = self.image_size
        return Box(self.x1 / w, self.y1 / h, self.x2 / w, self.y2 / h, (1.0, 1.0))

    def denormalized(self, image_size: tuple[float, float]) -> "Box":
        w, h = image_size
        return Box(self.x1 * w, self.y1 * h, self.x2 * w, self.y2 * h, tuple(image_size))


def convert_box(values: Sequence[float], mode: str) -> tuple[float, float, float, float]:
    """Convert a 4-vector between corner and center-size form.

    ``mode`` names the form of the *input*: ``"corner"`` yields center-size,
    ``"center"`` yields corner coordinates.
    """
    a, b, c, d = (float(v) for v in values)
    if mode == "corner":
        w, h = c - a, d - b
        if not (w > 0 and h > 0):
            raise DegenerateBoxError(f"degenerate corner box {tuple(values)}")
        return (a + c) / 2, (b + d) / 2, w, h
    if mode == "center":
        if not (c > 0 and d > 0):
            raise DegenerateBoxError(f"degenerate center-size box {tuple(values)}")
        return a - c / 2, b - d / 2, a + c / 2, b + d / 2
    raise ValueError(f"unknown box mode {mode!r}; expected 'corner' or 'center'")


def _as_box(box) -> Box:
    if isinstance(box, Box):
        return box
    return Box(*box)


def _intersection(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a, b) -> float:
    a, b = _as_box(a), _as_box(b)
    inter = _intersection(a, b)
    return inter / (a.area + b.area - inter)


def giou(a, b) -> float:
    """Generalized IoU; lies in (-1, 1]."""
    a, b = _as_box(a), _as_box(b)
    inter = _intersection(a, b)
    union = a.area + b.area - inter
    enclosing = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    return inter / union - (enclosing - union) / enclosing


def smooth_l1(pred: Sequence[float], target: Sequence[float], beta: float = 1.0) -> float:
    if len(pred) != len(target):
        raise ValueError(f"length mismatch: {len(pred)} vs {len(target)}")
    if beta <= 0:
        raise ValueError("beta must be positive")
    if len(pred) == 0:
        raise ValueError("smooth_l1 of empty vectors")
    total = 0.0
    for p, t in zip(pred, target):
        x = abs(float(p) - float(t))
        total += 0.5 * x * x / beta if x < beta else x - 0.5 * beta
    return total / len(pred)


def grounding_loss(pred, gt, beta: float = 1.0) -> float:
    """Smooth-L1 on normalized center-size vectors plus ``1 - giou``.

    Both arguments are normalized center-size 4-vectors ``(cx, cy, w, h)``.
    """
    pred = tuple(float(v) for v in pred)
    gt = tuple(float(v) for v in gt)
    for v in (pred, gt):
        if not all(0.0 <= c <= 1.0 for c in v):
            raise ValueError(f"box {v} is not normalized to [0, 1]")
    reg = smooth_l1(pred, gt, beta)
    overlap = giou(convert_box(pred, "center"), convert_box(gt, "center"))
    return reg + (1.0 - overlap)


def area_bin(box) -> str:
    """Classify a pixel-space box as ``small``, ``medium`` or ``large``."""
    area = _as_box(box).area
    if area < SMALL_AREA:
        return "small"
    if area < LARGE_AREA:
        return "medium"
    return "large"


def anchor_grid(image_size: float, cell_size: float, scales=(1, 2)) -> list:
    """One anchor per grid cell and scale, centered on the cell, clipped to the image.

    Returned as corner tuples, ordered scale-major: every cell of the first
    scale, then every cell of the next.
    """
    n = int(round(image_size / cell_size))
    out = []
    for s in scales:
        half = s * cell_size / 2
        for r in range(n):
            for c in range(n):
                cx, cy = (c + 0.5) * cell_size, (r + 0.5) * cell_size
                out.append((max(0.0, cx - half), max(0.0, cy - half),
                            min(float(image_size), cx + half), min(float(image_size), cy + half)))
    return out


# -- tensor versions used by the training graphs ---------------------------


def cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def xyxy_to_cxcywh(boxes: torch.Tensor) -> torch.Tensor:
    x1, y1, x2, y2 = boxes.unbind(-1)
    return torch.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], dim=-1)


def paired_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise GIoU of two ``(..., 4)`` corner-form tensors."""
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    elt = torch.minimum(a[..., :2], b[..., :2])
    erb = torch.maximum(a[..., 2:], b[..., 2:])
    enclosing = (erb[..., 0] - elt[..., 0]) * (erb[..., 1] - elt[..., 1])
    return inter / union - (enclosing - union) / enclosing


def pairwise_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``(N, M)`` IoU matrix between corner-form boxes ``a (N, 4)`` and ``b (M, 4)``."""
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def grounding_loss_tensor(pred: torch.Tensor, gt: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """Batched grounding loss on ``(B, 4)`` normalized center-size tensors, averaged over B."""
    diff = (pred - gt).abs()
    reg = torch.where(diff < beta, 0.5 * diff**2 / beta, diff - 0.5 * beta).mean(dim=-1)
    overlap = paired_giou(cxcywh_to_xyxy(pred), cxcywh_to_xyxy(gt))
    return (reg + 1.0 - overlap).mean()
