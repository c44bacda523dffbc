"""Boxes, binary masks, overlap measures, connected components, grid proposals, NMS.

Boxes use the half-open pixel convention: a box (x0, y0, x1, y1) covers the
pixels with x0 <= x < x1 and y0 <= y < y1, so areas and intersections are
exact integer pixel counts.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class BBox:
    """Axis-aligned pixel box, half-open on the right and bottom edges."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {(self.x0, self.y0, self.x1, self.y1)}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def contains(self, other: "BBox") -> bool:
        """True if `other` lies completely inside this box."""
        return (
            self.x0 <= other.x0
            and self.y0 <= other.y0
            and other.x1 <= self.x1
            and other.y1 <= self.y1
        )


@dataclass
class BinaryMask:
    """Boolean pixel grid of shape (height, width)."""

    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {self.bits.shape}")

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def area(self) -> int:
        return int(self.bits.sum())


@dataclass
class ProposalSet:
    """Ordered, deterministic list of candidate boxes for one image size."""

    boxes: list[BBox] = field(default_factory=list)

    def __post_init__(self):
        if len(self.boxes) < 1:
            raise ValueError("a proposal set needs at least one box")

    def __len__(self) -> int:
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)

    def __getitem__(self, i: int) -> BBox:
        return self.boxes[i]

    def coords(self) -> np.ndarray:
        """(B, 4) int array of (x0, y0, x1, y1), for vectorized overlap math."""
        return np.array([(b.x0, b.y0, b.x1, b.y1) for b in self.boxes], dtype=np.int64)


def box_iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; symmetric, in [0, 1]."""
    ix = min(a.x1, b.x1) - max(a.x0, b.x0)
    iy = min(a.y1, b.y1) - max(a.y0, b.y0)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def box_iou_many(box: BBox, coords: np.ndarray) -> np.ndarray:
    """IoU of one box against an (M, 4) coordinate array."""
    ix = np.minimum(box.x1, coords[:, 2]) - np.maximum(box.x0, coords[:, 0])
    iy = np.minimum(box.y1, coords[:, 3]) - np.maximum(box.y0, coords[:, 1])
    inter = np.maximum(ix, 0) * np.maximum(iy, 0)
    areas = (coords[:, 2] - coords[:, 0]) * (coords[:, 3] - coords[:, 1])
    return inter / (box.area + areas - inter)


def connected_components(mask: BinaryMask) -> list[BinaryMask]:
    """Split a mask into 4-connected components.

    Components are returned in order of their first set pixel in a row-major
    scan; their union equals the input and they are pairwise disjoint.
    """
    bits = mask.bits
    h, w = bits.shape
    labels = np.zeros((h, w), dtype=np.int32)
    components: list[BinaryMask] = []
    for r in range(h):
        for c in range(w):
            if not bits[r, c] or labels[r, c]:
                continue
            label = len(components) + 1
            comp = np.zeros((h, w), dtype=bool)
            queue = deque([(r, c)])
            labels[r, c] = label
            while queue:
                y, x = queue.popleft()
                comp[y, x] = True
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < h and 0 <= nx < w and bits[ny, nx] and not labels[ny, nx]:
                        labels[ny, nx] = label
                        queue.append((ny, nx))
            components.append(BinaryMask(comp))
    return components


def mask_box_iou(component: BinaryMask, box: BBox) -> float:
    """IoU between a mask component and the rasterization of a box.

    The box must already be expressed in the mask's coordinate frame
    (see scale_box). Pixels outside the mask grid count toward the box area.
    """
    if component.area == 0:
        raise ValueError("mask_box_iou on an empty component")
    x0 = max(box.x0, 0)
    y0 = max(box.y0, 0)
    x1 = min(box.x1, component.width)
    y1 = min(box.y1, component.height)
    inter = int(component.bits[y0:y1, x0:x1].sum()) if (x0 < x1 and y0 < y1) else 0
    union = component.area + box.area - inter
    return inter / union


def scale_box(box: BBox, from_size: tuple[int, int], to_size: tuple[int, int]) -> BBox:
    """Map a box between coordinate frames by nearest-pixel corner scaling.

    Sizes are (width, height). The result keeps at least one pixel of extent
    and stays inside the target frame.
    """
    fw, fh = from_size
    tw, th = to_size
    sx, sy = tw / fw, th / fh
    x0 = int(round(box.x0 * sx))
    y0 = int(round(box.y0 * sy))
    x1 = int(round(box.x1 * sx))
    y1 = int(round(box.y1 * sy))
    x0 = min(max(x0, 0), tw - 1)
    y0 = min(max(y0, 0), th - 1)
    x1 = min(max(x1, x0 + 1), tw)
    y1 = min(max(y1, y0 + 1), th)
    return BBox(x0, y0, x1, y1)


def generate_proposals(
    image_w: int,
    image_h: int,
    scales: list[int],
    aspect_ratios: list[float],
    stride: float,
) -> ProposalSet:
    """Deterministic sliding-window grid of boxes, clipped and deduplicated.

    For each (scale, ratio) pair a window of size roughly
    (scale*sqrt(ratio), scale/sqrt(ratio)) slides at steps of stride*scale
    pixels. Windows larger than the image collapse to the clipped full-image
    box. Order is scale-major, then ratio, then row-major; duplicates keep
    their first occurrence.
    """
    if not scales or not aspect_ratios:
        raise ValueError("scales and aspect_ratios must be nonempty")
    if not 0.0 < stride <= 1.0:
        raise ValueError(f"stride must be in (0, 1], got {stride}")
    boxes: list[BBox] = []
    seen: set[tuple[int, int, int, int]] = set()
    for scale in scales:
        step = max(1, int(round(stride * scale)))
        for ratio in aspect_ratios:
            bw = max(1, int(round(scale * ratio**0.5)))
            bh = max(1, int(round(scale / ratio**0.5)))
            xs = list(range(0, image_w - bw + 1, step)) if bw <= image_w else []
            ys = list(range(0, image_h - bh + 1, step)) if bh <= image_h else []
            if not xs or not ys:
                # window exceeds the image in some direction: single clipped box
                xs = xs or [0]
                ys = ys or [0]
                bw = min(bw, image_w)
                bh = min(bh, image_h)
            for y0 in ys:
                for x0 in xs:
                    key = (x0, y0, x0 + bw, y0 + bh)
                    if key not in seen:
                        seen.add(key)
                        boxes.append(BBox(*key))
    if not boxes:
        raise ValueError("proposal parameters produced zero boxes")
    return ProposalSet(boxes)


def nms(boxes: ProposalSet | list[BBox], scores, iou_thresh: float) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices.

    Boxes are visited in descending score order (ties broken by lower index)
    and suppressed when IoU with an already-kept box exceeds the threshold.
    """
    box_list = list(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(box_list):
        raise ValueError(f"{len(scores)} scores for {len(box_list)} boxes")
    order = np.argsort(-scores, kind="stable")
    kept: list[int] = []
    for i in order:
        i = int(i)
        if all(box_iou(box_list[i], box_list[j]) <= iou_thresh for j in kept):
            kept.append(i)
    return kept
