"""Box and binary-mask primitives.

Boxes live in normalized ``[0, 1]`` image coordinates as ``(x1, y1, x2, y2)``.
Coordinates are stored on a fixed dyadic grid (``2**-40``) so that reflections
such as ``x -> 1 - x`` are exact in floating point and flip round trips are
bit-exact. The grid spacing is ~1e-12, far below any pixel resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

GRID_BITS = 40
_GRID = float(2**GRID_BITS)


def snap(value: float) -> float:
    """Round a coordinate onto the storage grid."""
    return round(value * _GRID) / _GRID


@dataclass(frozen=True, order=True)
class BBox:
    """Axis-aligned box in normalized coordinates with positive area.

    Out-of-range or degenerate coordinates raise ``ValueError``; use
    :meth:`clipped` to clamp explicitly.
    """

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = tuple(float(v) for v in (self.x1, self.y1, self.x2, self.y2))
        if not all(math.isfinite(v) for v in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        x1, y1, x2, y2 = (snap(v) for v in coords)
        if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
            raise ValueError(f"invalid box {coords}: need 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1")
        object.__setattr__(self, "x1", x1)
        object.__setattr__(self, "y1", y1)
        object.__setattr__(self, "x2", x2)
        object.__setattr__(self, "y2", y2)

    @classmethod
    def clipped(cls, x1: float, y1: float, x2: float, y2: float) -> "BBox":
        """Clamp coordinates into ``[0, 1]`` first. Still raises if the result has zero area."""
        return cls(*(min(max(float(v), 0.0), 1.0) for v in (x1, y1, x2, y2)))

    @classmethod
    def from_array(cls, values, clip: bool = False) -> "BBox":
        x1, y1, x2, y2 = (float(v) for v in values)
        return cls.clipped(x1, y1, x2, y2) if clip else cls(x1, y1, x2, y2)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Read-only boolean occupancy grid of shape ``(height, width)``."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=bool, copy=True)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError(f"mask must be a non-empty 2-D array, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def zeros(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.data))

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.data, other.data))

    def __hash__(self) -> int:
        return hash((self.shape, np.packbits(self.data).tobytes()))

    def __repr__(self) -> str:
        return f"BinaryMask({self.width}x{self.height}, area={self.area})"


@dataclass(frozen=True)
class Instance:
    """One detection or annotation.

    ``view`` is the serialized augmentation token of the view that produced the
    instance (``None`` for ground truth).
    """

    box: BBox
    score: float = 1.0
    label: str = "object"
    mask: Optional[BinaryMask] = field(default=None, compare=True)
    view: Optional[str] = None

    def __post_init__(self) -> None:
        score = float(self.score)
        if not (0.0 <= score <= 1.0):
            raise ValueError(f"score {score} outside [0, 1]")
        object.__setattr__(self, "score", score)
        if not isinstance(self.box, BBox):
            raise TypeError(f"box must be a BBox, got {type(self.box).__name__}")


def box_iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return min(inter / union, 1.0)


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    """Pixel IoU. Two empty masks have no defined overlap and raise ``ValueError``."""
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a.data | b.data)
    if union == 0:
        raise ValueError("IoU of two empty masks is undefined")
    return np.count_nonzero(a.data & b.data) / union


def mask_to_bbox(m: BinaryMask) -> BBox:
    """Tightest normalized box around the foreground.

    Pixel ``(x, y)`` covers ``[x/W, (x+1)/W) x [y/H, (y+1)/H)``.
    """
    ys, xs = np.nonzero(m.data)
    if xs.size == 0:
        raise ValueError("cannot take the bounding box of an empty mask")
    w, h = m.width, m.height
    return BBox(xs.min() / w, ys.min() / h, (xs.max() + 1) / w, (ys.max() + 1) / h)


def box_to_mask(box: BBox, width: int, height: int) -> BinaryMask:
    """Rasterize a box: pixels whose centers fall inside it are set."""
    cols = (np.arange(width) + 0.5) / width
    rows = (np.arange(height) + 0.5) / height
    inside_x = (cols >= box.x1) & (cols < box.x2)
    inside_y = (rows >= box.y1) & (rows < box.y2)
    return BinaryMask(np.outer(inside_y, inside_x))


@dataclass(frozen=True)
class PredictionSet:
    """All instances for one image from one source.

    ``frame`` is the augmentation token of the coordinate frame the boxes are
    expressed in; ``"identity"`` is the original image.
    """

    image_id: int
    width: int
    height: int
    instances: tuple[Instance, ...] = ()
    frame: str = "identity"

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image {self.image_id}: non-positive size {self.width}x{self.height}")
        instances = tuple(self.instances)
        for inst in instances:
            if inst.mask is not None and inst.mask.shape != (self.height, self.width):
                raise ValueError(
                    f"image {self.image_id}: mask shape {inst.mask.shape} != image {(self.height, self.width)}"
                )
        object.__setattr__(self, "instances", instances)

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def replace(self, instances, frame: Optional[str] = None) -> "PredictionSet":
        return PredictionSet(self.image_id, self.width, self.height, tuple(instances), frame or self.frame)
