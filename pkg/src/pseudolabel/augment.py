"""Test-time augmentation views and their geometric inverses.

Adapters apply a view to image pixels; the core only needs each view's action
on coordinates. Photometric views act as the identity on boxes and masks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .geometry import BBox, BinaryMask, Instance

GEOMETRIC_KINDS = ("identity", "hflip", "vflip")
PHOTOMETRIC_KINDS = ("brightness", "saturation", "color-shift")
KINDS = GEOMETRIC_KINDS + PHOTOMETRIC_KINDS

# Number of real parameters each kind takes.
_ARITY = {"identity": 0, "hflip": 0, "vflip": 0, "brightness": 1, "saturation": 1, "color-shift": 3}
_DECIMALS = 2


@dataclass(frozen=True)
class AugmentationSpec:
    kind: str
    params: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in _ARITY:
            raise ValueError(f"unknown augmentation kind {self.kind!r}; expected one of {KINDS}")
        params = tuple(float(p) for p in self.params)
        if len(params) != _ARITY[self.kind]:
            raise ValueError(f"{self.kind} takes {_ARITY[self.kind]} parameter(s), got {len(params)}")
        for p in params:
            # tokens carry two decimals; anything finer would not round-trip
            if abs(round(p, _DECIMALS) - p) > 1e-9:
                raise ValueError(f"parameter {p} is not representable with {_DECIMALS} decimals")
        object.__setattr__(self, "params", tuple(round(p, _DECIMALS) for p in params))

    @property
    def geometric(self) -> bool:
        return self.kind in ("hflip", "vflip")

    @property
    def token(self) -> str:
        return serialize_spec(self)

    def __str__(self) -> str:
        return self.token


IDENTITY = AugmentationSpec("identity")
HFLIP = AugmentationSpec("hflip")
VFLIP = AugmentationSpec("vflip")


def serialize_spec(a: AugmentationSpec) -> str:
    """Canonical token, e.g. ``"vflip"`` or ``"brightness:1.30"``."""
    if not a.params:
        return a.kind
    return a.kind + ":" + ",".join(f"{p:.{_DECIMALS}f}" for p in a.params)


def parse_spec(token: str) -> AugmentationSpec:
    kind, _, rest = token.strip().partition(":")
    if not rest:
        return AugmentationSpec(kind)
    try:
        params = tuple(float(p) for p in rest.split(","))
    except ValueError as exc:
        raise ValueError(f"malformed augmentation token {token!r}") from exc
    return AugmentationSpec(kind, params)


def as_spec(a: AugmentationSpec | str) -> AugmentationSpec:
    return a if isinstance(a, AugmentationSpec) else parse_spec(a)


@dataclass(frozen=True)
class AugmentationSet:
    """Ordered views; the un-augmented identity pass appears exactly once."""

    specs: tuple[AugmentationSpec, ...]

    def __post_init__(self) -> None:
        specs = tuple(as_spec(s) for s in self.specs)
        if not specs:
            raise ValueError("augmentation set must contain at least one view")
        n_identity = sum(s.kind == "identity" for s in specs)
        if n_identity != 1:
            raise ValueError(f"augmentation set must contain identity exactly once, found {n_identity}")
        tokens = [s.token for s in specs]
        if len(set(tokens)) != len(tokens):
            raise ValueError(f"duplicate views in {tokens}")
        object.__setattr__(self, "specs", specs)

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> "AugmentationSet":
        return cls(tuple(parse_spec(t) for t in tokens))

    @property
    def K(self) -> int:
        return len(self.specs)

    @property
    def tokens(self) -> list[str]:
        return [s.token for s in self.specs]

    def __iter__(self):
        return iter(self.specs)

    def __len__(self) -> int:
        return len(self.specs)


DEFAULT_AUGMENTATIONS = AugmentationSet((IDENTITY, VFLIP))


def _flip_box(kind: str, b: BBox) -> BBox:
    # 1 - x is exact for coordinates on the storage grid
    if kind == "hflip":
        return BBox(1.0 - b.x2, b.y1, 1.0 - b.x1, b.y2)
    if kind == "vflip":
        return BBox(b.x1, 1.0 - b.y2, b.x2, 1.0 - b.y1)
    return b


def forward_box(a: AugmentationSpec | str, b: BBox) -> BBox:
    """Map a box from the original image into the augmented view."""
    return _flip_box(as_spec(a).kind, b)


def inverse_box(a: AugmentationSpec | str, b: BBox) -> BBox:
    """Map a box predicted in the augmented view back to the original image.

    Flips are involutions, so this is the same reflection as the forward map.
    """
    return _flip_box(as_spec(a).kind, b)


def _flip_mask(kind: str, m: BinaryMask) -> BinaryMask:
    if kind == "hflip":
        return BinaryMask(m.data[:, ::-1])
    if kind == "vflip":
        return BinaryMask(m.data[::-1, :])
    return m


def forward_mask(a: AugmentationSpec | str, m: BinaryMask) -> BinaryMask:
    return _flip_mask(as_spec(a).kind, m)


def inverse_mask(a: AugmentationSpec | str, m: BinaryMask) -> BinaryMask:
    return _flip_mask(as_spec(a).kind, m)


def inverse_instance(inst: Instance, a: AugmentationSpec | str | None = None) -> Instance:
    """Map an instance back to the original frame using its own view token.

    ``a`` may be passed to double-check the token; a mismatch raises.
    """
    if inst.view is None:
        raise ValueError("instance carries no augmentation token")
    spec = parse_spec(inst.view)
    if a is not None and as_spec(a) != spec:
        raise ValueError(f"instance token {inst.view!r} does not match view {as_spec(a).token!r}")
    mask = inverse_mask(spec, inst.mask) if inst.mask is not None else None
    return Instance(inverse_box(spec, inst.box), inst.score, inst.label, mask, inst.view)


def inverse_instances(instances: Sequence[Instance]) -> list[Instance]:
    return [inverse_instance(i) for i in instances]


def flip_array(a: AugmentationSpec | str, img: np.ndarray) -> np.ndarray:
    """Apply a view's geometric action to an ``(H, W, ...)`` pixel array."""
    kind = as_spec(a).kind
    if kind == "hflip":
        return img[:, ::-1]
    if kind == "vflip":
        return img[::-1]
    return img
