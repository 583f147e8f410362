"""Binary erosion and dilation with square or disk structuring elements.

Border policy for both operations: everything outside the image is
background. Erosion therefore eats inward from the image edge and
dilation never wraps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .maps import MaskSet

SHAPES = ("square", "disk")
KINDS = ("none", "erosion", "dilation")


@dataclass(frozen=True)
class StructElement:
    """Structuring element: square covers (2r+1)^2, disk covers ||d|| <= r."""

    shape: str
    radius: int

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"shape must be one of {SHAPES}, got {self.shape!r}")
        if not isinstance(self.radius, int) or self.radius < 1:
            raise ValueError(f"radius must be an integer >= 1, got {self.radius!r}")

    def footprint(self) -> np.ndarray:
        r = self.radius
        if self.shape == "square":
            return np.ones((2 * r + 1, 2 * r + 1), dtype=bool)
        dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
        return dy * dy + dx * dx <= r * r


@dataclass(frozen=True)
class MorphOp:
    kind: str
    element: StructElement | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if (self.kind == "none") != (self.element is None):
            raise ValueError("element must be present exactly when kind is not 'none'")

    @classmethod
    def none(cls) -> "MorphOp":
        return cls("none")


def _check_plane(plane: np.ndarray) -> None:
    if plane.ndim != 2 or plane.shape[0] < 1 or plane.shape[1] < 1:
        raise ValueError(f"plane must be 2-D and non-degenerate, got shape {plane.shape}")


def dilate(plane: np.ndarray, element: StructElement) -> np.ndarray:
    """Set a pixel iff the element centered there intersects the input."""
    _check_plane(plane)
    out = ndimage.binary_dilation(plane != 0, structure=element.footprint(), border_value=0)
    return out.astype(np.uint8)


def erode(plane: np.ndarray, element: StructElement) -> np.ndarray:
    """Keep a pixel iff the element centered there fits inside the input."""
    _check_plane(plane)
    out = ndimage.binary_erosion(plane != 0, structure=element.footprint(), border_value=0)
    return out.astype(np.uint8)


def apply_morph(mask: MaskSet, op: MorphOp, fallback_on_empty: bool = True) -> MaskSet:
    """Apply the operation per class plane.

    With fallback_on_empty, an erosion that would wipe out a non-empty
    plane reverts that plane to its input so the class keeps a prompt.
    """
    if op.kind == "none":
        return mask
    fn = erode if op.kind == "erosion" else dilate
    out = np.zeros_like(mask.bits)
    for c in range(mask.num_classes):
        plane = mask.plane(c)
        result = fn(plane, op.element)
        if fallback_on_empty and not result.any() and plane.any():
            result = plane
        out[c] = result
    return MaskSet(out)
