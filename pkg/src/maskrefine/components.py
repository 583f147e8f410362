"""Connected-component analysis and best-component selection.

Mask cleaning keeps, per class, the single component whose summed
likelihood normalized by its area is highest; everything else is noise
from the upstream model and is dropped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch
from .maps import MaskSet, ProbabilityMap

_STRUCTURE_4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
_STRUCTURE_8 = np.ones((3, 3), dtype=bool)


@dataclass
class ComponentLabeling:
    """Labeling of one binary plane: 0 is background, ids run 1..num_components."""

    labels: np.ndarray  # (H, W) int32
    num_components: int
    component_pixels: list[np.ndarray]  # per id, ascending flat row-major indices

    def pixels_of(self, component_id: int) -> np.ndarray:
        return self.component_pixels[component_id - 1]


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 4:
        return _STRUCTURE_4
    if connectivity == 8:
        return _STRUCTURE_8
    raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")


def label_components(mask_plane: np.ndarray, connectivity: int = 8) -> ComponentLabeling:
    """Label foreground components of a binary plane under 4- or 8-adjacency."""
    if mask_plane.ndim != 2 or mask_plane.shape[0] < 1 or mask_plane.shape[1] < 1:
        raise ValueError(f"mask plane must be 2-D and non-degenerate, got shape {mask_plane.shape}")
    labels, count = ndimage.label(mask_plane != 0, structure=_structure(connectivity))
    labels = labels.astype(np.int32, copy=False)

    flat = labels.ravel()
    fg = np.flatnonzero(flat)
    pixels: list[np.ndarray] = []
    if count:
        order = fg[np.argsort(flat[fg], kind="stable")]
        counts = np.bincount(flat[fg], minlength=count + 1)[1:]
        pixels = np.split(order, np.cumsum(counts)[:-1])
    return ComponentLabeling(labels=labels, num_components=int(count), component_pixels=pixels)


def component_score(pixels: np.ndarray, probs_plane: np.ndarray) -> float:
    """Mean predicted likelihood over the component's pixels."""
    return float(probs_plane.ravel()[pixels].sum(dtype=np.float64) / pixels.size)


def select_best_component(labeling: ComponentLabeling, probs_plane: np.ndarray) -> int | None:
    """Pick the component with the highest area-normalized likelihood.

    Exact score ties are broken by the smallest row-major index of the
    component's first pixel so pipelines stay reproducible. Returns None
    when the plane has no components.
    """
    if probs_plane.shape != labeling.labels.shape:
        raise DimensionMismatch(
            f"likelihood plane {probs_plane.shape} does not match labeling {labeling.labels.shape}"
        )
    if labeling.num_components == 0:
        return None
    best_id = None
    best_score = -np.inf
    best_first = -1
    for cid in range(1, labeling.num_components + 1):
        pix = labeling.pixels_of(cid)
        score = component_score(pix, probs_plane)
        first = int(pix[0])
        if score > best_score or (score == best_score and first < best_first):
            best_id, best_score, best_first = cid, score, first
    return best_id


def keep_best_component(mask: MaskSet, probs: ProbabilityMap, connectivity: int = 8) -> MaskSet:
    """Reduce each class plane to its best-scoring component (empty stays empty)."""
    if mask.bits.shape != probs.values.shape:
        raise DimensionMismatch(
            f"mask {mask.bits.shape} does not match probability map {probs.values.shape}"
        )
    out = np.zeros_like(mask.bits)
    for c in range(mask.num_classes):
        labeling = label_components(mask.plane(c), connectivity)
        best = select_best_component(labeling, probs.plane(c))
        if best is not None:
            out[c] = (labeling.labels == best).astype(np.uint8)
    return MaskSet(out)
