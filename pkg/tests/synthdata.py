"""Synthetic multi-class fixtures: high-contrast blobs as ground truth,
controlled degradations as pseudo-model output."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from maskrefine.maps import Image, MaskSet, ProbabilityMap
from maskrefine.morphology import StructElement, dilate, erode

BACKGROUND_INTENSITY = 25


def _ellipse(height: int, width: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    return (((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0).astype(np.uint8)


def make_multiclass_case(
    rng: np.random.Generator,
    height: int = 96,
    width: int = 96,
    n_classes: int = 3,
    noise_sigma: float = 8.0,
    blur_sigma: float = 1.8,
) -> tuple[Image, MaskSet]:
    """An image of bright blobs, one per class, plus its crisp mask.

    Each class gets a distinct intensity; blob centers sit on a coarse
    grid so the classes stay disjoint. The rendered image is blurred and
    carries an illumination gradient plus noise, so intensity-based
    methods see soft boundaries while the ground-truth mask stays exact.
    """
    canvas = np.full((height, width), float(BACKGROUND_INTENSITY))
    planes = []
    cells = int(np.ceil(np.sqrt(n_classes)))
    cell_h, cell_w = height / cells, width / cells
    order = rng.permutation(cells * cells)[:n_classes]
    for k, cell in enumerate(order):
        gy, gx = divmod(int(cell), cells)
        cy = gy * cell_h + cell_h / 2 + rng.uniform(-3, 3)
        cx = gx * cell_w + cell_w / 2 + rng.uniform(-3, 3)
        ry = rng.uniform(0.24, 0.33) * cell_h
        rx = rng.uniform(0.24, 0.33) * cell_w
        plane = _ellipse(height, width, cy, cx, ry, rx)
        planes.append(plane)
        intensity = 110.0 + 45.0 * k
        canvas = np.where(plane, intensity, canvas)
    canvas = ndimage.gaussian_filter(canvas, sigma=blur_sigma)
    slope = rng.uniform(-20, 20)
    canvas = canvas + slope * (np.arange(width) / width - 0.5)[None, :]
    canvas = canvas + rng.normal(0.0, noise_sigma, size=canvas.shape)
    image = Image(np.clip(canvas, 0, 255).astype(np.uint8))
    return image, MaskSet.from_planes(planes)


def _boundary_band(plane: np.ndarray, width: int = 2) -> np.ndarray:
    el = StructElement("square", width)
    return (dilate(plane, el) ^ erode(plane, el)).astype(bool)


def degrade_to_probmap(
    gt: MaskSet,
    rng: np.random.Generator,
    radius: int = 3,
    flip_frac: float = 0.05,
) -> ProbabilityMap:
    """Degrade ground truth into an imprecise likelihood map.

    Per class: erode or dilate by `radius`, then flip `flip_frac` of the
    pixels in a band around the boundary. Kept pixels get high likelihood,
    flipped-on pixels a hesitant mid likelihood, background stays near 0 —
    so component scoring has real signal to work with.
    """
    el = StructElement("square", radius)
    planes = []
    for c in range(gt.num_classes):
        plane = gt.plane(c).copy()
        if rng.random() < 0.5:
            degraded = erode(plane, el)
            if not degraded.any():
                degraded = plane
        else:
            degraded = dilate(plane, el)
        band = _boundary_band(degraded)
        flips = band & (rng.random(degraded.shape) < flip_frac)
        flipped_on = flips & (degraded == 0)
        result = degraded.astype(bool) ^ flips

        probs = rng.uniform(0.0, 0.05, size=degraded.shape)
        probs[result] = rng.uniform(0.85, 0.97, size=int(result.sum()))
        probs[flipped_on & result] = rng.uniform(0.55, 0.72, size=int((flipped_on & result).sum()))
        planes.append(probs)
    return ProbabilityMap(np.stack(planes).astype(np.float32))


def make_degraded_suite(
    seed: int,
    n_images: int,
    height: int = 96,
    width: int = 96,
    n_classes: int = 3,
) -> list[tuple[Image, MaskSet, ProbabilityMap]]:
    rng = np.random.default_rng(seed)
    suite = []
    for _ in range(n_images):
        image, gt = make_multiclass_case(rng, height, width, n_classes)
        probs = degrade_to_probmap(gt, rng)
        suite.append((image, gt, probs))
    return suite


def random_cleaned_mask(
    rng: np.random.Generator,
    height: int = 48,
    width: int = 48,
    n_classes: int = 4,
    p_empty: float = 0.15,
) -> MaskSet:
    """Random mask with at most one blob per class, as after cleaning."""
    planes = []
    for _ in range(n_classes):
        if rng.random() < p_empty:
            planes.append(np.zeros((height, width), dtype=np.uint8))
            continue
        cy = rng.uniform(6, height - 6)
        cx = rng.uniform(6, width - 6)
        ry = rng.uniform(2.0, height / 5)
        rx = rng.uniform(2.0, width / 5)
        plane = _ellipse(height, width, cy, cx, ry, rx)
        if rng.random() < 0.4:  # carve a bite so centroids can fall off the mask
            hole = _ellipse(height, width, cy + rng.uniform(-2, 2), cx + rng.uniform(-2, 2), ry * 0.8, rx * 0.5)
            plane = (plane & ~hole).astype(np.uint8)
        if not plane.any():
            plane[int(cy), int(cx)] = 1
        planes.append(plane)
    return MaskSet.from_planes(planes)
