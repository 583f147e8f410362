"""Prompt extraction from cleaned per-class masks.

Coordinate convention (used identically on the wire): x = column,
y = row, origin top-left, bounding boxes inclusive on all sides.
"""

from __future__ import annotations

import base64
import io
import logging
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage

from .maps import MaskSet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BoundingBox:
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise ValueError(f"degenerate box ({self.x0},{self.y0},{self.x1},{self.y1})")

    def expanded(self, margin: int, width: int, height: int) -> "BoundingBox":
        return BoundingBox(
            max(0, self.x0 - margin),
            max(0, self.y0 - margin),
            min(width - 1, self.x1 + margin),
            min(height - 1, self.y1 + margin),
        )

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass(frozen=True)
class SeedPoint:
    x: int
    y: int
    polarity: str  # "positive" | "negative"

    def __post_init__(self):
        if self.polarity not in ("positive", "negative"):
            raise ValueError(f"invalid polarity {self.polarity!r}")


@dataclass
class PromptSet:
    """Sparse and dense prompts for one class."""

    class_id: int
    box: BoundingBox | None = None
    seeds: list[SeedPoint] = field(default_factory=list)
    dense_mask: np.ndarray | None = None  # (H, W) uint8

    def __post_init__(self):
        if self.box is None and not self.seeds and self.dense_mask is None:
            raise ValueError(f"prompt set for class {self.class_id} carries no prompt at all")

    def positive_points(self) -> list[tuple[int, int]]:
        return [(s.x, s.y) for s in self.seeds if s.polarity == "positive"]

    def negative_points(self) -> list[tuple[int, int]]:
        return [(s.x, s.y) for s in self.seeds if s.polarity == "negative"]


@dataclass(frozen=True)
class PromptMode:
    """Which prompt components to use and how many self-refinement rounds to run.

    The initial round sends the bounding box alone when boxes are enabled
    (seed points otherwise); every self-refinement round re-sends all
    enabled sparse prompts and, with dense_in_refine, the previous round's
    mask as a dense prompt.
    """

    use_box: bool = True
    use_positive_seed: bool = True
    use_negative_seeds: bool = True
    self_refine_rounds: int = 1
    dense_in_refine: bool = True

    def __post_init__(self):
        if not (self.use_box or self.use_positive_seed or self.use_negative_seeds):
            raise ValueError("at least one sparse prompt source must be enabled")
        if self.self_refine_rounds < 0:
            raise ValueError("self_refine_rounds must be >= 0")
        if self.dense_in_refine and self.self_refine_rounds < 1:
            raise ValueError("dense_in_refine requires self_refine_rounds >= 1")


def extract_box(plane: np.ndarray) -> BoundingBox | None:
    """Tightest axis-aligned box around the set pixels; None for an empty plane."""
    rows = np.flatnonzero(plane.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(plane.any(axis=0))
    return BoundingBox(int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]))


def extract_positive_seed(plane: np.ndarray) -> SeedPoint | None:
    """Center of mass of the set pixels, snapped onto the mask if it falls off it.

    Rounding is half-up; snapping picks the set pixel with the smallest
    Euclidean distance to the unrounded centroid, ties resolved in
    row-major order. Non-convex shapes (e.g. crescents) otherwise yield a
    seed in the hole, which would poison refinement.
    """
    ys, xs = np.nonzero(plane)
    if ys.size == 0:
        return None
    cy = float(ys.mean(dtype=np.float64))
    cx = float(xs.mean(dtype=np.float64))
    ry = int(np.floor(cy + 0.5))
    rx = int(np.floor(cx + 0.5))
    if 0 <= ry < plane.shape[0] and 0 <= rx < plane.shape[1] and plane[ry, rx]:
        return SeedPoint(rx, ry, "positive")
    d2 = (ys.astype(np.float64) - cy) ** 2 + (xs.astype(np.float64) - cx) ** 2
    best = int(np.argmin(d2))  # nonzero() runs row-major, so first argmin breaks ties
    return SeedPoint(int(xs[best]), int(ys[best]), "positive")


def build_prompt_sets(mask: MaskSet, mode: PromptMode) -> list[PromptSet]:
    """One PromptSet per non-empty class of a cleaned mask.

    With negative seeds enabled, class i receives the positive seeds of
    every other non-empty class as negatives. Empty classes yield no
    PromptSet; callers detect them by the missing class_id. A negative
    seed may legally sit on its own class plane where classes overlap;
    that case is kept and logged.
    """
    centroids: dict[int, SeedPoint] = {}
    boxes: dict[int, BoundingBox] = {}
    for c in range(mask.num_classes):
        plane = mask.plane(c)
        seed = extract_positive_seed(plane)
        if seed is None:
            logger.info("class %d is empty, no prompt extracted", c)
            continue
        centroids[c] = seed
        box = extract_box(plane)
        assert box is not None
        boxes[c] = box

    prompt_sets: list[PromptSet] = []
    for c in sorted(centroids):
        seeds: list[SeedPoint] = []
        if mode.use_positive_seed:
            seeds.append(centroids[c])
        if mode.use_negative_seeds:
            for other, pos in sorted(centroids.items()):
                if other == c:
                    continue
                if mask.plane(c)[pos.y, pos.x]:
                    logger.warning(
                        "negative seed from class %d lies on class %d (classes overlap there)",
                        other,
                        c,
                    )
                seeds.append(SeedPoint(pos.x, pos.y, "negative"))
        box = boxes[c] if mode.use_box else None
        if box is None and not seeds:
            logger.warning("class %d yields no prompt under this mode, skipping", c)
            continue
        prompt_sets.append(PromptSet(class_id=c, box=box, seeds=seeds))
    return prompt_sets


def encode_mask_b64(plane: np.ndarray) -> str:
    """Binary plane -> base64 of a 1-bit PNG."""
    img = PILImage.fromarray((plane != 0).astype(np.uint8) * 255, mode="L").convert("1")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_mask_b64(data: str) -> np.ndarray:
    """Base64 1-bit PNG -> (H, W) uint8 plane in {0, 1}."""
    with PILImage.open(io.BytesIO(base64.b64decode(data))) as img:
        return (np.asarray(img.convert("L")) > 127).astype(np.uint8)


def prompt_set_to_json(ps: PromptSet) -> dict:
    """Serialize per the shared prompt schema (also used by the wire protocol)."""
    return {
        "class_id": ps.class_id,
        "box": ps.box.as_list() if ps.box is not None else None,
        "positive_points": [[x, y] for x, y in ps.positive_points()],
        "negative_points": [[x, y] for x, y in ps.negative_points()],
        "dense_mask": encode_mask_b64(ps.dense_mask) if ps.dense_mask is not None else None,
    }


def prompt_set_from_json(doc: dict) -> PromptSet:
    box = doc.get("box")
    seeds = [SeedPoint(int(x), int(y), "positive") for x, y in doc.get("positive_points", [])]
    seeds += [SeedPoint(int(x), int(y), "negative") for x, y in doc.get("negative_points", [])]
    dense = doc.get("dense_mask")
    return PromptSet(
        class_id=int(doc["class_id"]),
        box=BoundingBox(*[int(v) for v in box]) if box is not None else None,
        seeds=seeds,
        dense_mask=decode_mask_b64(dense) if dense is not None else None,
    )
