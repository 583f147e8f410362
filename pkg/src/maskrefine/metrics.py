"""Dice evaluation and aggregation.

Reporting protocol: Dice per class per image, mean over applicable
classes per image, then mean and population std over per-image means.
Classes empty in both prediction and ground truth are flagged
not-applicable and excluded by default (`absent_policy="exclude"`);
`"score_one"` counts them as a perfect 1.0 instead.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, EmptyDataset
from .maps import MaskSet

logger = logging.getLogger(__name__)

ABSENT_POLICIES = ("exclude", "score_one")


def dice(a: np.ndarray, b: np.ndarray) -> float | None:
    """2|a∩b| / (|a|+|b|); None when both planes are empty (not applicable)."""
    if a.shape != b.shape:
        raise DimensionMismatch(f"plane shapes differ: {a.shape} vs {b.shape}")
    a_bool = a != 0
    b_bool = b != 0
    total = int(a_bool.sum()) + int(b_bool.sum())
    if total == 0:
        return None
    inter = int(np.logical_and(a_bool, b_bool).sum())
    return 2.0 * inter / total


@dataclass
class DiceReport:
    per_image_per_class: np.ndarray  # (N, C) float, NaN where not applicable
    applicable: np.ndarray  # (N, C) bool
    per_image_mean: list[float]  # NaN when no class was applicable
    mean: float
    std: float
    absent_policy: str = "exclude"
    config_fingerprint: str = ""
    image_ids: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "mean": self.mean,
            "std": self.std,
            "absent_policy": self.absent_policy,
            "config_fingerprint": self.config_fingerprint,
            "per_image_mean": [None if math.isnan(v) else v for v in self.per_image_mean],
            "image_ids": self.image_ids,
            "per_image_per_class": [
                [None if not app else float(v) for v, app in zip(row, app_row)]
                for row, app_row in zip(self.per_image_per_class, self.applicable)
            ],
        }

    def save_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)

    def save_csv(self, path) -> None:
        """One row per image-class cell, for external analysis."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image", "class", "dice", "applicable"])
            n_images, n_classes = self.per_image_per_class.shape
            for i in range(n_images):
                image_id = self.image_ids[i] if self.image_ids else str(i)
                for c in range(n_classes):
                    app = bool(self.applicable[i, c])
                    value = f"{self.per_image_per_class[i, c]:.6f}" if app else ""
                    writer.writerow([image_id, c, value, int(app)])


def evaluate(
    preds: list[MaskSet],
    gts: list[MaskSet],
    absent_policy: str = "exclude",
    config_fingerprint: str = "",
    image_ids: list[str] | None = None,
) -> DiceReport:
    """Score paired predictions against ground truth.

    Per-image mean runs over applicable classes; the dataset mean and
    population std run over per-image means. Images where every class is
    not applicable are excluded from the aggregate with a warning.
    """
    if absent_policy not in ABSENT_POLICIES:
        raise ValueError(f"absent_policy must be one of {ABSENT_POLICIES}, got {absent_policy!r}")
    if len(preds) != len(gts):
        raise DimensionMismatch(f"{len(preds)} predictions vs {len(gts)} ground truths")
    if not preds:
        raise EmptyDataset("evaluation over zero images")

    n_classes = gts[0].num_classes
    values = np.full((len(preds), n_classes), np.nan)
    applicable = np.zeros((len(preds), n_classes), dtype=bool)
    per_image_mean: list[float] = []
    for i, (pred, gt) in enumerate(zip(preds, gts)):
        if pred.bits.shape != gt.bits.shape:
            raise DimensionMismatch(
                f"image {i}: prediction {pred.bits.shape} vs ground truth {gt.bits.shape}"
            )
        cells: list[float] = []
        for c in range(n_classes):
            score = dice(pred.plane(c), gt.plane(c))
            if score is None:
                if absent_policy == "score_one":
                    values[i, c] = 1.0
                    applicable[i, c] = True
                    cells.append(1.0)
                continue
            values[i, c] = score
            applicable[i, c] = True
            cells.append(score)
        if cells:
            per_image_mean.append(float(np.mean(cells)))
        else:
            logger.warning("image %d has no applicable class, excluded from the aggregate", i)
            per_image_mean.append(float("nan"))

    usable = [v for v in per_image_mean if not math.isnan(v)]
    if not usable:
        raise EmptyDataset("no image had an applicable class")
    mean = float(np.mean(usable))
    std = float(np.std(usable))  # population std
    return DiceReport(
        per_image_per_class=values,
        applicable=applicable,
        per_image_mean=per_image_mean,
        mean=mean,
        std=std,
        absent_policy=absent_policy,
        config_fingerprint=config_fingerprint,
        image_ids=list(image_ids) if image_ids else [],
    )
