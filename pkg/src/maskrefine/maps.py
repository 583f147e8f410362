"""Domain types and file I/O for images, probability maps, and multi-label masks.

Conventions used throughout the package: rasters are numpy arrays indexed
``[row, col]`` (origin top-left), coordinates are ``x = column``,
``y = row``, and per-class stacks are class-major ``(C, H, W)``.
Probability maps and masks travel as NPY v1.0 files, images as 8-bit
grayscale PNG. All types lock their arrays after construction and every
operation here is pure, so instances are safe to share across workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage

from .errors import ConfigError, MalformedFile, ValueOutOfRange, WrongRank

VALID_SPLITS = ("train", "val", "test", "unlabelled")

# Accept float dust this far outside [0, 1] on read; anything worse is corrupt.
RANGE_TOLERANCE = 1e-6


def _lock(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass
class Image:
    """Grayscale raster with intensities in [0, 255]."""

    pixels: np.ndarray  # (H, W) uint8

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise WrongRank(f"image must be 2-D, got shape {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            raise ValueOutOfRange(f"image dtype must be uint8, got {self.pixels.dtype}")
        if self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ValueOutOfRange("image must be at least 1x1")
        self.pixels = _lock(self.pixels)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class ProbabilityMap:
    """Per-class likelihoods in [0, 1]; planes may overlap (multi-label)."""

    values: np.ndarray  # (C, H, W) float32

    def __post_init__(self):
        if self.values.ndim != 3:
            raise WrongRank(f"probability map must be 3-D, got shape {self.values.shape}")
        if self.values.dtype != np.float32:
            raise ValueOutOfRange(f"probability map dtype must be float32, got {self.values.dtype}")
        lo = float(self.values.min(initial=0.0))
        hi = float(self.values.max(initial=1.0))
        if lo < 0.0 or hi > 1.0:
            raise ValueOutOfRange(f"probabilities must lie in [0, 1], found [{lo}, {hi}]")
        self.values = _lock(self.values)

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def plane(self, class_id: int) -> np.ndarray:
        return self.values[class_id]


@dataclass
class MaskSet:
    """Per-class binary membership; a pixel may belong to several classes."""

    bits: np.ndarray  # (C, H, W) uint8 in {0, 1}

    def __post_init__(self):
        if self.bits.ndim != 3:
            raise WrongRank(f"mask set must be 3-D, got shape {self.bits.shape}")
        if self.bits.dtype != np.uint8:
            raise ValueOutOfRange(f"mask set dtype must be uint8, got {self.bits.dtype}")
        if self.bits.max(initial=0) > 1:
            raise ValueOutOfRange("mask set values must be 0 or 1")
        self.bits = _lock(self.bits)

    @classmethod
    def empty(cls, num_classes: int, height: int, width: int) -> "MaskSet":
        return cls(np.zeros((num_classes, height, width), dtype=np.uint8))

    @classmethod
    def from_planes(cls, planes) -> "MaskSet":
        return cls(np.stack([p.astype(np.uint8) for p in planes], axis=0))

    @property
    def num_classes(self) -> int:
        return self.bits.shape[0]

    @property
    def height(self) -> int:
        return self.bits.shape[1]

    @property
    def width(self) -> int:
        return self.bits.shape[2]

    def plane(self, class_id: int) -> np.ndarray:
        return self.bits[class_id]


@dataclass
class DatasetEntry:
    image: str
    probs: str
    gt: str | None = None
    split: str = "unlabelled"

    def __post_init__(self):
        if self.split not in VALID_SPLITS:
            raise ConfigError(f"invalid split {self.split!r}, expected one of {VALID_SPLITS}")
        if self.split == "unlabelled" and self.gt is not None:
            raise ConfigError(f"unlabelled entry {self.image!r} must not carry a ground-truth path")


@dataclass
class DatasetIndex:
    entries: list[DatasetEntry] = field(default_factory=list)

    def __post_init__(self):
        images = [e.image for e in self.entries]
        if len(set(images)) != len(images):
            raise ConfigError("image paths in a dataset index must be distinct")
        probs = [e.probs for e in self.entries]
        if len(set(probs)) != len(probs):
            raise ConfigError("probability-map paths in a dataset index must be distinct")

    def split(self, tag: str) -> list[DatasetEntry]:
        if tag not in VALID_SPLITS:
            raise ConfigError(f"invalid split {tag!r}")
        return [e for e in self.entries if e.split == tag]

    def to_json(self) -> dict:
        return {
            "entries": [
                {"image": e.image, "probs": e.probs, "gt": e.gt, "split": e.split}
                for e in self.entries
            ]
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DatasetIndex":
        try:
            entries = [
                DatasetEntry(
                    image=item["image"],
                    probs=item["probs"],
                    gt=item.get("gt"),
                    split=item.get("split", "unlabelled"),
                )
                for item in doc["entries"]
            ]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed dataset index: {exc}") from exc
        return cls(entries)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "DatasetIndex":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read dataset index {path}: {exc}") from exc
        return cls.from_json(doc)


NPY_MAGIC = b"\x93NUMPY"


def _load_npy(path) -> np.ndarray:
    """Load an NPY file, mapping container problems to MalformedFile."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise MalformedFile(f"cannot open {path}: {exc}") from exc
    with fh:
        magic = fh.read(len(NPY_MAGIC))
        if magic != NPY_MAGIC:
            raise MalformedFile(f"{path} is not an NPY file (bad magic {magic!r})")
        fh.seek(0)
        try:
            arr = np.load(fh, allow_pickle=False)
        except (ValueError, OSError, EOFError) as exc:
            raise MalformedFile(f"{path} has a corrupt NPY header or payload: {exc}") from exc
    return arr


def read_probability_map(path) -> ProbabilityMap:
    """Read a float32 (C, H, W) likelihood stack, rejecting corrupt values.

    Values outside [0, 1] beyond a 1e-6 float tolerance raise
    ValueOutOfRange; dust inside the tolerance band is snapped onto the
    boundary rather than silently accepted.
    """
    arr = _load_npy(path)
    if arr.ndim != 3:
        raise WrongRank(f"{path}: probability map must be rank 3, got shape {arr.shape}")
    if arr.dtype != np.float32:
        raise MalformedFile(f"{path}: probability map dtype must be float32, got {arr.dtype}")
    lo, hi = float(arr.min(initial=0.0)), float(arr.max(initial=1.0))
    if lo < -RANGE_TOLERANCE or hi > 1.0 + RANGE_TOLERANCE:
        raise ValueOutOfRange(f"{path}: values span [{lo}, {hi}], outside [0, 1] ± {RANGE_TOLERANCE}")
    if lo < 0.0 or hi > 1.0:
        arr = np.clip(arr, 0.0, 1.0)
    return ProbabilityMap(arr)


def write_probability_map(pmap: ProbabilityMap, path) -> None:
    np.save(path, pmap.values)


def read_mask_set(path) -> MaskSet:
    """Read a uint8 (C, H, W) binary stack; values outside {0, 1} are rejected."""
    arr = _load_npy(path)
    if arr.ndim != 3:
        raise WrongRank(f"{path}: mask set must be rank 3, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise MalformedFile(f"{path}: mask set dtype must be uint8, got {arr.dtype}")
    if arr.max(initial=0) > 1:
        raise ValueOutOfRange(f"{path}: mask values must be 0 or 1, found {int(arr.max())}")
    return MaskSet(arr)


def write_mask_set(mask: MaskSet, path) -> None:
    np.save(path, mask.bits)


def read_image(path) -> Image:
    """Read an 8-bit grayscale PNG (other PIL-readable formats are converted)."""
    try:
        with PILImage.open(path) as img:
            arr = np.asarray(img.convert("L"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise MalformedFile(f"cannot read image {path}: {exc}") from exc
    return Image(arr)


def write_image(image: Image, path) -> None:
    PILImage.fromarray(image.pixels, mode="L").save(path, format="PNG")


def binarize(pmap: ProbabilityMap, threshold: float) -> MaskSet:
    """Threshold each class plane independently; a bit is set iff p >= threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie strictly inside (0, 1), got {threshold}")
    return MaskSet((pmap.values >= threshold).astype(np.uint8))
