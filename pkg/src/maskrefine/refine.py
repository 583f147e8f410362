"""Refiner contract, self-refinement loop, oracle test double, and HTTP client.

A refiner turns (image, prompt set) into a binary mask for one class.
The orchestration here is backend-agnostic: the same loop drives the
in-process oracle, the random walker, and the remote service.
"""

from __future__ import annotations

import base64
import io
import logging
import threading
import time
from dataclasses import dataclass

import numpy as np
import requests
from PIL import Image as PILImage

from .errors import ProtocolViolation, RefinerUnavailable
from .maps import Image, MaskSet
from .prompts import (
    BoundingBox,
    PromptMode,
    PromptSet,
    decode_mask_b64,
    encode_mask_b64,
    prompt_set_to_json,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RefinerCapabilities:
    accepts_points: bool
    accepts_box: bool
    accepts_dense: bool

    def __post_init__(self):
        if not (self.accepts_points or self.accepts_box or self.accepts_dense):
            raise ValueError("a refiner must accept at least one prompt component")


@dataclass
class RefineRequest:
    image: Image
    prompt: PromptSet

    def __post_init__(self):
        h, w = self.image.height, self.image.width
        box = self.prompt.box
        if box is not None and not (0 <= box.x0 <= box.x1 < w and 0 <= box.y0 <= box.y1 < h):
            raise ValueError(f"box {box.as_list()} exceeds image bounds {w}x{h}")
        for s in self.prompt.seeds:
            if not (0 <= s.x < w and 0 <= s.y < h):
                raise ValueError(f"seed ({s.x},{s.y}) exceeds image bounds {w}x{h}")
        dense = self.prompt.dense_mask
        if dense is not None and dense.shape != (h, w):
            raise ValueError(f"dense mask shape {dense.shape} does not match image {h}x{w}")


@dataclass
class RefineResponse:
    mask: np.ndarray  # (H, W) uint8
    confidence: float | None = None


class Refiner:
    """Interface every refinement backend implements."""

    #: set by backends that must not receive concurrent calls
    serial_only = False

    def capabilities(self) -> RefinerCapabilities:
        raise NotImplementedError

    def refine(self, request: RefineRequest) -> RefineResponse:
        raise NotImplementedError


def filter_prompt(prompt: PromptSet, caps: RefinerCapabilities) -> PromptSet:
    """Drop prompt components the refiner cannot accept, warning per drop."""
    box = prompt.box
    seeds = prompt.seeds
    dense = prompt.dense_mask
    if box is not None and not caps.accepts_box:
        logger.warning("class %d: dropping box prompt, refiner does not accept boxes", prompt.class_id)
        box = None
    if seeds and not caps.accepts_points:
        logger.warning("class %d: dropping %d seed points, refiner does not accept points", prompt.class_id, len(seeds))
        seeds = []
    if dense is not None and not caps.accepts_dense:
        logger.warning("class %d: dropping dense prompt, refiner does not accept dense masks", prompt.class_id)
        dense = None
    if box is None and not seeds and dense is None:
        raise ValueError(
            f"class {prompt.class_id}: refiner capabilities cover none of the enabled prompt components"
        )
    return PromptSet(class_id=prompt.class_id, box=box, seeds=list(seeds), dense_mask=dense)


def _round_prompt(
    full: PromptSet,
    mode: PromptMode,
    round_idx: int,
    prev_mask: np.ndarray | None,
    caps: RefinerCapabilities,
) -> PromptSet:
    """Compose the prompt for one loop round.

    Round 0 is the initial prompt: the box alone when enabled and accepted
    by the refiner, otherwise the enabled seeds. Later rounds re-send all
    enabled sparse prompts plus the previous round's output as a dense
    prompt.
    """
    if round_idx == 0:
        if mode.use_box and full.box is not None and caps.accepts_box:
            return PromptSet(class_id=full.class_id, box=full.box)
        return PromptSet(class_id=full.class_id, seeds=list(full.seeds))
    dense = prev_mask if mode.dense_in_refine else None
    return PromptSet(
        class_id=full.class_id,
        box=full.box if mode.use_box else None,
        seeds=list(full.seeds),
        dense_mask=dense,
    )


def refine_class(refiner: Refiner, image: Image, prompt: PromptSet, mode: PromptMode) -> np.ndarray:
    """Run the self-refinement loop for one class: 1 + self_refine_rounds calls."""
    caps = refiner.capabilities()
    mask: np.ndarray | None = None
    for round_idx in range(1 + mode.self_refine_rounds):
        round_prompt = filter_prompt(_round_prompt(prompt, mode, round_idx, mask, caps), caps)
        response = refiner.refine(RefineRequest(image=image, prompt=round_prompt))
        if response.mask.shape != (image.height, image.width):
            raise ProtocolViolation(
                f"refiner returned mask of shape {response.mask.shape}, "
                f"expected {(image.height, image.width)}"
            )
        mask = (response.mask != 0).astype(np.uint8)
    assert mask is not None
    return mask


def refine_mask_set(
    refiner: Refiner,
    image: Image,
    prompts: list[PromptSet],
    mode: PromptMode,
    num_classes: int,
) -> MaskSet:
    """Assemble per-class refinements into a MaskSet; promptless classes stay empty."""
    out = np.zeros((num_classes, image.height, image.width), dtype=np.uint8)
    for prompt in prompts:
        out[prompt.class_id] = refine_class(refiner, image, prompt, mode)
    return MaskSet(out)


class OracleRefiner(Refiner):
    """Test double that answers with ground truth restricted to the prompt box.

    The box is expanded by `margin` pixels per side before intersecting;
    with a margin of at least the image diagonal the answer is the exact
    ground-truth plane. A prompt without a box falls back to the bounding
    box of its seed points.
    """

    def __init__(self, ground_truth: MaskSet, margin: int = 0):
        self.ground_truth = ground_truth
        self.margin = margin

    def capabilities(self) -> RefinerCapabilities:
        return RefinerCapabilities(accepts_points=True, accepts_box=True, accepts_dense=True)

    def refine(self, request: RefineRequest) -> RefineResponse:
        gt_plane = self.ground_truth.plane(request.prompt.class_id)
        h, w = gt_plane.shape
        box = request.prompt.box
        if box is None and request.prompt.seeds:
            xs = [s.x for s in request.prompt.seeds]
            ys = [s.y for s in request.prompt.seeds]
            box = BoundingBox(min(xs), min(ys), max(xs), max(ys))
        if box is None:
            return RefineResponse(mask=np.zeros((h, w), dtype=np.uint8), confidence=0.0)
        box = box.expanded(self.margin, w, h)
        out = np.zeros((h, w), dtype=np.uint8)
        window = gt_plane[box.y0 : box.y1 + 1, box.x0 : box.x1 + 1]
        out[box.y0 : box.y1 + 1, box.x0 : box.x1 + 1] = window
        return RefineResponse(mask=out, confidence=1.0)


def encode_image_b64(image: Image) -> str:
    buf = io.BytesIO()
    PILImage.fromarray(image.pixels, mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_image_b64(data: str) -> Image:
    with PILImage.open(io.BytesIO(base64.b64decode(data))) as img:
        return Image(np.asarray(img.convert("L"), dtype=np.uint8))


def refine_request_json(request: RefineRequest) -> dict:
    doc = prompt_set_to_json(request.prompt)
    doc.pop("class_id")
    doc["image"] = encode_image_b64(request.image)
    return doc


class RemoteRefiner(Refiner):
    """Client for the HTTP refinement service.

    POST /v1/refine with base64 PNG payloads; GET /v1/capabilities once
    and cache. Transient failures (connection errors and 5xx) retry with
    exponential backoff; malformed answers raise ProtocolViolation. At
    most `max_in_flight` requests run concurrently.
    """

    def __init__(
        self,
        endpoint: str,
        timeout: float = 30.0,
        retries: int = 3,
        backoff: float = 0.5,
        max_in_flight: int = 4,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._semaphore = threading.Semaphore(max_in_flight)
        self._caps: RefinerCapabilities | None = None
        self._caps_lock = threading.Lock()

    def _request(self, method: str, path: str, payload: dict | None = None) -> dict:
        url = f"{self.endpoint}{path}"
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                with self._semaphore:
                    resp = requests.request(method, url, json=payload, timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = exc
                logger.warning("refiner transport failure on %s (attempt %d): %s", url, attempt + 1, exc)
                continue
            if resp.status_code >= 500:
                last_error = RefinerUnavailable(f"{url} answered {resp.status_code}")
                logger.warning("refiner %s answered %d (attempt %d)", url, resp.status_code, attempt + 1)
                continue
            if resp.status_code != 200:
                raise ProtocolViolation(f"{url} answered {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise ProtocolViolation(f"{url} returned non-JSON body") from exc
        raise RefinerUnavailable(f"{url} unreachable after {self.retries + 1} attempts: {last_error}")

    def capabilities(self) -> RefinerCapabilities:
        with self._caps_lock:
            if self._caps is None:
                doc = self._request("GET", "/v1/capabilities")
                try:
                    self._caps = RefinerCapabilities(
                        accepts_points=bool(doc["accepts_points"]),
                        accepts_box=bool(doc["accepts_box"]),
                        accepts_dense=bool(doc["accepts_dense"]),
                    )
                except (KeyError, TypeError, ValueError) as exc:
                    raise ProtocolViolation(f"malformed capabilities document: {doc}") from exc
            return self._caps

    def refine(self, request: RefineRequest) -> RefineResponse:
        doc = self._request("POST", "/v1/refine", refine_request_json(request))
        try:
            mask = decode_mask_b64(doc["mask"])
            confidence = doc.get("confidence")
        except (KeyError, TypeError, ValueError, OSError) as exc:
            raise ProtocolViolation(f"undecodable refine response: {exc}") from exc
        if mask.shape != (request.image.height, request.image.width):
            raise ProtocolViolation(
                f"server mask shape {mask.shape} does not match image "
                f"{(request.image.height, request.image.width)}"
            )
        return RefineResponse(mask=mask, confidence=None if confidence is None else float(confidence))


__all__ = [
    "RefinerCapabilities",
    "RefineRequest",
    "RefineResponse",
    "Refiner",
    "filter_prompt",
    "refine_class",
    "refine_mask_set",
    "OracleRefiner",
    "RemoteRefiner",
    "encode_image_b64",
    "decode_image_b64",
    "encode_mask_b64",
    "refine_request_json",
]
