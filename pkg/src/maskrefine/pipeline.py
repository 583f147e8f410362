"""Batch orchestration: refinement, evaluation, tuning, and the ablation harness.

The pipeline stage order is fixed: binarize, best-component selection,
morphology, prompt extraction, refinement. Model training happens out of
process; this module only consumes probability-map files and emits mask
files plus reports.
"""

from __future__ import annotations

import colorsys
import csv
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .components import keep_best_component
from .config import RefinementConfig
from .errors import ConfigError, MaskRefineError
from .hpo import SearchSpace, Trial, apply_params, tune
from .maps import (
    DatasetEntry,
    DatasetIndex,
    Image,
    MaskSet,
    ProbabilityMap,
    binarize,
    read_image,
    read_mask_set,
    read_probability_map,
    write_mask_set,
)
from .metrics import DiceReport, evaluate
from .morphology import StructElement, apply_morph, erode
from .prompts import build_prompt_sets
from .randomwalk import RandomWalkRefiner
from .refine import OracleRefiner, Refiner, RemoteRefiner, refine_mask_set

logger = logging.getLogger(__name__)

ENDPOINT_ENV_VAR = "MASKREFINE_ENDPOINT"


def clean_mask(probs: ProbabilityMap, config: RefinementConfig) -> MaskSet:
    """Mask cleaning: binarize, keep the best component, apply morphology."""
    mask = binarize(probs, config.threshold)
    mask = keep_best_component(mask, probs, config.connectivity)
    return apply_morph(mask, config.morph)


def refine_entry(
    image: Image,
    probs: ProbabilityMap,
    config: RefinementConfig,
    refiner: Refiner,
) -> tuple[MaskSet, list[int]]:
    """Full single-image pipeline; returns the refined mask and skipped classes."""
    cleaned = clean_mask(probs, config)
    prompts = build_prompt_sets(cleaned, config.prompt_mode)
    prompted = {p.class_id for p in prompts}
    skipped = [c for c in range(cleaned.num_classes) if c not in prompted]
    refined = refine_mask_set(refiner, image, prompts, config.prompt_mode, cleaned.num_classes)
    return refined, skipped


def build_refiner(config: RefinementConfig, ground_truth: MaskSet | None = None) -> Refiner:
    """Instantiate the configured backend.

    The oracle backend needs per-image ground truth and is therefore built
    per entry; the other backends are stateless singletons.
    """
    params = config.refiner_params
    if config.refiner == "oracle":
        if ground_truth is None:
            raise ConfigError("oracle refiner requires ground truth for every entry")
        return OracleRefiner(ground_truth, margin=int(params.get("margin", 8)))
    if config.refiner == "random_walk":
        return RandomWalkRefiner(
            beta=float(params.get("beta", 100.0)),
            threshold=float(params.get("walk_threshold", 0.5)),
            seed_erosion_radius=int(params.get("seed_erosion_radius", 2)),
        )
    endpoint = os.environ.get(ENDPOINT_ENV_VAR) or params.get("endpoint")
    if not endpoint:
        raise ConfigError(f"remote refiner needs an endpoint ({ENDPOINT_ENV_VAR} or refiner_params.endpoint)")
    return RemoteRefiner(
        endpoint,
        timeout=float(params.get("timeout", 30.0)),
        retries=int(params.get("retries", 3)),
    )


def _entry_stem(entry: DatasetEntry) -> str:
    return Path(entry.probs).stem


def _check_stem_collisions(entries: list[DatasetEntry]) -> None:
    stems = [_entry_stem(e) for e in entries]
    if len(set(stems)) != len(stems):
        raise ConfigError("probability-map basenames collide; outputs would overwrite each other")


def _process_entry(entry: DatasetEntry, config: RefinementConfig, out_dir: Path, shared_refiner: Refiner | None) -> dict:
    record: dict = {"image": entry.image, "probs": entry.probs, "status": "ok", "error": None, "skipped_classes": []}
    start = time.monotonic()
    try:
        probs = read_probability_map(entry.probs)
        image = read_image(entry.image)
        if shared_refiner is not None:
            refiner = shared_refiner
        else:
            gt = read_mask_set(entry.gt) if entry.gt else None
            refiner = build_refiner(config, gt)
        refined, skipped = refine_entry(image, probs, config, refiner)
        out_path = out_dir / f"{_entry_stem(entry)}.npy"
        write_mask_set(refined, out_path)
        record["out"] = str(out_path)
        record["skipped_classes"] = skipped
    except (MaskRefineError, OSError, ValueError) as exc:
        record["status"] = "failed"
        record["error"] = str(exc)
        logger.warning("entry %s failed: %s", entry.probs, exc)
    record["seconds"] = round(time.monotonic() - start, 4)
    return record


def cmd_refine(
    index: DatasetIndex,
    config: RefinementConfig,
    out_dir,
    split: str = "unlabelled",
    workers: int | None = None,
) -> dict:
    """Refine every entry of a split into a pseudo-label file plus a manifest.

    Per-entry failures are recorded and the run continues; the manifest
    accounts for every input entry exactly once.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = index.split(split)
    _check_stem_collisions(entries)

    shared: Refiner | None = None
    if config.refiner != "oracle":
        shared = build_refiner(config)

    workers = workers or min(8, os.cpu_count() or 1)
    if workers > 1 and entries:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(lambda e: _process_entry(e, config, out_dir, shared), entries))
    else:
        records = [_process_entry(e, config, out_dir, shared) for e in entries]

    manifest = {
        "config_fingerprint": config.fingerprint(),
        "split": split,
        "total": len(records),
        "succeeded": sum(1 for r in records if r["status"] == "ok"),
        "failed": sum(1 for r in records if r["status"] == "failed"),
        "entries": records,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def _class_color(class_id: int, num_classes: int) -> tuple[int, int, int]:
    hue = (class_id / max(1, num_classes)) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 1.0, 1.0)
    return int(r * 255), int(g * 255), int(b * 255)


def _write_overlay(image: Image, mask: MaskSet, path) -> None:
    """Image with per-class mask contours, for visual inspection only."""
    rgb = np.stack([image.pixels] * 3, axis=-1).copy()
    for c in range(mask.num_classes):
        plane = mask.plane(c)
        if not plane.any():
            continue
        boundary = plane.astype(bool) & ~erode(plane, StructElement("square", 1)).astype(bool)
        rgb[boundary] = _class_color(c, mask.num_classes)
    PILImage.fromarray(rgb, mode="RGB").save(path, format="PNG")


def cmd_evaluate(
    index: DatasetIndex,
    config: RefinementConfig,
    pred_dir,
    out_dir=None,
    split: str = "test",
    overlays: bool = False,
) -> tuple[DiceReport, list[dict]]:
    """Score predictions in pred_dir against the split's ground truth.

    Images with a missing or unreadable prediction are reported as failed
    and excluded from the statistics with a warning.
    """
    pred_dir = Path(pred_dir)
    entries = index.split(split)
    preds: list[MaskSet] = []
    gts: list[MaskSet] = []
    ids: list[str] = []
    failures: list[dict] = []
    for entry in entries:
        if not entry.gt:
            raise ConfigError(f"entry {entry.image} in split {split!r} has no ground truth")
        pred_path = pred_dir / f"{_entry_stem(entry)}.npy"
        try:
            pred = read_mask_set(pred_path)
            gt = read_mask_set(entry.gt)
        except (MaskRefineError, OSError) as exc:
            logger.warning("excluding %s from evaluation: %s", entry.image, exc)
            failures.append({"image": entry.image, "error": str(exc)})
            continue
        preds.append(pred)
        gts.append(gt)
        ids.append(entry.image)

    report = evaluate(
        preds,
        gts,
        absent_policy=config.absent_policy,
        config_fingerprint=config.fingerprint(),
        image_ids=ids,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.save_json(out_dir / "report.json")
        report.save_csv(out_dir / "report.csv")
        if overlays:
            for entry, pred in zip([e for e in entries if e.image in set(ids)], preds):
                image = read_image(entry.image)
                _write_overlay(image, pred, out_dir / f"{_entry_stem(entry)}_overlay.png")
    return report, failures


def make_validation_objective(
    index: DatasetIndex,
    base_config: RefinementConfig,
    split: str = "val",
):
    """Objective for the tuner: mean validation Dice of the full pipeline.

    Validation inputs are loaded once; each trial replays the
    clean-prompt-refine-evaluate chain with its own configuration.
    """
    entries = index.split(split)
    if not entries:
        raise ConfigError(f"no entries in split {split!r}")
    loaded = []
    for entry in entries:
        if not entry.gt:
            raise ConfigError(f"tuning requires ground truth for {entry.image}")
        loaded.append((read_image(entry.image), read_probability_map(entry.probs), read_mask_set(entry.gt)))

    def objective(params: dict) -> float:
        cfg = apply_params(base_config, params)
        preds, gts = [], []
        for image, probs, gt in loaded:
            refiner = build_refiner(cfg, gt if cfg.refiner == "oracle" else None)
            refined, _ = refine_entry(image, probs, cfg, refiner)
            preds.append(refined)
            gts.append(gt)
        return evaluate(preds, gts, absent_policy=cfg.absent_policy).mean

    return objective


def cmd_tune(
    index: DatasetIndex,
    base_config: RefinementConfig,
    space: SearchSpace,
    n_trials: int,
    rng_seed: int,
    out_dir,
    split: str = "val",
    sampler: str = "tpe",
) -> tuple[Trial | None, list[Trial], RefinementConfig | None]:
    """Search the space on the validation split and write the best config."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    objective = make_validation_objective(index, base_config, split)

    def report_trial(trial: Trial) -> None:
        value = "failed" if trial.objective is None else f"{trial.objective:.4f}"
        print(f"trial {trial.trial_id:4d}  objective={value}  params={json.dumps(trial.params)}")

    best, history = tune(
        objective,
        space,
        n_trials,
        rng_seed,
        history_path=out_dir / "history.jsonl",
        sampler=sampler,
        on_trial=report_trial,
    )
    best_config = None
    if best is not None:
        best_config = apply_params(base_config, best.params)
        best_config.save(out_dir / "best_config.json")
        print(f"best trial {best.trial_id}: objective={best.objective:.4f}")
        print(json.dumps(best_config.to_json(), indent=2))
    return best, history, best_config


@dataclass
class AblationPlan:
    """Nested training subsets of increasing size, anchored on a seed image."""

    subset_sizes: list[int]
    seed_image: str
    rng_seed: int = 0
    step: int = 5

    def __post_init__(self):
        if not self.subset_sizes:
            raise ConfigError("ablation plan needs at least one subset size")
        if any(b <= a for a, b in zip(self.subset_sizes, self.subset_sizes[1:])):
            raise ConfigError(f"subset sizes must be strictly increasing, got {self.subset_sizes}")
        if self.subset_sizes[0] < 1:
            raise ConfigError("smallest subset size must be >= 1")

    @classmethod
    def default_sizes(cls, n_train: int, step: int = 5) -> list[int]:
        sizes = [1] + list(range(step, n_train, step))
        if sizes[-1] != n_train:
            sizes.append(n_train)
        return sizes

    def to_json(self) -> dict:
        return {
            "subset_sizes": self.subset_sizes,
            "seed_image": self.seed_image,
            "rng_seed": self.rng_seed,
            "step": self.step,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "AblationPlan":
        try:
            return cls(
                subset_sizes=[int(v) for v in doc["subset_sizes"]],
                seed_image=doc["seed_image"],
                rng_seed=int(doc.get("rng_seed", 0)),
                step=int(doc.get("step", 5)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed ablation plan: {exc}") from exc

    @classmethod
    def load(cls, path) -> "AblationPlan":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_json(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read ablation plan {path}: {exc}") from exc


def build_subsets(index: DatasetIndex, plan: AblationPlan) -> dict[int, list[str]]:
    """Nested random subsets of the labelled training images.

    Subset 1 is exactly the designated seed image; each larger subset
    extends the previous one by sampling from the remaining pool, so
    membership is reproducible from the plan's seed.
    """
    train_images = [e.image for e in index.split("train")]
    if plan.seed_image not in train_images:
        raise ConfigError(f"seed image {plan.seed_image!r} is not a training entry")
    if plan.subset_sizes[-1] > len(train_images):
        raise ConfigError(
            f"largest subset ({plan.subset_sizes[-1]}) exceeds the training set ({len(train_images)})"
        )
    rng = np.random.default_rng(plan.rng_seed)
    pool = [img for img in train_images if img != plan.seed_image]
    order = [pool[i] for i in rng.permutation(len(pool))]
    chain = [plan.seed_image] + order
    return {n: chain[:n] for n in plan.subset_sizes}


def cmd_ablate(
    index: DatasetIndex,
    plan: AblationPlan,
    config: RefinementConfig,
    out_dir,
    probs_root=None,
    eval_split: str = "test",
) -> list[dict]:
    """Emit nested subset definitions and, when per-subset probability maps
    exist under probs_root/<n>/, refine and evaluate each subset size.

    Produces subsets.json plus ablation.csv rows of
    (subset size, method, mean Dice, std).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    subsets = build_subsets(index, plan)
    with open(out_dir / "subsets.json", "w", encoding="utf-8") as fh:
        json.dump({str(n): imgs for n, imgs in subsets.items()}, fh, indent=2)

    rows: list[dict] = []
    if probs_root is None:
        logger.info("no probability-map root given; emitted subset definitions only")
        return rows
    probs_root = Path(probs_root)
    entries = index.split(eval_split)
    for n in plan.subset_sizes:
        subset_dir = probs_root / str(n)
        if not subset_dir.is_dir():
            logger.warning("missing probability maps for subset %d (%s), skipping", n, subset_dir)
            continue
        preds, gts = [], []
        for entry in entries:
            if not entry.gt:
                raise ConfigError(f"evaluation entry {entry.image} has no ground truth")
            probs_path = subset_dir / Path(entry.probs).name
            try:
                probs = read_probability_map(probs_path)
                image = read_image(entry.image)
                gt = read_mask_set(entry.gt)
                refiner = build_refiner(config, gt if config.refiner == "oracle" else None)
                refined, _ = refine_entry(image, probs, config, refiner)
            except (MaskRefineError, OSError) as exc:
                logger.warning("subset %d: entry %s failed (%s)", n, entry.image, exc)
                continue
            preds.append(refined)
            gts.append(gt)
        if not preds:
            logger.warning("subset %d produced no evaluable predictions, skipping", n)
            continue
        report = evaluate(preds, gts, absent_policy=config.absent_policy)
        rows.append({"n": n, "method": config.refiner, "mean": report.mean, "std": report.std})

    with open(out_dir / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["n", "method", "mean", "std"])
        writer.writeheader()
        writer.writerows(rows)
    return rows
