"""Single-document pipeline configuration with stable fingerprinting."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

from .errors import ConfigError
from .metrics import ABSENT_POLICIES
from .morphology import MorphOp, StructElement
from .prompts import PromptMode

SCHEMA_VERSION = 1

REFINERS = ("oracle", "random_walk", "remote")


@dataclass(frozen=True)
class RefinementConfig:
    """Every tunable choice of the refinement pipeline."""

    threshold: float = 0.5
    connectivity: int = 8
    morph: MorphOp = field(default_factory=MorphOp.none)
    prompt_mode: PromptMode = field(default_factory=PromptMode)
    refiner: str = "oracle"
    refiner_params: dict = field(default_factory=dict)
    absent_policy: str = "exclude"
    rng_seed: int = 0
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie strictly inside (0, 1), got {self.threshold}")
        if self.connectivity not in (4, 8):
            raise ConfigError(f"connectivity must be 4 or 8, got {self.connectivity}")
        if self.refiner not in REFINERS:
            raise ConfigError(f"refiner must be one of {REFINERS}, got {self.refiner!r}")
        if self.absent_policy not in ABSENT_POLICIES:
            raise ConfigError(f"absent_policy must be one of {ABSENT_POLICIES}")

    def with_updates(self, **kwargs) -> "RefinementConfig":
        return replace(self, **kwargs)

    def to_json(self) -> dict:
        morph = {"kind": self.morph.kind}
        if self.morph.element is not None:
            morph["element"] = {"shape": self.morph.element.shape, "radius": self.morph.element.radius}
        return {
            "schema_version": self.schema_version,
            "threshold": self.threshold,
            "connectivity": self.connectivity,
            "morph": morph,
            "prompt_mode": {
                "use_box": self.prompt_mode.use_box,
                "use_positive_seed": self.prompt_mode.use_positive_seed,
                "use_negative_seeds": self.prompt_mode.use_negative_seeds,
                "self_refine_rounds": self.prompt_mode.self_refine_rounds,
                "dense_in_refine": self.prompt_mode.dense_in_refine,
            },
            "refiner": self.refiner,
            "refiner_params": dict(self.refiner_params),
            "absent_policy": self.absent_policy,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RefinementConfig":
        try:
            morph_doc = doc.get("morph", {"kind": "none"})
            element = None
            if morph_doc.get("element") is not None:
                element = StructElement(
                    shape=morph_doc["element"]["shape"],
                    radius=int(morph_doc["element"]["radius"]),
                )
            mode_doc = doc.get("prompt_mode", {})
            return cls(
                threshold=float(doc.get("threshold", 0.5)),
                connectivity=int(doc.get("connectivity", 8)),
                morph=MorphOp(kind=morph_doc.get("kind", "none"), element=element),
                prompt_mode=PromptMode(
                    use_box=bool(mode_doc.get("use_box", True)),
                    use_positive_seed=bool(mode_doc.get("use_positive_seed", True)),
                    use_negative_seeds=bool(mode_doc.get("use_negative_seeds", True)),
                    self_refine_rounds=int(mode_doc.get("self_refine_rounds", 1)),
                    dense_in_refine=bool(mode_doc.get("dense_in_refine", True)),
                ),
                refiner=doc.get("refiner", "oracle"),
                refiner_params=dict(doc.get("refiner_params", {})),
                absent_policy=doc.get("absent_policy", "exclude"),
                rng_seed=int(doc.get("rng_seed", 0)),
                schema_version=int(doc.get("schema_version", SCHEMA_VERSION)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed refinement config: {exc}") from exc

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "RefinementConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(doc)

    def fingerprint(self) -> str:
        """Short stable hash embedded in every report for provenance."""
        canonical = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def recommended_config(refiner: str = "oracle", **refiner_params) -> RefinementConfig:
    """The validated-best pipeline configuration: dilation with a square
    element of radius 8, box-first prompting, one self-refinement round
    with positive and negative seeds plus the dense prompt."""
    return RefinementConfig(
        morph=MorphOp("dilation", StructElement("square", 8)),
        prompt_mode=PromptMode(
            use_box=True,
            use_positive_seed=True,
            use_negative_seeds=True,
            self_refine_rounds=1,
            dense_in_refine=True,
        ),
        refiner=refiner,
        refiner_params=dict(refiner_params),
    )
