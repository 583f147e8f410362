"""Tree-structured Parzen estimator search over pipeline configurations.

Sequential model-based optimization: after a uniform startup phase the
completed trials are split at the gamma-quantile of the objective into a
good and a bad set; per dimension, densities l(x) (good) and g(x) (bad)
are fitted and candidates drawn from l are ranked by l(x)/g(x).
Categorical and integer dimensions use add-one-smoothed frequencies,
numeric dimensions Gaussian kernels with Scott's-rule bandwidth floored
at 1% of the range. Suggestions are deterministic given (history, seed).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .config import RefinementConfig
from .morphology import MorphOp, StructElement
from .prompts import PromptMode

logger = logging.getLogger(__name__)

GAMMA = 0.25
N_STARTUP = 10
N_CANDIDATES = 24
_MAX_RESAMPLE = 200


@dataclass(frozen=True)
class CategoricalDim:
    name: str
    choices: tuple

    def sample(self, rng: np.random.Generator):
        return self.choices[int(rng.integers(len(self.choices)))]


@dataclass(frozen=True)
class IntDim:
    name: str
    low: int
    high: int  # inclusive

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.low, self.high + 1))


@dataclass(frozen=True)
class LogFloatDim:
    name: str
    low: float
    high: float

    def sample(self, rng: np.random.Generator) -> float:
        z = rng.uniform(math.log(self.low), math.log(self.high))
        return float(math.exp(z))


Dim = CategoricalDim | IntDim | LogFloatDim


def _mode_valid(params: dict) -> bool:
    keys = ("use_box", "use_positive_seed", "use_negative_seeds")
    present = [k for k in keys if k in params]
    if not present:
        return True
    return any(bool(params[k]) for k in present)


@dataclass
class SearchSpace:
    dims: list[Dim]

    def dim(self, name: str) -> Dim:
        for d in self.dims:
            if d.name == name:
                return d
        raise KeyError(name)

    def is_valid(self, params: dict) -> bool:
        return _mode_valid(params)

    def sample(self, rng: np.random.Generator) -> dict:
        for _ in range(_MAX_RESAMPLE):
            params = {d.name: d.sample(rng) for d in self.dims}
            if self.is_valid(params):
                return params
        raise RuntimeError("could not draw a valid configuration from the search space")

    @classmethod
    def default(cls, refiner: str = "oracle") -> "SearchSpace":
        dims: list[Dim] = [
            CategoricalDim("morph_kind", ("none", "erosion", "dilation")),
            CategoricalDim("element_shape", ("square", "disk")),
            IntDim("radius", 1, 8),
            CategoricalDim("use_box", (False, True)),
            CategoricalDim("use_positive_seed", (False, True)),
            CategoricalDim("use_negative_seeds", (False, True)),
            CategoricalDim("self_refine", (False, True)),
        ]
        if refiner == "random_walk":
            dims.append(LogFloatDim("beta", 1.0, 1000.0))
        return cls(dims)

    def to_json(self) -> dict:
        out = []
        for d in self.dims:
            if isinstance(d, CategoricalDim):
                out.append({"name": d.name, "type": "categorical", "choices": list(d.choices)})
            elif isinstance(d, IntDim):
                out.append({"name": d.name, "type": "int", "low": d.low, "high": d.high})
            else:
                out.append({"name": d.name, "type": "logfloat", "low": d.low, "high": d.high})
        return {"dims": out}

    @classmethod
    def from_json(cls, doc: dict) -> "SearchSpace":
        dims: list[Dim] = []
        for item in doc["dims"]:
            kind = item["type"]
            if kind == "categorical":
                dims.append(CategoricalDim(item["name"], tuple(item["choices"])))
            elif kind == "int":
                dims.append(IntDim(item["name"], int(item["low"]), int(item["high"])))
            elif kind == "logfloat":
                dims.append(LogFloatDim(item["name"], float(item["low"]), float(item["high"])))
            else:
                raise ValueError(f"unknown dimension type {kind!r}")
        return cls(dims)


def apply_params(base: RefinementConfig, params: dict) -> RefinementConfig:
    """Overlay sampled search parameters onto a base configuration."""
    kind = params.get("morph_kind", base.morph.kind)
    if kind == "none":
        morph = MorphOp.none()
    else:
        shape = params.get("element_shape", "square")
        radius = int(params.get("radius", 1))
        morph = MorphOp(kind, StructElement(shape, radius))
    self_refine = bool(params.get("self_refine", base.prompt_mode.self_refine_rounds > 0))
    mode = PromptMode(
        use_box=bool(params.get("use_box", base.prompt_mode.use_box)),
        use_positive_seed=bool(params.get("use_positive_seed", base.prompt_mode.use_positive_seed)),
        use_negative_seeds=bool(params.get("use_negative_seeds", base.prompt_mode.use_negative_seeds)),
        self_refine_rounds=1 if self_refine else 0,
        dense_in_refine=self_refine,
    )
    refiner_params = dict(base.refiner_params)
    if "beta" in params:
        refiner_params["beta"] = float(params["beta"])
    return base.with_updates(morph=morph, prompt_mode=mode, refiner_params=refiner_params)


@dataclass
class Trial:
    trial_id: int
    params: dict
    objective: float | None
    status: str  # "complete" | "failed"

    def to_json(self) -> dict:
        return {
            "trial_id": self.trial_id,
            "params": self.params,
            "objective": self.objective,
            "status": self.status,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Trial":
        return cls(
            trial_id=int(doc["trial_id"]),
            params=dict(doc["params"]),
            objective=doc["objective"],
            status=doc["status"],
        )


def load_history(path) -> list[Trial]:
    trials: list[Trial] = []
    try:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    trials.append(Trial.from_json(json.loads(line)))
    except FileNotFoundError:
        return []
    return trials


def append_history(path, trial: Trial) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(trial.to_json()) + "\n")


class _FrequencyEstimator:
    """Add-one-smoothed frequencies over a finite support.

    Ordered supports (integer dimensions) additionally spill a triangular
    half-weight onto each observation's neighbours, so an untried value
    adjacent to a good cluster stays competitive in the density ratio
    instead of being stuck at the smoothing floor.
    """

    def __init__(self, support: list, observed: list, neighbor_spill: float = 0.0):
        self.support = list(support)
        index = {v: i for i, v in enumerate(self.support)}
        weights = np.ones(len(self.support))  # add-one smoothing
        for v in observed:
            weights[index[v]] += 1.0
            if neighbor_spill:
                i = index[v]
                if i > 0:
                    weights[i - 1] += neighbor_spill
                if i + 1 < len(weights):
                    weights[i + 1] += neighbor_spill
        self.probs = weights / weights.sum()

    def sample(self, rng: np.random.Generator):
        return self.support[int(rng.choice(len(self.support), p=self.probs))]

    def log_density(self, value) -> float:
        return float(np.log(self.probs[self.support.index(value)]))


class _KernelEstimator:
    """1-D Gaussian KDE in log space with Scott bandwidth, floored at 1% of range."""

    def __init__(self, dim: LogFloatDim, observed: list[float]):
        self.lo = math.log(dim.low)
        self.hi = math.log(dim.high)
        points = np.log(np.asarray(observed, dtype=np.float64)) if observed else np.array([])
        if points.size == 0:
            points = np.array([(self.lo + self.hi) / 2.0])
        spread = float(points.std()) if points.size > 1 else 0.0
        scott = spread * points.size ** (-0.2)
        self.bw = max(scott, 0.01 * (self.hi - self.lo))
        self.points = points

    def sample(self, rng: np.random.Generator) -> float:
        center = self.points[int(rng.integers(self.points.size))]
        z = float(np.clip(center + rng.normal() * self.bw, self.lo, self.hi))
        return math.exp(z)

    def log_density(self, value: float) -> float:
        z = math.log(value)
        norm = 1.0 / (self.bw * math.sqrt(2.0 * math.pi))
        dens = np.mean(norm * np.exp(-0.5 * ((z - self.points) / self.bw) ** 2))
        return float(np.log(max(dens, 1e-300)))


def _fit_estimator(dim: Dim, observed: list):
    if isinstance(dim, CategoricalDim):
        return _FrequencyEstimator(list(dim.choices), observed)
    if isinstance(dim, IntDim):
        return _FrequencyEstimator(list(range(dim.low, dim.high + 1)), observed, neighbor_spill=0.5)
    return _KernelEstimator(dim, observed)


def _fingerprint(params: dict) -> str:
    return json.dumps(params, sort_keys=True)


def suggest(history: list[Trial], space: SearchSpace, rng_seed: int) -> dict:
    """Next configuration to try, maximizing the objective.

    Uniform during startup (or when no trial has completed); afterwards
    the best candidate by density ratio among N_CANDIDATES draws from the
    good-set density. Configurations already present in the history are
    excluded from the ranking: re-evaluating a deterministic objective
    wastes a trial, and on finite spaces the ratio's argmax would
    otherwise lock onto the incumbent forever.
    """
    rng = np.random.default_rng([rng_seed, len(history)])
    complete = [t for t in history if t.status == "complete" and t.objective is not None]
    seen = {_fingerprint(t.params) for t in history}

    def unseen_uniform() -> dict:
        for _ in range(_MAX_RESAMPLE):
            params = space.sample(rng)
            if _fingerprint(params) not in seen:
                return params
        return space.sample(rng)  # space may be exhausted

    if len(complete) < N_STARTUP:
        return space.sample(rng)

    ranked = sorted(complete, key=lambda t: t.objective, reverse=True)
    n_good = max(1, math.ceil(GAMMA * len(ranked)))
    good, bad = ranked[:n_good], ranked[n_good:]
    if not bad:
        bad = ranked

    good_est = {d.name: _fit_estimator(d, [t.params[d.name] for t in good if d.name in t.params]) for d in space.dims}
    bad_est = {d.name: _fit_estimator(d, [t.params[d.name] for t in bad if d.name in t.params]) for d in space.dims}

    best_params: dict | None = None
    best_score = -math.inf
    for _ in range(N_CANDIDATES):
        candidate = {d.name: good_est[d.name].sample(rng) for d in space.dims}
        if not space.is_valid(candidate) or _fingerprint(candidate) in seen:
            continue
        score = sum(
            good_est[d.name].log_density(candidate[d.name]) - bad_est[d.name].log_density(candidate[d.name])
            for d in space.dims
        )
        if score > best_score:
            best_score, best_params = score, candidate
    if best_params is None:
        return unseen_uniform()
    return best_params


def random_suggest(history: list[Trial], space: SearchSpace, rng_seed: int) -> dict:
    """Pure random-search baseline with the same determinism contract."""
    rng = np.random.default_rng([rng_seed, len(history)])
    return space.sample(rng)


def tune(
    objective: Callable[[dict], float],
    space: SearchSpace,
    n_trials: int,
    rng_seed: int,
    history_path=None,
    sampler: str = "tpe",
    on_trial: Callable[[Trial], None] | None = None,
) -> tuple[Trial | None, list[Trial]]:
    """Run the search until the history holds n_trials trials.

    The history is persisted after every trial when history_path is given,
    so an interrupted search resumes exactly where it stopped. A failing
    objective marks the trial failed and the search continues.
    """
    suggester = {"tpe": suggest, "random": random_suggest}[sampler]
    history: list[Trial] = load_history(history_path) if history_path else []
    while len(history) < n_trials:
        params = suggester(history, space, rng_seed)
        trial_id = len(history)
        try:
            value = float(objective(params))
            trial = Trial(trial_id, params, value, "complete")
        except Exception as exc:  # noqa: BLE001 - any pipeline error fails the trial
            logger.warning("trial %d failed: %s", trial_id, exc)
            trial = Trial(trial_id, params, None, "failed")
        history.append(trial)
        if history_path:
            append_history(history_path, trial)
        if on_trial:
            on_trial(trial)
    complete = [t for t in history if t.status == "complete" and t.objective is not None]
    best = max(complete, key=lambda t: t.objective) if complete else None
    return best, history
