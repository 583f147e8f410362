"""maskrefine: refine imprecise multi-label masks into pseudo labels.

Cleans probability maps (binarize, best-component selection, morphology),
extracts box/seed prompts, and drives a prompt-based refiner: a remote
segmentation service, the built-in random walker, or a test oracle.
"""

from .config import RefinementConfig, recommended_config
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
    write_image,
    write_mask_set,
    write_probability_map,
)
from .metrics import DiceReport, dice, evaluate
from .pipeline import clean_mask, cmd_ablate, cmd_evaluate, cmd_refine, cmd_tune, refine_entry
from .refine import OracleRefiner, RemoteRefiner, refine_class, refine_mask_set
from .randomwalk import RandomWalkRefiner, random_walk_refiner

__version__ = "0.1.0"
