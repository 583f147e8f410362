"""Command-line entry point.

Exit codes: 0 success, 1 fatal configuration or I/O error, 2 completed
with partial failures.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import RefinementConfig
from .errors import ConfigError, MaskRefineError
from .hpo import SearchSpace
from .maps import DatasetIndex
from .pipeline import AblationPlan, cmd_ablate, cmd_evaluate, cmd_refine, cmd_tune

logger = logging.getLogger(__name__)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskrefine", description="Pseudo-label refinement pipeline")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("refine", help="refine a split into pseudo-label files")
    p.add_argument("--index", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="unlabelled")
    p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--index", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--overlays", action="store_true")

    p = sub.add_parser("tune", help="search refinement hyperparameters on a validation split")
    p.add_argument("--index", required=True)
    p.add_argument("--config", required=True, help="base configuration to tune")
    p.add_argument("--space", default=None, help="search-space JSON (defaults to the standard space)")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--sampler", choices=("tpe", "random"), default="tpe")

    p = sub.add_parser("ablate", help="emit nested subsets and evaluate per-subset predictions")
    p.add_argument("--index", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--probs-root", default=None)
    p.add_argument("--split", default="test")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        index = DatasetIndex.load(args.index)
        config = RefinementConfig.load(args.config)
        if args.command == "refine":
            manifest = cmd_refine(index, config, args.out, split=args.split, workers=args.workers)
            print(f"refined {manifest['succeeded']}/{manifest['total']} entries -> {args.out}")
            return 2 if manifest["failed"] else 0
        if args.command == "evaluate":
            report, failures = cmd_evaluate(
                index, config, args.pred, out_dir=args.out, split=args.split, overlays=args.overlays
            )
            print(f"mean dice {report.mean:.4f} ± {report.std:.4f} over {len(report.per_image_mean)} images")
            return 2 if failures else 0
        if args.command == "tune":
            if args.space:
                import json

                with open(args.space, encoding="utf-8") as fh:
                    space = SearchSpace.from_json(json.load(fh))
            else:
                space = SearchSpace.default(config.refiner)
            best, _, _ = cmd_tune(
                index, config, space, args.trials, args.seed, args.out,
                split=args.split, sampler=args.sampler,
            )
            return 0 if best is not None else 2
        if args.command == "ablate":
            plan = AblationPlan.load(args.plan)
            rows = cmd_ablate(index, plan, config, args.out, probs_root=args.probs_root, eval_split=args.split)
            print(f"evaluated {len(rows)} subset sizes -> {args.out}")
            return 0
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, MaskRefineError) as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
