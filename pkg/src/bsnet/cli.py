"""Command-line entry point: ``bsnet {train,eval,rademacher,visualize,synth}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Dict, List, Optional

from .autodiff import ArchitectureMismatch
from .autodiff.checkpoint import CheckpointError
from .config import OUTPUT_ROOT_ENV, ConfigError, load_config, parse_override, resolve_output_dir
from .data import DataError
from .engine import NumericError
from .heads import ConfigurationError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("bsnet")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (dotted path, TOML value); repeatable")
    p.add_argument("--seed", type=int)
    p.add_argument("--output", help=f"output directory (relative paths go under ${OUTPUT_ROOT_ENV})")
    p.add_argument("--numeric-mode", choices=("float32", "float64"))
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bsnet", description="Bi-similarity few-shot learning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="episodic meta-training")
    _common(p)
    p.add_argument("--episodes", type=int, help="number of training episodes")
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("--episodes", type=int, help="number of test episodes (default 600)")
    p.add_argument("--jobs", type=int, help="parallel evaluation workers")
    p.add_argument("--per-episode", action="store_true", help="also write per-episode accuracies as CSV")

    p = sub.add_parser("rademacher", help="check the complexity inequality on toy families")
    _common(p)

    p = sub.add_parser("visualize", help="write Grad-CAM overlays for test episodes")
    _common(p)
    p.add_argument("checkpoint")

    p = sub.add_parser("synth", help="write the synthetic dataset as an image directory")
    _common(p)
    return parser


def _overrides(args) -> Dict[str, object]:
    out: Dict[str, object] = {}
    for text in args.set:
        key, value = parse_override(text)
        out[key] = value
    flags = {"seed": args.seed, "output_dir": args.output, "numeric_mode": args.numeric_mode}
    if args.command == "train":
        flags["episodes.train_episodes"] = args.episodes
        flags["train.checkpoint_every"] = args.checkpoint_every
    if args.command == "eval":
        flags["episodes.eval_episodes"] = args.episodes
        flags["jobs"] = args.jobs
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def run(args) -> int:
    from . import runs

    cfg = load_config(args.config, _overrides(args))
    out_dir = resolve_output_dir(cfg, args.command)
    if args.command == "train":
        outcome = runs.run_train(cfg, out_dir, resume=args.resume)
        last = outcome.rows[-1] if outcome.rows else None
        print(f"trained to {outcome.checkpoint}" + (f" (last loss {last.loss:.4f})" if last else ""))
    elif args.command == "eval":
        report = runs.run_eval(cfg, args.checkpoint, out_dir, args.per_episode)
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    elif args.command == "rademacher":
        verdict = runs.run_rademacher(cfg, out_dir)
        print(f"inequality holds on {sum(s['holds'] for s in verdict['samples'])}/{len(verdict['samples'])} "
              f"samples; {verdict['witnesses_exact']}/{verdict['witnesses_checked']} exact witnesses")
    elif args.command == "visualize":
        paths = runs.run_visualize(cfg, args.checkpoint, out_dir)
        print(f"wrote {len(paths)} heatmaps to {out_dir}")
    elif args.command == "synth":
        ds = runs.run_synth(cfg, out_dir)
        print(f"wrote {len(ds.items)} images in {len(ds.classes)} classes to {out_dir}")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (ConfigError, ConfigurationError, ArchitectureMismatch, CheckpointError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
