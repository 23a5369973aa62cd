"""``palnet`` command line: generate, preprocess, train, predict, evaluate, ablate, run."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .geometry import GeometryError
from .pipeline import ConfigError, MissingArtifactError
from .registration import RegistrationError
from .training import TrainingError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

COMMANDS = ("generate", "preprocess", "train", "predict", "evaluate", "ablate", "run", "show-config")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON pipeline configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, e.g. train.alpha=0.5 (repeatable)")
    common.add_argument("--jobs", type=int, help="parallel workers for alignment and fold training")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--output", help="artifact root directory (overrides the config)")
    common.add_argument("--force", action="store_true", help="recompute even if artifacts are current")
    common.add_argument("--exclude-landmarks", metavar="NAME,...",
                        help="also report metrics without these landmarks; 'ears' selects the 8 ear landmarks")
    common.add_argument("--postprocess", metavar="nearest|centroid:K|none",
                        help="surface re-projection of network predictions")
    common.add_argument("--svg", action="store_true", help="render SVG figures during evaluate")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="palnet", description="Patch-attention 3D facial landmark pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "generate": "write a synthetic dataset",
        "preprocess": "align subjects, build per-fold atlases and patch tensors",
        "train": "train one model per cross-validation fold",
        "predict": "predict validation landmarks of every fold",
        "evaluate": "compute reports for network and atlas predictions",
        "ablate": "run the ablation variant grid",
        "run": "generate, preprocess, train, predict and evaluate in sequence",
        "show-config": "print the resolved configuration as JSON",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "ablate":
            p.add_argument("--variants", metavar="NAME,...", help="subset of ablation variants")
    return parser


def _config_from_args(args):
    overrides = pipeline.parse_overrides(args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    if args.output is not None:
        overrides["output"] = args.output
    if args.postprocess is not None:
        overrides["postprocess"] = args.postprocess
    if args.svg:
        overrides["svg"] = True
    if args.exclude_landmarks is not None:
        names = [n.strip() for n in args.exclude_landmarks.split(",") if n.strip()]
        if names == ["ears"]:
            names = pipeline.default_exclusions()
        overrides["exclude_landmarks"] = names
    return pipeline.load_config(args.config, overrides)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config_from_args(args)
        cmd = args.command
        if cmd == "show-config":
            print(json.dumps(cfg.to_dict(), indent=1))
        elif cmd == "generate":
            pipeline.run_generate(cfg, args.force)
        elif cmd == "preprocess":
            pipeline.run_preprocess(cfg, args.force)
        elif cmd == "train":
            pipeline.run_train(cfg, force=args.force)
        elif cmd == "predict":
            pipeline.run_predict(cfg, force=args.force)
        elif cmd == "evaluate":
            m = pipeline.run_evaluate(cfg, force=args.force)
            print(json.dumps(m["summary"], indent=1, sort_keys=True))
        elif cmd == "ablate":
            variants = args.variants.split(",") if args.variants else None
            rows = pipeline.run_ablate(cfg, variants, args.force)
            print("variant,val_loss,pointwise_mean,distance_matrix_mean")
            for r in rows:
                print(f"{r['variant']},{r['val_loss']:.4f},{r['pointwise_mean']:.4f},"
                      f"{r['distance_matrix_mean']:.4f}")
        elif cmd == "run":
            m = pipeline.run_all(cfg, args.force)
            print(json.dumps(m["summary"], indent=1, sort_keys=True))
    except (ConfigError, MissingArtifactError, KeyError) as exc:
        print(f"palnet: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (RegistrationError, TrainingError, GeometryError, FloatingPointError, OSError) as exc:
        print(f"palnet: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"palnet: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
