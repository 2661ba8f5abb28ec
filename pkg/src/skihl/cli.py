"""Command-line entry points.

Subcommands:
    synth     generate a synthetic flood scenario into a directory
    run       coarse-to-fine inference + training (the full pipeline)
    baseline  sparse-labels-only training arm
    eval      score a written probability map against a truth map
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import pipeline, synth
from .inference import LN2
from .raster import load_f32, load_label_map, load_sparse_labels, sidecar_path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


def _cmd_synth(args) -> int:
    with open(args.config, "rb") as fh:
        raw = tomllib.load(fh)
    try:
        out = raw.pop("out")
    except KeyError:
        print(f"{args.config}: missing required key 'out'", file=sys.stderr)
        return 2
    config = synth.ScenarioConfig(**raw)
    paths = synth.write_scenario(config, out)
    for name in sorted(paths):
        print(f"{name}: {paths[name]}")
    return 0


def _cmd_run(args) -> int:
    config = pipeline.config_from_toml(args.config)
    if args.full_grounding:
        result = pipeline.run_full_grounding(config)
    else:
        result = pipeline.run(config)
    final = result.report.get("final", {})
    for key in ("classifier_accuracy", "inferred_accuracy"):
        if key in final:
            print(f"{key}: {final[key]:.4f}")
    print(f"report: {os.path.join(result.out_dir, 'report.json')}")
    return 0


def _cmd_baseline(args) -> int:
    config = pipeline.config_from_toml(args.config)
    report = pipeline.run_baseline(config)
    if "classifier_accuracy" in report:
        print(f"classifier_accuracy: {report['classifier_accuracy']:.4f}")
    print(f"report: {os.path.join(config.out, 'report.json')}")
    return 0


def _load_uncertainty(path: str, rows: int, cols: int):
    """Raw entropy in nats from either the .f32 sidecar or a scaled PGM."""
    if path.endswith(".f32"):
        return load_f32(path, rows, cols)
    u_map = load_label_map(path)
    if os.path.exists(sidecar_path(path)):
        return u_map.values  # sidecar holds raw nats
    return u_map.values * LN2  # PGM bytes encode u / ln 2


def _cmd_eval(args) -> int:
    pred = load_label_map(args.pred)
    truth = load_label_map(args.truth)
    unc = _load_uncertainty(args.unc, pred.rows, pred.cols)
    exclude = None
    if args.labels:
        exclude = load_sparse_labels(args.labels, pred.rows, pred.cols)
    report = pipeline.evaluate(pred, truth, unc, args.t_u, exclude=exclude)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="ascii") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skihl",
        description="Soft-logic label inference over a raster hierarchy, "
                    "coupled to a weakly supervised pixel classifier.")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scenario")
    p.add_argument("--config", required=True, help="scenario TOML (needs 'out')")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("run", help="run the coarse-to-fine pipeline")
    p.add_argument("--config", required=True, help="pipeline TOML")
    p.add_argument("--full-grounding", action="store_true",
                   help="refine every cell at every level (no selection)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("baseline", help="train on the sparse labels only")
    p.add_argument("--config", required=True, help="pipeline TOML")
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("eval", help="score a probability map against truth")
    p.add_argument("--pred", required=True, help="predicted map (.pgm)")
    p.add_argument("--truth", required=True, help="truth map (.pgm)")
    p.add_argument("--unc", required=True,
                   help="uncertainty map (.pgm with sidecar, or .f32)")
    p.add_argument("--labels", help="sparse labels CSV to exclude from scoring")
    p.add_argument("--t-u", type=float, default=0.325, dest="t_u",
                   help="certainty threshold in nats (default 0.325)")
    p.add_argument("--out", help="also write the metrics JSON here")
    p.set_defaults(func=_cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
