"""Command-line entry point: ``infsample <subcommand> ...``.

Exit status is 0 on success, 1 when a configuration or oracle check fails,
and 2 on usage errors. ``INFSAMPLE_VERBOSITY`` (quiet, info, debug) sets the
log level.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .harness import (
    ConfigError,
    config_from_dict,
    draw_sample,
    emit_results,
    evaluate,
    extrinsic_features,
    load_config,
    load_dataset,
    prepare,
    run_experiment,
)
from .influence import MLPContext, class_removal_edit, influence_vector
from .linalg import RngStream
from .model import load_checkpoint, penultimate_features, save_checkpoint, train
from .samplers import SAMPLER_IDS, write_feature_file

logger = logging.getLogger("infsample")

_LEVELS = {"quiet": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging():
    level = _LEVELS.get(os.environ.get("INFSAMPLE_VERBOSITY", "quiet").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _config(args):
    if args.config:
        return load_config(args.config)
    return config_from_dict({})


def _add_config(p):
    p.add_argument("--config", help="experiment JSON config (defaults to the built-in blob experiment)")


def _context(cfg, checkpoint=None):
    if checkpoint:
        cfg.checkpoint = str(Path(checkpoint).resolve())
    return prepare(cfg)


def cmd_train(args):
    cfg = _config(args)
    train_ds, test_ds = load_dataset(cfg.dataset, base_dir=cfg.base_dir)
    spec = cfg.model_spec(train_ds.n_features, train_ds.n_classes)
    theta, report = train(spec, train_ds, cfg.train_config(), return_report=True)
    save_checkpoint(args.out, spec, theta)
    print(json.dumps({"checkpoint": str(args.out), "param_count": spec.param_count, **report}))
    return 0


def cmd_features(args):
    cfg = _config(args)
    train_ds, _ = load_dataset(cfg.dataset, base_dir=cfg.base_dir)
    if args.mode == "intrinsic":
        if args.checkpoint:
            spec, theta = load_checkpoint(args.checkpoint)
        else:
            spec = cfg.model_spec(train_ds.n_features, train_ds.n_classes)
            theta = train(spec, train_ds, cfg.train_config())
        rows = penultimate_features(spec, theta, train_ds.inputs)
    elif args.mode == "extrinsic":
        rows = extrinsic_features(cfg, train_ds)
    else:
        rows = train_ds.inputs
    write_feature_file(args.out, rows)
    print(json.dumps({"features": str(args.out), "rows": rows.shape[0], "columns": rows.shape[1]}))
    return 0


def cmd_sample(args):
    cfg = _config(args)
    ctx = _context(cfg, args.checkpoint)
    sample = draw_sample(ctx, args.sampler, args.count, args.repetition)
    text = json.dumps(sample.to_dict())
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def _read_sample(path):
    return np.asarray(json.loads(Path(path).read_text())["indices"], dtype=np.int64)


def cmd_influence(args):
    cfg = _config(args)
    ctx = _context(cfg, args.checkpoint)
    if not 0 <= args.index < len(ctx.train):
        raise ConfigError(f"--index: must lie in [0, {len(ctx.train)})")
    S = _read_sample(args.sample) if args.sample else np.arange(len(ctx.train))
    mctx = MLPContext(ctx.spec, ctx.train.inputs, ctx.train.labels)
    vec, res = influence_vector(mctx, ctx.theta, S, ctx.train.inputs[args.index],
                                ctx.train.labels[args.index], cfg.lissa_config(),
                                RngStream.derive(cfg.base_seed, "influence", args.index),
                                return_result=True)
    np.savetxt(args.out, vec, fmt="%.17g")
    print(json.dumps({"influence": str(args.out), **res.telemetry()}))
    return 0


def cmd_unlearn(args):
    cfg = _config(args)
    ctx = _context(cfg, args.checkpoint)
    sample = draw_sample(ctx, args.sampler, args.count, args.repetition)
    mctx = MLPContext(ctx.spec, ctx.train.inputs, ctx.train.labels)
    result = class_removal_edit(mctx, ctx.theta, sample, ctx.removed, cfg.removal_config(),
                                RngStream.derive(cfg.base_seed, args.sampler, args.count,
                                                 args.repetition).spawn("lissa"))
    before = evaluate(ctx, ctx.theta)
    after = evaluate(ctx, result.params, result.telemetry, sampler=args.sampler, samples=args.count)
    out = {"baseline": before.as_dict(), "edited": after.as_dict(),
           "telemetry": [t.telemetry() for t in result.telemetry], "warnings": result.warnings}
    print(json.dumps(out, indent=2))
    if args.out:
        save_checkpoint(args.out, ctx.spec, result.params)
    return 0


def cmd_benchmark(args):
    cfg = _config(args)
    table = run_experiment(cfg, threads=args.threads)
    out_dir = Path(args.out) if args.out else cfg.resolve(cfg.output_dir)
    paths = emit_results(table, out_dir)
    print(json.dumps({"output_dir": str(out_dir), "trials": len(table.trials),
                      "failed": len(table.failures), "files": sorted(p.name for p in paths.values())}))
    return 0


def cmd_validate(args):
    from .oracles import run_suite

    results = run_suite(quick=args.quick)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="infsample", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("train", help="fit the configured model and write a checkpoint")
    _add_config(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("features", help="write a feature file for the training set")
    _add_config(p)
    p.add_argument("--mode", choices=("intrinsic", "extrinsic", "raw"), default="intrinsic")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("sample", help="draw one Hessian sample and print its indices")
    _add_config(p)
    p.add_argument("--sampler", choices=SAMPLER_IDS, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--repetition", type=int, default=0)
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("influence", help="influence vector of one training point")
    _add_config(p)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--sample", help="sample JSON from 'sample'; default is the whole training set")
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_influence)

    p = sub.add_parser("unlearn", help="one class-removal edit with before/after metrics")
    _add_config(p)
    p.add_argument("--sampler", choices=SAMPLER_IDS, default="logit")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--repetition", type=int, default=0)
    p.add_argument("--checkpoint")
    p.add_argument("--out", help="write the edited parameters as a checkpoint")
    p.set_defaults(func=cmd_unlearn)

    p = sub.add_parser("benchmark", help="full sampler x count x repetition sweep")
    _add_config(p)
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("validate", help="run the oracle cross-checks")
    p.add_argument("--quick", action="store_true")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
