"""Command-line entry point: ``casp match | eval | bench | selftest | init-weights``.

Exit codes: 0 ok, 2 bad input (images, config, spec), 3 bad weights,
4 an invariant or acceptance check failed. Nothing is written to disk
unless ``--out DIR`` is given, and then only inside ``DIR``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import jsonschema
from threadpoolctl import threadpool_limits

from .backbone import WeightError
from .config import ConfigError, load_config
from .images import ImageError, read_image
from .weights import WeightFileError, init_weights, load_weights, save_weights, validate_weights

EXIT_OK, EXIT_INPUT, EXIT_WEIGHTS, EXIT_INVARIANT = 0, 2, 3, 4

log = logging.getLogger("casp")


class InputError(Exception):
    pass


def _setup_logging() -> None:
    level = os.environ.get("CASP_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(name)s %(levelname)s: %(message)s",
                        stream=sys.stderr)


def load_schema(name: str) -> dict:
    return json.loads(resources.files("casp").joinpath("schemas", f"{name}.schema.json").read_text())


def validate_json(doc: dict, name: str) -> None:
    jsonschema.validate(doc, load_schema(name))


def _emit(args, filename: str, text: str) -> None:
    """Write ``text`` into the output directory, or to stdout when there is none."""
    if args.out is None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
        return
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / filename).write_text(text)
    log.info("wrote %s", out / filename)


def _side_file(args, filename: str, text: str) -> None:
    """Auxiliary output: only written when an output directory is given."""
    if args.out is not None:
        _emit(args, filename, text)


def _config(args):
    overrides = {"variant": args.variant, "k": args.k, "theta": args.theta, "w": args.w, "seed": args.seed}
    return load_config(args.config, overrides)


def _weights(args, cfg) -> dict:
    if args.weights is None:
        log.warning("no --weights given: using seeded random weights (demo only, matches carry no accuracy meaning)")
        return init_weights(cfg.variant, cfg.seed, cfg.n16_blocks, cfg.n8_blocks)
    weights = load_weights(args.weights)
    validate_weights(weights, cfg.variant, cfg.n16_blocks, cfg.n8_blocks)
    return weights


# --- commands --------------------------------------------------------------


def cmd_match(args) -> int:
    from .pipeline import Matcher

    cfg = _config(args)
    img_a, img_b = read_image(args.image_a), read_image(args.image_b)
    matcher = Matcher(cfg, _weights(args, cfg))
    result = matcher.match(img_a, img_b, refine=not args.no_refine)
    doc = result.to_dict()
    validate_json(doc, "match")
    log.info("%d matches in %.2fs", len(result), result.timings.get("total", 0.0))
    _emit(args, "matches.json", json.dumps(doc))
    _side_file(args, "timings.json", json.dumps(result.timings, indent=1, sort_keys=True))
    return EXIT_OK


def _read_spec(path: str) -> dict:
    try:
        spec = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read eval spec {path}: {exc}") from None
    if not isinstance(spec, dict):
        raise InputError("eval spec must be a JSON object")
    return spec


def cmd_eval(args) -> int:
    from .evalharness.report import EvalSpec, evaluate

    spec = _read_spec(args.spec)
    for key, value in (("k", args.k), ("theta", args.theta), ("window", args.w), ("seed", args.seed)):
        if value is not None:
            spec[key] = value
    try:
        espec = EvalSpec.from_dict(spec)
        if espec.k < 4:
            raise ConfigError(f"k must be >= 4, got {espec.k}")
        report = evaluate(espec)
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad eval spec: {exc}") from None
    doc = json.loads(report.to_json())
    validate_json(doc, "eval")
    _emit(args, "eval.json", report.to_json())
    _side_file(args, "eval.csv", report.to_csv())
    _side_file(args, "runtime.json", report.runtime_json())
    return EXIT_OK


def cmd_bench(args) -> int:
    from .evalharness.bench import DEFAULT_SIZES, bench_matching, op_ratio_ok, rows_to_csv, rows_to_gnuplot, rows_to_json

    k = 8 if args.k is None else args.k
    if k < 4:
        raise ConfigError(f"k must be >= 4, got {k}")
    sizes = args.sizes or list(DEFAULT_SIZES)
    try:
        rows = bench_matching(sizes, k=k, repeats=args.repeats, seed=args.seed or 0, threads=args.threads or 1,
                              run_global=not args.no_global)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    doc = json.loads(rows_to_json(rows))
    validate_json(doc, "bench")
    sys.stdout.write(rows_to_csv(rows))
    _side_file(args, "bench.json", rows_to_json(rows))
    _side_file(args, "bench.csv", rows_to_csv(rows))
    _side_file(args, "bench.dat", rows_to_gnuplot(rows))
    if not op_ratio_ok(rows):
        log.error("cascade operation count is not below the limit at the largest size")
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    skip = tuple(s.upper() for s in (args.skip or ()))
    results = run_selftest(skip=skip, weights_path=args.weights, report=lambda r: print(r.line(), flush=True))
    passed = all(r.passed for r in results)
    doc = {"passed": passed, "checks": [r.as_dict() for r in results]}
    validate_json(doc, "selftest")
    _side_file(args, "selftest.json", json.dumps(doc, indent=1))
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return EXIT_OK if passed else EXIT_INVARIANT


def cmd_init_weights(args) -> int:
    if args.out is None:
        raise InputError("init-weights needs --out DIR")
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_weights(out / "weights.bin", init_weights(cfg.variant, cfg.seed, cfg.n16_blocks, cfg.n8_blocks))
    print(out / "weights.bin")
    return EXIT_OK


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--variant", choices=["full", "lite"], default=None, help="backbone width (default full)")
    common.add_argument("--k", type=int, default=None, help="correspondence priors per 1/16 token (>= 4, default 8)")
    common.add_argument("--theta", type=float, default=None, help="match confidence threshold (default 0.2)")
    common.add_argument("--w", type=int, default=None, help="refinement window at 1/2 scale (odd, default 5)")
    common.add_argument("--seed", type=int, default=None, help="seed for weights, scenes and RANSAC")
    common.add_argument("--threads", type=int, default=None, help="BLAS threads (bench defaults to 1)")
    common.add_argument("--out", default=None, help="output directory; without it results go to stdout")
    common.add_argument("--config", default=None, help="flat key = value config file (flags take precedence)")
    common.add_argument("--weights", default=None, help="weight container (default: seeded random demo weights)")

    parser = argparse.ArgumentParser(prog="casp", description="Cascaded semi-dense matching with correspondence priors.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", parents=[common], help="match two grayscale images")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.add_argument("--no-refine", action="store_true", help="report coarse token centers only")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", parents=[common], help="evaluate on synthetic scenes from a JSON spec")
    p.add_argument("spec")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="time cascaded versus global matching")
    p.add_argument("--sizes", type=int, nargs="+", default=None, help="square image sizes (default 256 512 832 1152)")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--no-global", action="store_true", help="skip the global matcher (no ratios)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("selftest", parents=[common], help="run the invariant and acceptance suite")
    p.add_argument("--skip", nargs="*", default=None, help="check names to skip, e.g. AC5")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("init-weights", parents=[common], help="write seeded random weights to DIR/weights.bin")
    p.set_defaults(func=cmd_init_weights)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (ImageError, ConfigError, InputError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except (WeightFileError, WeightError) as exc:
        log.error("%s", exc)
        return EXIT_WEIGHTS
    except jsonschema.ValidationError as exc:
        log.error("output failed schema validation: %s", exc.message)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
