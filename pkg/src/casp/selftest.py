"""Self-test: pipeline-level sanity checks followed by the acceptance suite."""

from __future__ import annotations

import numpy as np

from .acceptance import CheckResult, _timed, run_acceptance
from .config import ConfigError, PipelineConfig
from .weights import WeightFileError, decode_weights, encode_weights, init_weights, load_weights, validate_weights


def _weights_checksum():
    weights = init_weights("lite", seed=1, n16_blocks=1, n8_blocks=1)
    blob = bytearray(encode_weights(weights))
    back = decode_weights(bytes(blob))
    exact = set(back) == set(weights) and all(np.array_equal(back[k], weights[k]) for k in weights)
    blob[len(blob) // 2] ^= 0x01
    try:
        decode_weights(bytes(blob))
        caught = False
    except WeightFileError as exc:
        caught = "checksum" in str(exc)
    return exact and caught, f"round trip exact {exact}, flipped payload bit rejected {caught}"


def _weights_file(path: str):
    try:
        weights = load_weights(path)
    except WeightFileError as exc:
        return False, f"{path}: {exc}"
    variants = []
    for variant in ("full", "lite"):
        try:
            validate_weights(weights, variant)
            variants.append(variant)
        except KeyError:
            pass
    return bool(variants), f"{path}: {len(weights)} entries, complete for {variants or 'no variant'}"


def _config_min_k():
    try:
        PipelineConfig(k=3)
    except ConfigError:
        return True, "k = 3 rejected"
    return False, "k = 3 accepted"


def _self_match():
    from .evalharness.scenes import make_truth, render_images
    from .pipeline import Matcher
    from .rng import make_rng

    truth = make_truth("identity", (96, 128), make_rng(0, "selftest"))
    img, _ = render_images(truth, seed=0)
    matcher = Matcher(PipelineConfig(seed=0))
    res = matcher.match(img, img)
    diag = float(np.mean(res.matches.ia == res.matches.ib)) if len(res) else 0.0
    small = img[:65, :67]
    res2 = matcher.match(small, small)
    in_frame = bool(np.all(res2.points_a < [67, 65]) and np.all(res2.points_b[:, :2] < [67 + 4, 65 + 4]))
    ok = len(res) > 0 and diag == 1.0 and tuple(res2.padded_a) == (96, 96) and in_frame
    return ok, f"{len(res)} self matches, {diag:.0%} on the diagonal; 65x67 padded to {tuple(res2.padded_a)}, in frame {in_frame}"


def _eval_determinism():
    from .evalharness.report import EvalSpec, evaluate

    spec = EvalSpec(family="identity", n_scenes=2, image_size=(128, 128), seed=3)
    r1, r2 = evaluate(spec), evaluate(spec)
    same = r1.to_json() == r2.to_json()
    ok = same and r1.precision == 1.0 and abs(r1.auc[0] - 1.0) < 1e-9  # DLT round-off leaves ~1e-13 px
    return ok, f"identical reports {same}, precision {r1.precision:.3f}, AUC@3px {r1.auc[0]:.3f}"


def run_selftest(skip: tuple[str, ...] = (), weights_path: str | None = None, report=None) -> list[CheckResult]:
    checks = [
        ("weights-checksum", _weights_checksum),
        ("config-min-k", _config_min_k),
        ("pipeline-self-match", _self_match),
        ("eval-determinism", _eval_determinism),
    ]
    if weights_path is not None:
        checks.insert(0, ("weights-file", lambda: _weights_file(weights_path)))
    results = []
    for name, fn in checks:
        if name in skip or name.upper() in skip:
            continue
        try:
            res = _timed(name, fn)
        except Exception as exc:
            res = CheckResult(name, False, f"raised {type(exc).__name__}: {exc}")
        results.append(res)
        if report is not None:
            report(res)
    return results + run_acceptance(skip=skip, report=report)
