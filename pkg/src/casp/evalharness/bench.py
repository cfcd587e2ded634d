"""Matching-stage micro-benchmark: cascaded search versus global dense search.

Both matchers run on the same fixed random feature maps per size. Each
reports wall-clock time (best of ``repeats``) and instrumented operation
counts, so the efficiency comparison is checkable on any machine.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from ..backbone import HIGH_CHANNELS
from ..cascade import DEFAULT_THETA, cascade_match
from ..rng import make_rng
from ..tensor import DTYPE, OpCounter
from .oracle import global_oracle_match

DEFAULT_SIZES = (256, 512, 832, 1152)
OP_RATIO_LIMIT = 0.2
OP_RATIO_SIZE = 1152


@dataclass
class BenchRow:
    height: int
    width: int
    n8: int
    n16: int
    k: int
    ops_global: int
    ops_cascade: int
    op_ratio: float  # cascade / global
    time_global: float  # seconds, best of repeats
    time_cascade: float
    speedup: float  # global / cascade wall-clock
    matches_global: int
    matches_cascade: int
    ops_global_detail: dict
    ops_cascade_detail: dict


def _features(h: int, w: int, c: int, seed: int, tag: str) -> np.ndarray:
    return make_rng(seed, "bench", tag, h, w).normal(size=(h, w, c)).astype(DTYPE)


def _timed(fn, repeats: int, counter: OpCounter):
    """Best wall-clock of ``repeats`` runs; the first run also fills ``counter``."""
    best, out = np.inf, None
    for rep in range(max(1, repeats)):
        t0 = time.perf_counter()
        out = fn(counter if rep == 0 else None)
        best = min(best, time.perf_counter() - t0)
    return best, out


def _size_pair(size) -> tuple[int, int]:
    if isinstance(size, (int, np.integer)):
        size = (size, size)
    h, w = int(size[0]), int(size[1])
    if h % 16 or w % 16:
        raise ValueError(f"benchmark size {h}x{w} must be a multiple of 16")
    return h, w


def bench_size(size, k: int = 8, repeats: int = 1, seed: int = 0, c8: int = 192, c16: int = HIGH_CHANNELS,
               theta: float = DEFAULT_THETA, run_global: bool = True) -> BenchRow:
    h, w = _size_pair(size)
    h8, w8, h16, w16 = h // 8, w // 8, h // 16, w // 16
    f8a, f8b = _features(h8, w8, c8, seed, "f8a"), _features(h8, w8, c8, seed, "f8b")
    f16a, f16b = _features(h16, w16, c16, seed, "f16a"), _features(h16, w16, c16, seed, "f16b")

    cc = OpCounter()
    t_c, (m_c, _) = _timed(lambda ctr: cascade_match(f16a, f16b, f8a, f8b, k, theta, ctr), repeats, cc)
    gc = OpCounter()
    if run_global:
        t_g, m_g = _timed(lambda ctr: global_oracle_match(f8a, f8b, theta, ctr), repeats, gc)
    else:
        t_g, m_g = float("nan"), None
    return BenchRow(
        h, w, h8 * w8, h16 * w16, k,
        gc.total, cc.total,
        cc.total / gc.total if gc.total else float("nan"),
        t_g, t_c,
        t_g / t_c if run_global else float("nan"),
        len(m_g) if m_g is not None else -1, len(m_c),
        gc.as_dict(), cc.as_dict(),
    )


def bench_matching(sizes=DEFAULT_SIZES, k: int = 8, repeats: int = 1, seed: int = 0, threads: int | None = 1,
                   **kw) -> list[BenchRow]:
    """Benchmark every size; kernels run single-threaded unless ``threads`` says otherwise."""
    with threadpool_limits(limits=threads):
        return [bench_size(s, k, repeats, seed, **kw) for s in sizes]


def op_ratio_ok(rows: list[BenchRow]) -> bool:
    """The cascade must use < 20% of the global operations at the 1152 size (if benchmarked)."""
    return all(r.op_ratio < OP_RATIO_LIMIT for r in rows if max(r.height, r.width) >= OP_RATIO_SIZE)


# --- output ----------------------------------------------------------------

_COLUMNS = ("height", "width", "n8", "n16", "k", "ops_global", "ops_cascade", "op_ratio",
            "time_global", "time_cascade", "speedup", "matches_global", "matches_cascade")


def _json_row(r: BenchRow) -> dict:
    # NaN (skipped global run) is not valid JSON
    return {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in asdict(r).items()}


def rows_to_json(rows: list[BenchRow]) -> str:
    return json.dumps({"rows": [_json_row(r) for r in rows], "op_ratio_ok": op_ratio_ok(rows)}, indent=1)


def rows_to_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_COLUMNS)
    for r in rows:
        writer.writerow([getattr(r, c) for c in _COLUMNS])
    return buf.getvalue()


def rows_to_gnuplot(rows: list[BenchRow]) -> str:
    """Whitespace table for runtime-vs-resolution plots: ``size t_global t_cascade op_ratio``."""
    lines = ["# size time_global_s time_cascade_s op_ratio"]
    lines += [f"{max(r.height, r.width)} {r.time_global:.6f} {r.time_cascade:.6f} {r.op_ratio:.6f}" for r in rows]
    return "\n".join(lines) + "\n"
