"""Cost model and wall-clock scaling of dense vs. local attention.

MACs counted here cover only the affinity products (logits and value
aggregation), not the 1x1 projections:

    nonlocal    2 * c' * N^2
    crisscross  2 * c' * N * (h + w - 1)   (closed form only)
    ldv2        2 * c' * N * k^2

with ``N = h * w``.
"""
from __future__ import annotations

import csv
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from typing import Iterable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .ga_heads import dense_attention
from .ld_modules import local_attention
from .nn_ops import count_macs

MODEL_METHODS = ("nonlocal", "crisscross", "ldv2")
TIMED_METHODS = ("nonlocal", "ldv2")
CSV_FIELDS = ("method", "h", "w", "c_reduced", "k", "r", "mac_count", "wall_ns")


def flop_model(method: str, h: int, w: int, c_reduced: int, k: int = 5) -> int:
    if min(h, w, c_reduced, k) < 1:
        raise ValueError("dimensions must be positive")
    n = h * w
    if method == "nonlocal":
        return 2 * c_reduced * n * n
    if method == "crisscross":
        return 2 * c_reduced * n * (h + w - 1)
    if method == "ldv2":
        return 2 * c_reduced * n * k * k
    raise ValueError(f"unknown method {method!r}; expected one of {MODEL_METHODS}")


@dataclass(frozen=True)
class BenchConfig:
    c_reduced: int = 16
    k: int = 5
    r: int = 1
    seed: int = 42
    repeats: int = 5
    warmup: int = 2
    # keep sampling past ``repeats`` until this much time per size is spent
    # (split over ``blocks`` passes), so cheap sizes get a stable median too
    min_time_ns: int = 200_000_000
    max_repeats: int = 2000
    blocks: int = 4
    memory_ceiling_bytes: int = 1 << 30


@dataclass
class BenchRecord:
    method: str
    h: int
    w: int
    c_reduced: int
    k: int
    r: int
    mac_count: int
    wall_ns: int
    timestamp: str

    @property
    def n_positions(self) -> int:
        return self.h * self.w


@dataclass
class ScalingFit:
    exponent: float
    coefficient: float
    r_squared: float


def _peak_bytes(method: str, h: int, w: int, cfg: BenchConfig) -> int:
    n = h * w
    if method == "nonlocal":
        return 8 * (3 * n * n + 4 * cfg.c_reduced * n)  # logits, exp, affinity
    return 8 * (3 * cfg.k * cfg.k * n * (cfg.c_reduced + 1) + 4 * cfg.c_reduced * n)


def _kernel(method: str, h: int, w: int, cfg: BenchConfig):
    rng = np.random.default_rng([cfg.seed, h, w])
    q, key, value = (rng.standard_normal((1, cfg.c_reduced, h, w)) for _ in range(3))
    if method == "nonlocal":
        return lambda: dense_attention(q, key, value)
    return lambda: local_attention(q, key, value, cfg.k, cfg.r)


def _blocked_times(runs, cfg: BenchConfig) -> list[list[int]]:
    """Warm samples per kernel, taken in ``cfg.blocks`` passes over all kernels.

    Each block re-warms its kernel and times back-to-back calls.  Spreading
    the blocks over the sweep means a slow spell on a shared core taints one
    block of every size rather than every sample of one size.
    """
    times = [[] for _ in runs]
    per_block_ns = cfg.min_time_ns / cfg.blocks
    per_block_cap = max(1, cfg.max_repeats // cfg.blocks)
    for block in range(cfg.blocks):
        for run, samples in zip(runs, times):
            for _ in range(cfg.warmup):
                run()
            spent = 0
            count = 0
            # the last block tops up to ``repeats`` samples
            while (spent < per_block_ns and count < per_block_cap) or (
                    block == cfg.blocks - 1 and len(samples) < cfg.repeats):
                t0 = time.perf_counter_ns()
                run()
                dt = time.perf_counter_ns() - t0
                samples.append(dt)
                spent += dt
                count += 1
    return times


def run_sweep(methods: Sequence[str], sizes: Sequence[tuple[int, int]], cfg: BenchConfig = BenchConfig()) -> list[BenchRecord]:
    """One record per method and size: MAC readout plus median wall time."""
    sizes = [(int(h), int(w)) for h, w in sizes]
    if sizes != sorted(sizes, key=lambda s: s[0] * s[1]):
        raise ValueError("sizes must be sorted ascending")
    for m in methods:
        if m not in TIMED_METHODS:
            raise ValueError(f"cannot time {m!r}; timed methods are {TIMED_METHODS}")
    for m in methods:
        for h, w in sizes:
            need = _peak_bytes(m, h, w, cfg)
            if need > cfg.memory_ceiling_bytes:
                raise MemoryError(f"{m} at {h}x{w} needs ~{need} bytes, over the {cfg.memory_ceiling_bytes} ceiling")
    if cfg.repeats < 5:
        raise ValueError("need at least 5 timed repeats")
    if cfg.blocks < 1:
        raise ValueError("need at least one timing block")

    records = []
    with threadpool_limits(limits=1):
        for m in methods:
            runs, macs = [], []
            for h, w in sizes:
                run = _kernel(m, h, w, cfg)
                with count_macs() as counter:
                    run()
                runs.append(run)
                macs.append(counter.count)
            times = _blocked_times(runs, cfg)
            for (h, w), count, samples in zip(sizes, macs, times):
                records.append(BenchRecord(
                    method=m, h=h, w=w, c_reduced=cfg.c_reduced, k=cfg.k, r=cfg.r,
                    mac_count=count, wall_ns=int(statistics.median(samples)),
                    timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"),
                ))
    return records


def fit_exponent(records: Iterable[BenchRecord]) -> ScalingFit:
    """Least-squares fit of ``ln t = ln a + b ln N``."""
    records = list(records)
    if len({r.method for r in records}) > 1:
        raise ValueError("records mix several methods")
    n = np.array([r.n_positions for r in records], dtype=np.float64)
    t = np.array([r.wall_ns for r in records], dtype=np.float64)
    if len(records) < 4:
        raise ValueError(f"need at least 4 records, got {len(records)}")
    if len(np.unique(n)) != len(n):
        raise ValueError("records must have distinct position counts")
    if np.any(t <= 0):
        raise ValueError("wall times must be positive")
    x, y = np.log(n), np.log(t)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    total = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - float(np.sum(resid ** 2) / total) if total > 0 else 1.0
    return ScalingFit(exponent=float(slope), coefficient=float(math.exp(intercept)), r_squared=r2)


def summarize(records: Sequence[BenchRecord]) -> dict:
    by_method: dict[str, list[BenchRecord]] = {}
    for r in records:
        by_method.setdefault(r.method, []).append(r)
    out = {}
    for method, recs in by_method.items():
        entry = {"sizes": [[r.h, r.w] for r in recs], "mac_count": [r.mac_count for r in recs]}
        if len({r.n_positions for r in recs}) >= 4:
            entry["fit"] = asdict(fit_exponent(recs))
        out[method] = entry
    return out


def write_csv(records: Sequence[BenchRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for r in records:
            writer.writerow([getattr(r, f) for f in CSV_FIELDS])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_summary(records: Sequence[BenchRecord], path, **extra) -> dict:
    doc = {**extra, "methods": summarize(records)}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return doc


def param_count(params) -> int:
    return int(sum(np.asarray(v).size for v in params.values()))
