"""Throughput benchmark: serial versus batched pathway decoding."""

from __future__ import annotations

import statistics
import time

import numpy as np

from .engine import adagraph_generate, build_hierarchy, hardware_threads, serial_generate
from .mesh import PointCloudSet
from .model import LaneModel


class BenchmarkMismatch(RuntimeError):
    """Decoded tokens differ between modes; no speed is reported."""


def _stats(decode_s: list[float], L: int) -> dict:
    med = statistics.median(decode_s)
    return {"median_decode_s": med, "decode_tok_per_s": L / med, "runs_s": decode_s}


def throughput_bench(model: LaneModel, pcs: PointCloudSet, L: int, batch_limits: list[int] | None = None,
                     repeats: int = 5, warmup: int = 2, threads: int | None = None) -> dict:
    """Median decode throughput per mode and batch limit, over ``repeats`` timed runs.

    The hierarchy is rebuilt and timed every run (its cost is reported
    separately since both modes share it); decoding then runs serially and
    with each batch limit.  Every timed run must reproduce the serial
    tokens exactly, otherwise :class:`BenchmarkMismatch` is raised.
    Speedup is the ratio of median decode times.
    """
    if warmup < 2:
        raise ValueError("at least 2 warmup runs are required")
    hw = hardware_threads() if threads is None else threads
    if batch_limits is None:
        batch_limits = sorted({1, hw})
    serial_t: list[float] = []
    ada_t: dict[int, list[float]] = {b: [] for b in batch_limits}
    hier_t: list[float] = []
    reference = None
    for rep in range(warmup + repeats):
        h, th = build_hierarchy(model, pcs, L)
        s = serial_generate(model, h, L)
        if reference is None:
            reference = s.raw
        elif not np.array_equal(s.raw, reference):
            raise BenchmarkMismatch("serial decoding is not deterministic")
        timed = rep >= warmup
        if timed:
            hier_t.append(th)
            serial_t.append(s.timing["decode_s"])
        for b in batch_limits:
            t0 = time.perf_counter()
            a = adagraph_generate(model, h, L, batch_limit=b, threads=min(hw, b))
            if not np.array_equal(a.raw, reference):
                raise BenchmarkMismatch(f"batch_limit={b}: tokens differ from serial decoding")
            if timed:
                ada_t[b].append(a.timing["decode_s"])
    serial = _stats(serial_t, L)
    report = {
        "L": L,
        "M": int(reference.shape[0]),
        "threads": hw,
        "repeats": repeats,
        "warmup": warmup,
        "hierarchy_median_s": statistics.median(hier_t),
        "tokens_identical": True,
        "serial": serial,
        "adagraph": {},
    }
    for b in batch_limits:
        st = _stats(ada_t[b], L)
        st["speedup"] = serial["median_decode_s"] / st["median_decode_s"]
        report["adagraph"][str(b)] = st
    return report
