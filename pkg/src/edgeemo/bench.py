"""Latency harness: warmup-then-measure runs and thread-count sweeps."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import emdl
from .graph import (
    GRAPH_INPUT,
    Model,
    activation_peak_bytes,
    count_madds,
    count_params,
    infer_shapes,
)
from .runtime import Executor

CSV_HEADER = ["threads", "runs", "mean_ms", "std_ms", "min_ms", "p50_ms", "p90_ms", "p99_ms", "max_ms"]
# Published per-inference latency of the optimized reference model on the
# original phone; kept as context only.
REFERENCE_CONTEXT_MS = 45.61


class DeterminismError(RuntimeError):
    """Outputs differed across thread counts."""


def host_cores() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover
        return os.cpu_count() or 1


@dataclass
class BenchConfig:
    warmup_runs: int = 10
    measured_runs: int = 50
    thread_counts: Optional[list] = None
    input_source: str = "random"
    manifest: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        if self.thread_counts is None:
            self.thread_counts = list(range(1, host_cores() + 1))
        self.thread_counts = [int(t) for t in self.thread_counts]
        if self.warmup_runs < 0:
            raise ValueError("warmup_runs must be >= 0")
        if self.measured_runs < 1:
            raise ValueError("measured_runs must be >= 1")
        if not self.thread_counts:
            raise ValueError("thread_counts must be non-empty")
        if self.thread_counts[0] < 1 or any(
            b <= a for a, b in zip(self.thread_counts, self.thread_counts[1:])
        ):
            raise ValueError("thread_counts must be positive and strictly increasing")
        if self.input_source not in ("random", "manifest"):
            raise ValueError(f"unknown input_source {self.input_source!r}")
        if self.input_source == "manifest" and not self.manifest:
            raise ValueError("input_source 'manifest' needs a manifest path")


def percentile(sorted_samples, pct: int) -> float:
    """Nearest-rank percentile: the ceil(pct*n/100)-th smallest value."""
    n = len(sorted_samples)
    if n == 0:
        raise ValueError("no samples")
    if not 0 < pct <= 100:
        raise ValueError("pct must be in (0, 100]")
    rank = -(-int(pct) * n // 100)  # exact integer ceil
    return float(sorted_samples[rank - 1])


@dataclass
class LatencyStats:
    thread_count: int
    runs: int
    mean_ms: float
    std_ms: float
    min_ms: float
    max_ms: float
    p50_ms: float
    p90_ms: float
    p99_ms: float

    @classmethod
    def from_samples(cls, thread_count: int, samples_ms) -> "LatencyStats":
        s = sorted(float(v) for v in samples_ms)
        arr = np.asarray(s, np.float64)
        return cls(
            thread_count=int(thread_count),
            runs=len(s),
            mean_ms=float(arr.mean()),
            std_ms=float(arr.std()),
            min_ms=s[0],
            max_ms=s[-1],
            p50_ms=percentile(s, 50),
            p90_ms=percentile(s, 90),
            p99_ms=percentile(s, 99),
        )

    def csv_row(self) -> list:
        return [str(self.thread_count), str(self.runs)] + [
            f"{getattr(self, c):.3f}" for c in CSV_HEADER[2:]
        ]


@dataclass
class BenchReport:
    model_name: str
    params: int
    madds: int
    encoded_bytes: int
    activation_peak_bytes: int
    stats: list
    host_cores: int
    warmup_runs: int
    measured_runs: int
    context_ms: float = REFERENCE_CONTEXT_MS
    notes: list = field(default_factory=list)

    @property
    def argmin_threads(self) -> int:
        best = min(self.stats, key=lambda s: (s.p50_ms, s.thread_count))
        return best.thread_count

    def to_dict(self) -> dict:
        d = asdict(self)
        d["argmin_threads"] = self.argmin_threads
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def bench_inputs(m: Model, cfg: BenchConfig, count: int) -> list:
    """Inputs cycled through the timed runs: seeded noise or manifest images."""
    shape = infer_shapes(m.graph)[GRAPH_INPUT]
    if cfg.input_source == "manifest":
        from .evaluate import load_image, load_manifest_file, preprocess

        entries = load_manifest_file(cfg.manifest)
        if not entries:
            raise ValueError("bench manifest is empty")
        return [preprocess(load_image(e.path), shape[1]).data for e in entries[:count]]
    rng = np.random.default_rng(cfg.seed)
    return [rng.uniform(-1.0, 1.0, size=shape).astype(np.float32) for _ in range(count)]


def time_runs(ex: Executor, inputs: list, warmup: int, measured: int, clock=time.perf_counter):
    """Warmup runs (discarded) then ``measured`` timed runs; returns ms samples."""
    n = len(inputs)
    for i in range(warmup):
        ex.run(inputs[i % n])
    samples = []
    for i in range(measured):
        x = inputs[i % n]
        t0 = clock()
        ex.run(x)
        samples.append((clock() - t0) * 1e3)
    return samples


def paired_bench(models: dict, cfg: BenchConfig, threads: int) -> dict:
    """Latency of several models at one thread count, timed in alternation.

    Each measured round runs every model once on the same input, so slow
    phases of a noisy host land on all of them alike. Models must share the
    input shape.
    """
    if threads < 1:
        raise ValueError("threads must be >= 1")
    names = list(models)
    first = models[names[0]]
    inputs = bench_inputs(first, cfg, 8)
    exs = {k: Executor(models[k], threads) for k in names}
    try:
        for i in range(cfg.warmup_runs):
            for k in names:
                exs[k].run(inputs[i % len(inputs)])
        samples = {k: [] for k in names}
        for i in range(cfg.measured_runs):
            x = inputs[i % len(inputs)]
            for k in names:
                t0 = time.perf_counter()
                exs[k].run(x)
                samples[k].append((time.perf_counter() - t0) * 1e3)
    finally:
        for ex in exs.values():
            ex.close()
    return {k: LatencyStats.from_samples(threads, v) for k, v in samples.items()}


def run_bench(m: Model, cfg: BenchConfig, threads: int, inputs: Optional[list] = None) -> LatencyStats:
    if threads < 1:
        raise ValueError("threads must be >= 1")
    if inputs is None:
        inputs = bench_inputs(m, cfg, 8)
    with Executor(m, threads) as ex:
        samples = time_runs(ex, inputs, cfg.warmup_runs, cfg.measured_runs)
    return LatencyStats.from_samples(threads, samples)


def thread_sweep(m: Model, cfg: BenchConfig, progress=None) -> BenchReport:
    """run_bench per thread count, gated on bitwise-identical outputs."""
    inputs = bench_inputs(m, cfg, 8)
    reference = None
    stats = []
    for t in cfg.thread_counts:
        with Executor(m, t) as ex:
            outs = [ex.run(x).data.tobytes() for x in inputs[:2]]
            if reference is None:
                reference = outs
            elif outs != reference:
                raise DeterminismError(f"outputs at {t} threads differ from {cfg.thread_counts[0]} threads")
            samples = time_runs(ex, inputs, cfg.warmup_runs, cfg.measured_runs)
        s = LatencyStats.from_samples(t, samples)
        stats.append(s)
        if progress is not None:
            progress(s)
    cores = host_cores()
    notes = []
    if max(cfg.thread_counts) > cores:
        notes.append(f"thread counts above {cores} host cores are oversubscribed")
    return BenchReport(
        model_name=m.name,
        params=count_params(m.graph),
        madds=count_madds(m.graph),
        encoded_bytes=emdl.encoded_size(m)["total"],
        activation_peak_bytes=activation_peak_bytes(m),
        stats=stats,
        host_cores=cores,
        warmup_runs=cfg.warmup_runs,
        measured_runs=cfg.measured_runs,
        notes=notes,
    )


def emit_bench_csv(r: BenchReport, sink=None) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for s in r.stats:
        w.writerow(s.csv_row())
    data = buf.getvalue().encode()
    if sink is not None:
        sink.write(data)
    return data


class BenchCsvError(ValueError):
    pass


def parse_bench_csv(text: str) -> list:
    """Parse bench CSV text back into LatencyStats rows."""
    try:
        rows = list(csv.reader(io.StringIO(text)))
    except csv.Error as e:
        raise BenchCsvError(f"malformed CSV: {e}") from None
    if not rows or rows[0] != CSV_HEADER:
        raise BenchCsvError(f"bench CSV header must be {','.join(CSV_HEADER)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(CSV_HEADER):
            raise BenchCsvError(f"line {lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
        try:
            threads, runs = int(row[0]), int(row[1])
            vals = dict(zip(CSV_HEADER[2:], (float(v) for v in row[2:])))
        except ValueError:
            raise BenchCsvError(f"line {lineno}: non-numeric field") from None
        if threads < 1 or runs < 1 or not all(math.isfinite(v) and v >= 0 for v in vals.values()):
            raise BenchCsvError(f"line {lineno}: values out of range")
        out.append(LatencyStats(thread_count=threads, runs=runs, **vals))
    if not out:
        raise BenchCsvError("bench CSV has no data rows")
    return out
