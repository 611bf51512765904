"""Paired float vs compressed-int8 latency of the reference model at each thread count."""

import argparse

from edgeemo.bench import BenchConfig, host_cores, paired_bench
from edgeemo.compress import CompressionConfig, optimize_pipeline
from edgeemo.mobilenet import build_mobilenet_v2


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--threads", type=int, nargs="+", default=list(range(1, host_cores() + 1)))
    ap.add_argument("--runs", type=int, default=50)
    args = ap.parse_args()
    ref = build_mobilenet_v2(seed=0)
    opt, rep = optimize_pipeline(ref, CompressionConfig())
    print(f"compression ratio {rep.ratio:.2f}x")
    cfg = BenchConfig(warmup_runs=10, measured_runs=args.runs, thread_counts=args.threads)
    for t in args.threads:
        r = paired_bench({"float": ref, "int8": opt}, cfg, t)
        f, q = r["float"].p50_ms, r["int8"].p50_ms
        print(f"{t:2d} threads  float p50 {f:7.2f} ms  int8 p50 {q:7.2f} ms  speedup {f / q:.2f}x")


if __name__ == "__main__":
    main()
