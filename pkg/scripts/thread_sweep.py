"""Latency vs thread count for the reference model (float and compressed int8).

Writes <out>/{float,int8}.csv, .svg and .json.
"""

import argparse
from pathlib import Path

from edgeemo.bench import BenchConfig, emit_bench_csv, host_cores, thread_sweep
from edgeemo.compress import CompressionConfig, optimize_pipeline
from edgeemo.mobilenet import build_mobilenet_v2
from edgeemo.plot import latency_svg


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/thread_sweep")
    ap.add_argument("--max-threads", type=int, default=max(8, host_cores()))
    ap.add_argument("--warmup", type=int, default=10)
    ap.add_argument("--runs", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    ref = build_mobilenet_v2(seed=args.seed)
    opt, _ = optimize_pipeline(ref, CompressionConfig(seed=args.seed))
    cfg = BenchConfig(args.warmup, args.runs, list(range(1, args.max_threads + 1)), seed=args.seed)
    for label, m in (("float", ref), ("int8", opt)):
        rep = thread_sweep(m, cfg, progress=lambda s: print(f"{label} {s.thread_count:2d}T p50 {s.p50_ms:8.2f} ms"))
        (out / f"{label}.csv").write_bytes(emit_bench_csv(rep))
        (out / f"{label}.json").write_text(rep.to_json())
        (out / f"{label}.svg").write_text(latency_svg(rep.stats, f"{label} p50 latency vs CPU threads"))
        print(f"{label}: argmin {rep.argmin_threads} threads on {rep.host_cores} core(s); {'; '.join(rep.notes)}")


if __name__ == "__main__":
    main()
