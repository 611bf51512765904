"""Encoded size and float-agreement across sparsity / cluster-count settings.

Runs on the reference MobileNetV2 by default; --width and --size shrink it
for quick runs. Agreement is top-1 match against the uncompressed float model
on seeded random inputs.
"""

import argparse
import itertools

import numpy as np

from edgeemo.compress import CompressionConfig, optimize_pipeline
from edgeemo.mobilenet import build_mobilenet_v2
from edgeemo.runtime import Executor


def agreement(a, b, inputs):
    with Executor(a) as ea, Executor(b) as eb:
        pa = [ea.run(x).data.ravel() for x in inputs]
        pb = [eb.run(x).data.ravel() for x in inputs]
    top1 = np.mean([x.argmax() == y.argmax() for x, y in zip(pa, pb)])
    mae = np.mean([np.abs(x - y).mean() for x, y in zip(pa, pb)])
    return float(top1), float(mae)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--width", type=float, default=1.0)
    ap.add_argument("--size", type=int, default=224)
    ap.add_argument("--inputs", type=int, default=50)
    ap.add_argument("--sparsity", type=float, nargs="+", default=[0.0, 0.25, 0.5, 0.75])
    ap.add_argument("--clusters", type=int, nargs="+", default=[8, 16, 32])
    args = ap.parse_args()

    ref = build_mobilenet_v2(args.width, 7, args.size, seed=0)
    rng = np.random.default_rng(2024)
    inputs = [rng.uniform(-1, 1, ref.graph.input_shape).astype(np.float32) for _ in range(args.inputs)]
    print(f"{'sparsity':>8} {'k':>4} {'quant':>5} {'ratio':>7} {'top1':>6} {'mae':>8}")
    grid = [(s, None, False) for s in args.sparsity]
    grid += [(s, k, q) for s, k, q in itertools.product(args.sparsity, args.clusters, (False, True))]
    for s, k, q in grid:
        m, rep = optimize_pipeline(ref, CompressionConfig(sparsity=s, clusters=k, quantize=q, calibration_random=20))
        top1, mae = agreement(ref, m, inputs)
        print(f"{s:8.2f} {k or '-':>4} {'yes' if q else 'no':>5} {rep.ratio:6.2f}x {top1:6.3f} {mae:8.5f}")


if __name__ == "__main__":
    main()
