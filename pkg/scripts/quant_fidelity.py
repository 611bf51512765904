"""Float vs int8 top-1 agreement on the small inverted-residual net, across model seeds."""

import argparse

import numpy as np

from edgeemo.fidelity import quantization_fidelity


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--inputs", type=int, default=1000)
    ap.add_argument("--calib", type=int, default=100)
    args = ap.parse_args()
    rows = []
    for seed in range(args.seeds):
        r = quantization_fidelity(model_seed=seed, calib_count=args.calib, test_count=args.inputs)
        rows.append(r)
        print(f"seed {seed:2d}  top-1 {r.top1_agreement:.3f}  MAE {r.mean_abs_prob_error:.5f}")
    agree = np.array([r.top1_agreement for r in rows])
    print(f"agreement mean {agree.mean():.3f}  min {agree.min():.3f}  below 0.95: {int((agree < 0.95).sum())}/{len(rows)}")


if __name__ == "__main__":
    main()
