"""Float vs int8 agreement on seeded random inputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compress import calibrate, quantize_model, random_calibration_inputs
from .mobilenet import build_small_irnet
from .runtime import Executor


@dataclass
class FidelityResult:
    model_seed: int
    inputs: int
    top1_agreement: float
    mean_abs_prob_error: float


def quantization_fidelity(
    model_seed: int = 0,
    calib_seed: int = 1000,
    test_seed: int = 2024,
    calib_count: int = 100,
    test_count: int = 1000,
) -> FidelityResult:
    """Quantize a seeded small inverted-residual net and compare it to its float twin.

    The error is the mean over inputs of the mean absolute difference of the
    two probability vectors.
    """
    m = build_small_irnet(seed=model_seed)
    q = quantize_model(m, calibrate(m, random_calibration_inputs(m, calib_count, calib_seed)))
    rng = np.random.default_rng(test_seed)
    agree, err = 0, 0.0
    with Executor(m) as ef, Executor(q) as eq:
        for _ in range(test_count):
            x = rng.uniform(-1.0, 1.0, size=m.graph.input_shape).astype(np.float32)
            a, b = ef.run(x).data.ravel(), eq.run(x).data.ravel()
            agree += int(a.argmax() == b.argmax())
            err += float(np.abs(a.astype(np.float64) - b).mean())
    return FidelityResult(model_seed, test_count, agree / test_count, err / test_count)
