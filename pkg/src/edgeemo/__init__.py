"""Int8 MobileNetV2-style inference, compression, benchmarking and evaluation on CPU."""

from .graph import (
    GraphSpec,
    Model,
    NodeSpec,
    activation_peak_bytes,
    count_madds,
    count_params,
)
from .mobilenet import EMOTION_LABELS, build_mobilenet_v2, build_small_irnet
from .runtime import Executor, infer, infer_quantized
from .tensor import F32, I8, I32, QuantParams, Tensor

__version__ = "0.1.0"

__all__ = [
    "EMOTION_LABELS",
    "Executor",
    "F32",
    "GraphSpec",
    "I32",
    "I8",
    "Model",
    "NodeSpec",
    "QuantParams",
    "Tensor",
    "activation_peak_bytes",
    "build_mobilenet_v2",
    "build_small_irnet",
    "count_madds",
    "count_params",
    "infer",
    "infer_quantized",
]
