"""Manifest ingestion, image preprocessing, and classification metrics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .graph import Model
from .mobilenet import EMOTION_LABELS
from .runtime import Executor
from .tensor import F32, Tensor, TensorFormatError, load_rten

SUBSETS = ("A", "B")
SUBSET_TOKENS = {"A": "A", "B": "B", "-": None}


class ManifestError(ValueError):
    pass


class ImageError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    subset: Optional[str]

    @property
    def label_index(self) -> int:
        return EMOTION_LABELS.index(self.label)


def load_manifest(source, base_dir=None) -> list:
    """Parse a ``path,label,subset`` CSV; relative paths resolve against ``base_dir``."""
    try:
        return _parse_manifest(csv.reader(source), base_dir)
    except csv.Error as e:
        raise ManifestError(f"malformed manifest CSV: {e}") from None


def _parse_manifest(reader, base_dir) -> list:
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestError("manifest is empty (missing header)") from None
    if [h.strip() for h in header] != ["path", "label", "subset"]:
        raise ManifestError(f"bad manifest header {header!r}; expected path,label,subset")
    entries = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise ManifestError(f"expected 3 fields at line {lineno}, got {len(row)}")
        path, label, subset = (c.strip() for c in row)
        if label not in EMOTION_LABELS:
            raise ManifestError(f"unknown label '{label}' at line {lineno}")
        if subset not in SUBSET_TOKENS:
            raise ManifestError(f"unknown subset '{subset}' at line {lineno}")
        if base_dir is not None and not Path(path).is_absolute():
            path = str(Path(base_dir) / path)
        entries.append(ManifestEntry(path, label, SUBSET_TOKENS[subset]))
    return entries


def load_manifest_file(path) -> list:
    path = Path(path)
    with open(path, newline="") as fh:
        return load_manifest(fh, base_dir=path.parent)


def write_manifest(entries, sink):
    w = csv.writer(sink, lineterminator="\n")
    w.writerow(["path", "label", "subset"])
    for e in entries:
        w.writerow([e.path, e.label, e.subset or "-"])


# -- images ----------------------------------------------------------------------


def _netpbm_tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, i = [], 2
    while len(tokens) < count:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        if j == i:
            raise ImageError("truncated netpbm header")
        tokens.append(int(data[i:j]))
        i = j
    return tokens, i + 1


def decode_netpbm(data: bytes) -> np.ndarray:
    """Binary PPM (P6) or PGM (P5) with maxval <= 255 -> uint8 HxWxC."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageError(f"unsupported raster format {magic!r}")
    try:
        (w, h, maxval), start = _netpbm_tokens(data, 3)
    except ValueError as e:
        raise ImageError(f"bad netpbm header: {e}") from None
    if w < 1 or h < 1 or not 0 < maxval <= 255:
        raise ImageError("netpbm dimensions must be >= 1 and maxval <= 255")
    channels = 3 if magic == b"P6" else 1
    n = w * h * channels
    payload = data[start : start + n]
    if len(payload) != n:
        raise ImageError("truncated netpbm payload")
    img = np.frombuffer(payload, np.uint8).reshape(h, w, channels)
    if maxval != 255:
        img = np.round(img.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    return img


def encode_netpbm(img: np.ndarray) -> bytes:
    img = np.asarray(img, np.uint8)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    magic = b"P6" if c == 3 else b"P5"
    return magic + f"\n{w} {h}\n255\n".encode() + img.tobytes()


def load_image(path):
    """Decode PPM/PGM to a uint8 raster, or return an RTEN tensor as stored."""
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as e:
        raise ImageError(f"cannot read image {path}: {e.strerror}") from None
    try:
        if data[:4] == b"RTEN":
            t = load_rten(p)
            if t.dtype != F32:
                raise ImageError(f"{path}: RTEN images must be F32")
            return t
        return decode_netpbm(data)
    except (ImageError, TensorFormatError) as e:
        raise ImageError(f"{path}: {e}") from None


def _resize_axis(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of HxWxC to size x size (float64)."""
    img = np.asarray(img, np.float64)
    h, w = img.shape[:2]
    if (h, w) == (size, size):
        return img.copy()
    y0, y1, fy = _resize_axis(h, size)
    x0, x1, fx = _resize_axis(w, size)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def preprocess(image, target: int = 224) -> Tensor:
    """Resize to target x target, grayscale -> 3 channels, map [0, 255] to [-1, 1].

    ``image`` is a uint8-valued raster (HxW, HxWx1 or HxWx3) or an RTEN
    tensor. Rank-4 RTEN tensors are taken as already normalized NHWC input
    (only resized when the size differs); lower-rank ones as pixel rasters.
    """
    if isinstance(image, Tensor):
        if len(image.shape) == 4:
            if image.shape[0] != 1 or image.shape[3] != 3:
                raise ImageError(f"normalized tensors must be 1xHxWx3, got {image.shape}")
            arr = resize_bilinear(image.data[0], target)
            return Tensor(arr[None].astype(np.float32))
        image = image.data
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3) or img.shape[0] < 1 or img.shape[1] < 1:
        raise ImageError(f"unsupported raster shape {img.shape}")
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    arr = resize_bilinear(img, target) / 127.5 - 1.0
    return Tensor(arr[None].astype(np.float32))


# -- metrics ------------------------------------------------------------------------


def confusion_matrix(y_true, y_pred, num_classes: int = len(EMOTION_LABELS)) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), np.int64)
    np.add.at(cm, (np.asarray(y_true, np.int64), np.asarray(y_pred, np.int64)), 1)
    return cm


def per_class_scores(cm) -> tuple:
    """(precision, recall, f1) arrays; 0 wherever a denominator is 0."""
    cm = np.asarray(cm, np.float64)
    tp = np.diag(cm)
    col, row = cm.sum(axis=0), cm.sum(axis=1)
    precision = np.divide(tp, col, out=np.zeros_like(tp), where=col > 0)
    recall = np.divide(tp, row, out=np.zeros_like(tp), where=row > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return precision, recall, f1


def balanced_accuracy(cm) -> float:
    """Mean recall over classes that have at least one true sample."""
    cm = np.asarray(cm)
    row = cm.sum(axis=1)
    if not (row > 0).any():
        raise ValueError("confusion matrix has no samples")
    _, recall, _ = per_class_scores(cm)
    return float(recall[row > 0].mean())


def macro_f1(cm) -> float:
    """Unweighted mean of per-class F1 over every class."""
    cm = np.asarray(cm)
    if cm.sum() == 0:
        raise ValueError("confusion matrix has no samples")
    return float(per_class_scores(cm)[2].mean())


@dataclass
class SubsetMetrics:
    subset: str
    confusion: np.ndarray
    balanced_accuracy: float
    macro_f1: float
    labels: list

    @classmethod
    def from_confusion(cls, subset: str, cm: np.ndarray, labels) -> "SubsetMetrics":
        return cls(subset, cm, balanced_accuracy(cm), macro_f1(cm), list(labels))

    @property
    def count(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        p, r, f = per_class_scores(self.confusion)
        support = self.confusion.sum(axis=1)
        return {
            "subset": self.subset,
            "count": self.count,
            "balanced_accuracy": self.balanced_accuracy,
            "macro_f1": self.macro_f1,
            "per_class": [
                {"label": lab, "precision": float(p[i]), "recall": float(r[i]),
                 "f1": float(f[i]), "support": int(support[i])}
                for i, lab in enumerate(self.labels)
            ],
            "confusion": self.confusion.tolist(),
        }


@dataclass
class MetricsReport:
    full: SubsetMetrics
    A: Optional[SubsetMetrics]
    B: Optional[SubsetMetrics]
    predictions: list

    def subset(self, name: str) -> Optional[SubsetMetrics]:
        return {"full": self.full, "all": self.full, "A": self.A, "B": self.B}[name]

    def to_dict(self) -> dict:
        return {
            "subsets": {
                k: (v.to_dict() if v is not None else None)
                for k, v in (("full", self.full), ("A", self.A), ("B", self.B))
            }
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def confusion_csv(cm, labels=EMOTION_LABELS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(labels)
    for row in np.asarray(cm):
        w.writerow(int(v) for v in row)
    return buf.getvalue()


def predict_label(probs: np.ndarray) -> int:
    """Argmax with ties broken toward the lowest class index."""
    return int(np.argmax(np.asarray(probs).ravel()))


def evaluate(m: Model, entries: list, threads: int = 1) -> MetricsReport:
    """Run the model over every manifest entry; metrics for full/A/B subsets."""
    if not entries:
        raise ValueError("nothing to evaluate: manifest has no entries")
    n_classes = len(EMOTION_LABELS)
    size = m.graph.input_shape[1]
    preds = []
    with Executor(m, threads) as ex:
        for e in entries:
            x = preprocess(load_image(e.path), size)
            probs = ex.run(x).data.ravel()
            if probs.size != n_classes:
                raise ValueError(f"model emits {probs.size} classes, evaluation needs {n_classes}")
            preds.append(predict_label(probs))
    y_true = [e.label_index for e in entries]
    labels = list(EMOTION_LABELS)
    full = SubsetMetrics.from_confusion("full", confusion_matrix(y_true, preds), labels)
    parts = {}
    for s in SUBSETS:
        idx = [i for i, e in enumerate(entries) if e.subset == s]
        parts[s] = (
            SubsetMetrics.from_confusion(
                s, confusion_matrix([y_true[i] for i in idx], [preds[i] for i in idx]), labels
            )
            if idx
            else None
        )
    return MetricsReport(full, parts["A"], parts["B"], preds)
