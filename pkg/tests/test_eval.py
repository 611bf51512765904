import io
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import ba_bruteforce, f1_bruteforce

from edgeemo.evaluate import (
    ImageError,
    ManifestEntry,
    ManifestError,
    balanced_accuracy,
    confusion_csv,
    confusion_matrix,
    decode_netpbm,
    encode_netpbm,
    evaluate,
    load_image,
    load_manifest,
    load_manifest_file,
    macro_f1,
    predict_label,
    preprocess,
)
from edgeemo.mobilenet import EMOTION_LABELS
from edgeemo.synthetic import oracle_stub_model, write_synthetic_manifest
from edgeemo.tensor import Tensor


def test_labels_canonical_order():
    assert EMOTION_LABELS == ["happiness", "sadness", "surprise", "fear", "anger", "disgust", "neutral"]


def test_manifest_examples():
    src = io.StringIO("path,label,subset\nimg1.ppm,happiness,A\nimg3.ppm,fear,-\nimg1.ppm,anger,B\n")
    entries = load_manifest(src)
    assert entries[0] == ManifestEntry("img1.ppm", "happiness", "A")
    assert entries[1].subset is None and entries[2].subset == "B"
    assert load_manifest(io.StringIO("path,label,subset\n")) == []
    with pytest.raises(ManifestError, match="unknown label 'joy' at line 2"):
        load_manifest(io.StringIO("path,label,subset\nimg2.ppm,joy,-\n"))
    with pytest.raises(ManifestError, match="line 3"):
        load_manifest(io.StringIO("path,label,subset\na.ppm,fear,A\nb.ppm,fear,C\n"))
    with pytest.raises(ManifestError, match="header"):
        load_manifest(io.StringIO("file,label,subset\n"))


def test_manifest_relative_paths(tmp_path):
    (tmp_path / "m.csv").write_text("path,label,subset\nsub/a.ppm,fear,A\n")
    assert load_manifest_file(tmp_path / "m.csv")[0].path == str(tmp_path / "sub" / "a.ppm")


def test_preprocess_bounds_and_shape():
    black = np.zeros((10, 13, 3), np.uint8)
    white = np.full((5, 5), 255, np.uint8)
    a, b = preprocess(black), preprocess(white)
    assert a.shape == b.shape == (1, 224, 224, 3)
    assert np.all(a.data == -1.0) and np.all(b.data == 1.0)


def test_preprocess_identity_at_target():
    img = np.random.default_rng(0).integers(0, 256, (224, 224, 3)).astype(np.uint8)
    out = preprocess(img).data[0]
    np.testing.assert_array_equal(out, (img / 127.5 - 1.0).astype(np.float32))


def test_checkerboard_upscale_hand_values():
    img = np.array([[0, 255], [255, 0]], np.uint8)
    raw = np.array(
        [[0, 63.75, 191.25, 255],
         [63.75, 95.625, 159.375, 191.25],
         [191.25, 159.375, 95.625, 63.75],
         [255, 191.25, 63.75, 0]]
    )
    out = preprocess(decode_netpbm(encode_netpbm(img)), 4).data[0]
    for c in range(3):
        np.testing.assert_allclose(out[:, :, c], raw / 127.5 - 1.0, atol=1e-6)


@given(st.integers(1, 40), st.integers(1, 40), st.sampled_from([1, 3]), st.integers(0, 999))
def test_preprocess_range_property(h, w, c, seed):
    img = np.random.default_rng(seed).integers(0, 256, (h, w, c)).astype(np.uint8)
    out = preprocess(img, 224).data
    assert out.shape == (1, 224, 224, 3)
    assert out.min() >= -1.0 and out.max() <= 1.0


def test_netpbm_decoding(tmp_path):
    ppm = b"P6\n# comment\n2 1\n255\n" + bytes([1, 2, 3, 4, 5, 6])
    assert decode_netpbm(ppm).tolist() == [[[1, 2, 3], [4, 5, 6]]]
    pgm = b"P5 2 2 15\n" + bytes([0, 15, 5, 10])
    assert decode_netpbm(pgm)[:, :, 0].tolist() == [[0, 255], [85, 170]]
    for bad in (b"P3\n1 1\n255\n0 0 0", b"P6\n2 2\n255\n\x00", b"P6\n0 1\n255\n", b"P5\n1 1\n999\n\x00"):
        with pytest.raises(ImageError):
            decode_netpbm(bad)
    (tmp_path / "x.ppm").write_bytes(b"GIF89a")
    with pytest.raises(ImageError, match="x.ppm"):
        load_image(tmp_path / "x.ppm")
    with pytest.raises(ImageError, match="missing.pgm"):
        load_image(tmp_path / "missing.pgm")


def test_rten_rank4_passthrough():
    t = Tensor(np.full((1, 8, 8, 3), 0.25, np.float32))
    assert np.all(preprocess(t, 8).data == 0.25)
    with pytest.raises(ImageError):
        preprocess(Tensor(np.zeros((1, 8, 8, 2), np.float32)), 8)


# -- metrics --------------------------------------------------------------------


def test_metric_hand_cases():
    cm = np.array([[8, 2], [4, 6]])
    assert balanced_accuracy(cm) == pytest.approx(0.7, abs=1e-12)
    assert macro_f1(cm) == pytest.approx(0.69697, abs=1e-5)
    assert balanced_accuracy(np.array([[5, 5], [5, 5]])) == 0.5
    assert balanced_accuracy(np.eye(7, dtype=int) * 3) == 1.0
    assert macro_f1(np.eye(7, dtype=int)) == 1.0
    assert macro_f1(np.array([[0, 10], [10, 0]])) == 0.0


def test_metrics_match_bruteforce_1000_matrices():
    r = np.random.default_rng(7)
    for _ in range(1000):
        cm = r.integers(0, 20, (7, 7))
        cm[r.random((7, 7)) < 0.3] = 0
        if cm.sum(axis=1).max() == 0:
            cm[0, 0] = 1
        lists = cm.tolist()
        assert abs(balanced_accuracy(cm) - ba_bruteforce(lists)) <= 1e-12
        assert abs(macro_f1(cm) - f1_bruteforce(lists)) <= 1e-12


@given(st.lists(st.integers(0, 15), min_size=49, max_size=49), st.permutations(range(7)))
def test_metric_permutation_equivariance(counts, perm):
    cm = np.array(counts).reshape(7, 7)
    if cm.sum(axis=1).max() == 0:
        return
    p = np.array(perm)
    pm = cm[np.ix_(p, p)]
    assert balanced_accuracy(pm) == pytest.approx(balanced_accuracy(cm), abs=1e-12)
    assert macro_f1(pm) == pytest.approx(macro_f1(cm), abs=1e-12)


def test_argmax_ties_lowest():
    assert predict_label(np.array([0.2, 0.4, 0.4])) == 1


def test_confusion_csv_format():
    cm = confusion_matrix([0, 1, 6], [0, 2, 6])
    lines = confusion_csv(cm).splitlines()
    assert lines[0].split(",") == EMOTION_LABELS
    assert len(lines) == 8 and all(len(L.split(",")) == 7 for L in lines[1:])
    assert lines[2] == "0,0,1,0,0,0,0"


# -- evaluate ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    return load_manifest_file(write_synthetic_manifest(d, 14, size=32, seed=1))


def test_evaluate_oracle_stub(synth):
    rep = evaluate(oracle_stub_model(32), synth, threads=2)
    assert rep.full.balanced_accuracy == 1.0 and rep.full.macro_f1 == 1.0
    assert rep.A.count + rep.B.count + sum(e.subset is None for e in synth) == rep.full.count == 14
    d = json.loads(rep.to_json())
    for key in ("full", "A", "B"):
        s = d["subsets"][key]
        assert {"balanced_accuracy", "macro_f1", "per_class", "subset"} <= set(s)
        assert len(s["per_class"]) == 7


def test_evaluate_constant_model(synth):
    m = oracle_stub_model(32)
    w = m.graph.weights
    w["fc.weight"] = Tensor(np.zeros((7, 3), np.float32))
    w["fc.bias"] = Tensor(np.eye(7, dtype=np.float32)[3])
    rep = evaluate(m, synth)
    assert rep.full.balanced_accuracy == pytest.approx(1 / 7)
    assert rep.full.confusion[:, 3].sum() == 14


def test_evaluate_thread_determinism(synth):
    from edgeemo.mobilenet import build_small_irnet

    m = build_small_irnet(seed=2)
    reps = [evaluate(m, synth, t).to_json() for t in (1, 3)]
    assert reps[0] == reps[1]


def test_evaluate_missing_image_names_path(tmp_path):
    entries = [ManifestEntry(str(tmp_path / "gone.rten"), "fear", None)]
    with pytest.raises(ImageError, match="gone.rten"):
        evaluate(oracle_stub_model(32), entries)


def test_empty_subsets_reported_as_none(synth):
    only_a = [e for e in synth if e.subset == "A"]
    rep = evaluate(oracle_stub_model(32), only_a)
    assert rep.B is None and rep.A.count == len(only_a)
