import json
import re
import time

import numpy as np
import pytest
from helpers import make_model
from hypothesis import given
from hypothesis import strategies as st
from oracles import nearest_rank

from edgeemo import bench
from edgeemo.bench import (
    CSV_HEADER,
    BenchConfig,
    BenchCsvError,
    DeterminismError,
    LatencyStats,
    bench_inputs,
    emit_bench_csv,
    parse_bench_csv,
    percentile,
    run_bench,
    thread_sweep,
    time_runs,
)
from edgeemo.plot import latency_svg, plot_csv
from edgeemo.tensor import Tensor


def test_stats_examples():
    s = LatencyStats.from_samples(1, [30, 10, 20])
    assert (s.mean_ms, s.p50_ms, s.min_ms, s.max_ms) == (20, 20, 10, 30)
    assert percentile(list(range(1, 11)), 90) == 9
    assert percentile(list(range(1, 11)), 50) == 5
    assert percentile([4.0], 99) == 4.0


@given(st.lists(st.floats(0, 1e4), min_size=1, max_size=300))
def test_stats_invariants(samples):
    s = LatencyStats.from_samples(2, samples)
    assert s.min_ms <= s.p50_ms <= s.p90_ms <= s.p99_ms <= s.max_ms
    assert s.std_ms >= 0
    for p in (50, 90, 99):
        assert percentile(sorted(samples), p) == nearest_rank(samples, p)


def test_warmup_slow_first_run_ignored():
    class SlowFirst:
        calls = 0

        def run(self, x):
            SlowFirst.calls += 1
            if SlowFirst.calls == 1:
                time.sleep(0.05)

    samples = time_runs(SlowFirst(), [None], warmup=1, measured=10)
    assert SlowFirst.calls == 11
    assert max(samples) < 25.0


def _noop_model():
    return make_model((1, 1, 1, 1), [("r", "ReLU6", ["input"], {})], "r", {})


def test_noop_graph_sanity_floor():
    s = run_bench(_noop_model(), BenchConfig(warmup_runs=5, measured_runs=50, thread_counts=[1]), 1)
    assert s.runs == 50 and s.p50_ms < 1.0


def test_seeded_inputs_reproducible(small_model):
    cfg = BenchConfig(seed=9, thread_counts=[1])
    a, b = bench_inputs(small_model, cfg, 3), bench_inputs(small_model, cfg, 3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    c = bench_inputs(small_model, BenchConfig(seed=10, thread_counts=[1]), 3)
    assert not np.array_equal(a[0], c[0])


def test_config_validation():
    for bad in (dict(measured_runs=0), dict(warmup_runs=-1), dict(thread_counts=[]),
                dict(thread_counts=[2, 1]), dict(thread_counts=[1, 1]), dict(thread_counts=[0, 1]),
                dict(input_source="camera"), dict(input_source="manifest")):
        with pytest.raises(ValueError):
            BenchConfig(**bad)
    assert BenchConfig().thread_counts == list(range(1, bench.host_cores() + 1))


def test_singleton_sweep_and_csv(small_model):
    rep = thread_sweep(small_model, BenchConfig(warmup_runs=1, measured_runs=3, thread_counts=[1]))
    assert rep.argmin_threads == 1 and len(rep.stats) == 1
    text = emit_bench_csv(rep).decode()
    lines = text.splitlines()
    assert len(lines) == 2 and lines[0] == ",".join(CSV_HEADER)
    assert re.fullmatch(r"1,3(,\d+\.\d{3}){7}", lines[1])
    d = json.loads(rep.to_json())
    assert set(CSV_HEADER[2:]) <= set(d["stats"][0])
    assert d["params"] == 49_311 and d["host_cores"] >= 1 and d["context_ms"] == 45.61


def test_sweep_multi_and_roundtrip(small_model):
    rep = thread_sweep(small_model, BenchConfig(warmup_runs=1, measured_runs=4, thread_counts=[1, 2, 3]))
    assert [s.thread_count for s in rep.stats] == [1, 2, 3]
    back = parse_bench_csv(emit_bench_csv(rep).decode())
    for a, b in zip(rep.stats, back):
        for col in CSV_HEADER[2:]:
            assert getattr(b, col) == pytest.approx(getattr(a, col), abs=5e-4)
    assert rep.argmin_threads == min(rep.stats, key=lambda s: s.p50_ms).thread_count


def test_determinism_gate(small_model, monkeypatch):
    real_run = bench.Executor.run

    def flaky(self, x):
        out = real_run(self, x)
        if self.thread_count == 2:
            return Tensor(out.data + np.float32(1e-3))
        return out

    monkeypatch.setattr(bench.Executor, "run", flaky)
    with pytest.raises(DeterminismError):
        thread_sweep(small_model, BenchConfig(warmup_runs=0, measured_runs=1, thread_counts=[1, 2]))


def test_csv_parse_errors():
    good = ",".join(CSV_HEADER) + "\n1,3,1.000,0.000,1.000,1.000,1.000,1.000,1.000\n"
    assert parse_bench_csv(good)[0].p50_ms == 1.0
    for bad in ("", "a,b\n", ",".join(CSV_HEADER) + "\n", good + "2,3,x,0,0,0,0,0,0\n", good + "2,3\n"):
        with pytest.raises(BenchCsvError):
            parse_bench_csv(bad)


# -- plot -------------------------------------------------------------------------


def _csv(rows):
    out = ",".join(CSV_HEADER) + "\n"
    for t, p50 in rows:
        out += f"{t},5,{p50:.3f},0.100,{p50:.3f},{p50:.3f},{p50:.3f},{p50:.3f},{p50:.3f}\n"
    return out


def test_plot_single_row():
    svg = plot_csv(_csv([(1, 12.5)]))
    assert svg.startswith("<svg") and svg.count('class="min"') == 1
    assert len(re.search(r'points="([^"]*)"', svg).group(1).split()) == 1


@given(st.lists(st.floats(0.01, 500), min_size=1, max_size=12))
def test_plot_points_and_determinism(p50s):
    text = _csv([(i + 1, v) for i, v in enumerate(p50s)])
    a, b = plot_csv(text), plot_csv(text)
    assert a == b
    pts = re.search(r'points="([^"]*)"', a).group(1).split()
    assert len(pts) == len(p50s)
    assert "CPU threads" in a and "p50 latency (ms)" in a
    # the marked minimum sits on the lowest p50 row
    parsed = [round(v, 3) for v in p50s]
    best = min(range(len(parsed)), key=lambda i: (parsed[i], i))
    m = re.search(r'class="min" cx="([\d.]+)" cy="([\d.]+)"', a)
    assert f"{m.group(1)},{m.group(2)}" == pts[best]


def test_plot_rejects_empty():
    with pytest.raises(ValueError):
        latency_svg([])


def test_paired_bench_alternates(small_model):
    from edgeemo.bench import paired_bench

    cfg = BenchConfig(warmup_runs=1, measured_runs=4, thread_counts=[1])
    r = paired_bench({"a": small_model, "b": small_model}, cfg, 1)
    assert set(r) == {"a", "b"}
    assert all(s.runs == 4 and s.thread_count == 1 for s in r.values())
    with pytest.raises(ValueError):
        paired_bench({"a": small_model}, cfg, 0)
