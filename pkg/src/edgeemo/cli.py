"""``edgeemo`` command line: inspect, compress, bench, eval, plot, convert, make-mobilenetv2.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import emdl
from .bench import (
    BenchConfig,
    BenchCsvError,
    DeterminismError,
    emit_bench_csv,
    host_cores,
    thread_sweep,
)
from .compress import CompressionConfig, optimize_pipeline
from .evaluate import (
    ImageError,
    ManifestError,
    confusion_csv,
    evaluate,
    load_manifest_file,
)
from .graph import PARAM_KINDS, GraphError, count_madds, count_params, infer_shapes
from .mobilenet import build_mobilenet_v2
from .plot import plot_csv
from .tensor import TensorFormatError

EXIT_USAGE = 1
EXIT_DATA = 2
DATA_ERRORS = (
    emdl.EmdlError,
    GraphError,
    TensorFormatError,
    ManifestError,
    ImageError,
    BenchCsvError,
    DeterminismError,
    OSError,
    json.JSONDecodeError,
    KeyError,
    ValueError,
)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- argument types -----------------------------------------------------------------


def _nonneg_int(s: str) -> int:
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {s!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _pos_int(s: str) -> int:
    v = _nonneg_int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _sparsity(s: str) -> float:
    try:
        v = float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {s!r}") from None
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"sparsity must be in [0, 1], got {s}")
    return v


def _clusters(s: str) -> int:
    v = _nonneg_int(s)
    if v < 2:
        raise argparse.ArgumentTypeError(f"clusters must be >= 2, got {v}")
    return v


def _width(s: str) -> float:
    try:
        v = float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {s!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError("width must be positive")
    return v


def _size(s: str) -> int:
    v = _pos_int(s)
    if v % 32:
        raise argparse.ArgumentTypeError(f"size must be a multiple of 32, got {v}")
    return v


def _path(s: str) -> str:
    if not s:
        raise argparse.ArgumentTypeError("path must not be empty")
    return s


def parse_thread_range(text: str) -> list:
    """``"N"`` -> [N]; ``"A..B"`` -> [A, ..., B]."""
    text = text.strip()
    try:
        if ".." in text:
            a, b = (int(p) for p in text.split("..", 1))
        else:
            a = b = int(text)
    except ValueError:
        raise UsageError(f"bad thread count {text!r}; use N or A..B") from None
    if a < 1 or b < a:
        raise UsageError(f"bad thread range {text!r}; need 1 <= A <= B")
    return list(range(a, b + 1))


def _single_threads(args) -> int:
    src = args.threads if args.threads is not None else os.environ.get("EMDL_THREADS")
    if src is None:
        return 1
    counts = parse_thread_range(src)
    if len(counts) != 1:
        raise UsageError(f"{args.command} takes a single thread count, got {src!r}")
    return counts[0]


def _load(path: str):
    return emdl.load(path)


def _emit(args, obj: dict):
    print(json.dumps(obj, indent=2, sort_keys=True))


# -- commands -----------------------------------------------------------------------


def cmd_inspect(args) -> int:
    m = _load(args.model)
    g = m.graph
    shapes = infer_shapes(g)
    sizes = emdl.encoded_size(m)
    layers = []
    for n in g.nodes:
        params = sum(g.weights[r].size for r in (n.weight, n.bias) if r is not None)
        enc = sizes["tensors"][n.weight]["encoding"] if n.kind in PARAM_KINDS else "-"
        layers.append({
            "id": n.id, "kind": n.kind, "output_shape": list(shapes[n.id]),
            "params": params, "encoding": enc,
        })
    info = {
        "name": m.name,
        "labels": list(m.labels),
        "params": count_params(g),
        "madds": count_madds(g),
        "bytes": {"total": sizes["total"], "by_encoding": sizes["by_encoding"],
                  "activation_table": sizes["activation_table"]},
        "quantized": m.is_quantized,
        "layers": layers,
    }
    if args.json:
        _emit(args, info)
        return 0
    print(f"name:      {m.name}")
    print(f"labels:    {', '.join(m.labels)}")
    print(f"params:    {info['params']:,} ({info['params'] / 1e6:.2f}M)")
    print(f"madds:     {info['madds']:,} ({info['madds'] / 1e6:.1f}M)")
    print(f"quantized: {'yes' if m.is_quantized else 'no'}")
    print(f"bytes:     {sizes['total']:,}")
    for enc, b in sizes["by_encoding"].items():
        print(f"  {enc:<5} {b:>12,}")
    if sizes["activation_table"]:
        print(f"  {'ACT':<5} {sizes['activation_table']:>12,}")
    print()
    print(f"{'layer':<20} {'kind':<16} {'output':<18} {'params':>10}  enc")
    for L in layers:
        shape = "x".join(str(d) for d in L["output_shape"])
        print(f"{L['id']:<20} {L['kind']:<16} {shape:<18} {L['params']:>10,}  {L['encoding']}")
    return 0


def cmd_compress(args) -> int:
    if args.calib and args.calib_random is not None:
        raise UsageError("--calib and --calib-random are mutually exclusive")
    if (args.calib or args.calib_random is not None) and not args.quantize:
        raise UsageError("--calib/--calib-random only apply with --quantize")
    m = _load(args.model)
    cfg = CompressionConfig(
        sparsity=args.sparsity,
        clusters=args.clusters,
        quantize=args.quantize,
        calibration_manifest=args.calib,
        calibration_random=args.calib_random if args.calib_random is not None else 100,
        seed=args.seed,
        threads=_single_threads(args),
    )
    try:
        out, report = optimize_pipeline(m, cfg)
    except (ManifestError, ImageError) as e:
        raise DataError(f"calibration: {e}") from None
    emdl.save(out, args.output)
    if args.json:
        _emit(args, report.to_dict())
        return 0
    print(f"original bytes: {report.original_bytes:,}")
    print(f"encoded bytes:  {report.encoded_bytes:,}")
    for enc, b in report.by_encoding.items():
        print(f"  {enc:<5} {b:>12,}")
    print(f"ratio: {report.ratio:.2f}x")
    print(f"wrote {args.output}")
    return 0


def cmd_bench(args) -> int:
    src = args.threads if args.threads is not None else os.environ.get("EMDL_THREADS")
    counts = parse_thread_range(src) if src is not None else list(range(1, host_cores() + 1))
    cfg = BenchConfig(
        warmup_runs=args.warmup,
        measured_runs=args.runs,
        thread_counts=counts,
        input_source="manifest" if args.manifest else "random",
        manifest=args.manifest,
        seed=args.seed,
    )
    m = _load(args.model)
    rep = thread_sweep(m, cfg)
    csv_bytes = emit_bench_csv(rep)
    if args.csv:
        Path(args.csv).write_bytes(csv_bytes)
    if args.json:
        _emit(args, rep.to_dict())
        return 0
    print(f"model: {rep.model_name}  params: {rep.params:,}  madds: {rep.madds:,}")
    print(f"memory: encoded {rep.encoded_bytes:,} B, activation peak {rep.activation_peak_bytes:,} B")
    print(f"host cores: {rep.host_cores}  warmup: {rep.warmup_runs}  runs: {rep.measured_runs}")
    print(f"{'threads':>7} {'mean':>9} {'std':>8} {'min':>9} {'p50':>9} {'p90':>9} {'p99':>9} {'max':>9}")
    for s in rep.stats:
        print(
            f"{s.thread_count:>7} {s.mean_ms:>9.3f} {s.std_ms:>8.3f} {s.min_ms:>9.3f} "
            f"{s.p50_ms:>9.3f} {s.p90_ms:>9.3f} {s.p99_ms:>9.3f} {s.max_ms:>9.3f}"
        )
    print(f"argmin threads (p50): {rep.argmin_threads}")
    for note in rep.notes:
        print(f"note: {note}")
    if args.csv:
        print(f"wrote {args.csv}")
    return 0


def cmd_eval(args) -> int:
    threads = _single_threads(args)
    m = _load(args.model)
    entries = load_manifest_file(args.manifest)
    if not entries:
        raise DataError(f"{args.manifest}: manifest has no entries")
    wanted = ["full", "A", "B"] if args.subset == "all" else [args.subset]
    if args.subset != "all" and not any(e.subset == args.subset for e in entries):
        raise DataError(f"subset {args.subset} empty")
    rep = evaluate(m, entries, threads)
    primary = rep.full if args.subset == "all" else rep.subset(args.subset)
    if args.confusion:
        Path(args.confusion).write_text(confusion_csv(primary.confusion))
    if args.json:
        d = rep.to_dict()
        d["subsets"] = {k: v for k, v in d["subsets"].items() if k in wanted}
        _emit(args, d)
        return 0
    for name in wanted:
        sm = rep.subset(name)
        if sm is None:
            print(f"{name}: empty")
            continue
        print(
            f"{name}: balanced_accuracy: {100 * sm.balanced_accuracy:.2f}%  "
            f"macro_f1: {100 * sm.macro_f1:.2f}%  (n={sm.count})"
        )
    return 0


def cmd_plot(args) -> int:
    text = Path(args.csv).read_text()
    try:
        svg = plot_csv(text)
    except BenchCsvError as e:
        raise DataError(f"{args.csv}: {e}") from None
    Path(args.output).write_text(svg)
    if args.json:
        _emit(args, {"output": args.output, "points": svg.count('class="point"')})
    else:
        print(f"wrote {args.output}")
    return 0


def cmd_convert(args) -> int:
    m = emdl.convert(args.spec, args.weights)
    n = emdl.save(m, args.output)
    if args.json:
        _emit(args, {"output": args.output, "bytes": n, "params": count_params(m.graph)})
    else:
        print(f"wrote {args.output} ({n:,} bytes, {count_params(m.graph):,} params)")
    return 0


def cmd_make_mobilenetv2(args) -> int:
    m = build_mobilenet_v2(args.width, args.classes, args.size, args.init, args.seed)
    n = emdl.save(m, args.output)
    if args.json:
        _emit(args, {"output": args.output, "bytes": n, "params": count_params(m.graph),
                     "madds": count_madds(m.graph)})
    else:
        print(f"wrote {args.output} ({n:,} bytes, {count_params(m.graph):,} params)")
    return 0


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=_nonneg_int, default=0, help="RNG seed (default 0)")
    common.add_argument("--threads", default=None,
                        help="worker threads; bench accepts A..B (default $EMDL_THREADS)")
    common.add_argument("--json", action="store_true", help="machine-readable output")

    p = _Parser(prog="edgeemo", description="Compress, run, benchmark and evaluate EMDL models.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("inspect", parents=[common], help="summarize a model")
    s.add_argument("model", type=_path)
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("compress", parents=[common], help="prune, cluster and quantize")
    s.add_argument("model", type=_path)
    s.add_argument("-o", "--output", type=_path, required=True)
    s.add_argument("--sparsity", type=_sparsity, default=0.5)
    s.add_argument("--clusters", type=_clusters, default=None)
    s.add_argument("--quantize", action="store_true")
    s.add_argument("--calib", type=_path, default=None, help="calibration manifest CSV")
    s.add_argument("--calib-random", type=_pos_int, default=None, metavar="N",
                   help="calibrate on N seeded random inputs (default 100)")
    s.set_defaults(func=cmd_compress)

    s = sub.add_parser("bench", parents=[common], help="latency thread sweep")
    s.add_argument("model", type=_path)
    s.add_argument("--warmup", type=_nonneg_int, default=10)
    s.add_argument("--runs", type=_pos_int, default=50)
    s.add_argument("--csv", type=_path, default=None)
    s.add_argument("--manifest", type=_path, default=None, help="take inputs from a manifest")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("eval", parents=[common], help="accuracy metrics on a manifest")
    s.add_argument("model", type=_path)
    s.add_argument("--manifest", type=_path, required=True)
    s.add_argument("--subset", choices=("all", "A", "B"), default="all")
    s.add_argument("--confusion", type=_path, default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("plot", parents=[common], help="SVG chart from bench CSV")
    s.add_argument("csv", type=_path)
    s.add_argument("-o", "--output", type=_path, required=True)
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("convert", parents=[common], help="graph JSON + RTEN tensors to EMDL")
    s.add_argument("--spec", type=_path, required=True)
    s.add_argument("--weights", type=_path, required=True)
    s.add_argument("-o", "--output", type=_path, required=True)
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("make-mobilenetv2", parents=[common], help="build the reference model")
    s.add_argument("--classes", type=_pos_int, default=7)
    s.add_argument("--width", type=_width, default=1.0)
    s.add_argument("--size", type=_size, default=224)
    s.add_argument("--init", choices=("random", "zeros"), default="random")
    s.add_argument("-o", "--output", type=_path, required=True)
    s.set_defaults(func=cmd_make_mobilenetv2)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # --help or a usage error
        return int(e.code or 0)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"edgeemo {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"edgeemo {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA
    except DATA_ERRORS as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"edgeemo {args.command}: {msg}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
