"""Standalone SVG line chart of p50 latency against thread count."""

from __future__ import annotations

from xml.sax.saxutils import escape

from .bench import parse_bench_csv

WIDTH, HEIGHT = 640, 400
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 30, 40, 60


def _nice_ticks(lo: float, hi: float, count: int = 5) -> list:
    if hi <= lo:
        hi = lo + 1.0
    step = (hi - lo) / count
    return [lo + i * step for i in range(count + 1)]


def latency_svg(stats: list, title: str = "p50 latency vs CPU threads") -> str:
    """Render ``stats`` (LatencyStats rows) as SVG; identical input gives identical bytes."""
    if not stats:
        raise ValueError("no rows to plot")
    xs = [s.thread_count for s in stats]
    ys = [s.p50_ms for s in stats]
    x_lo, x_hi = min(xs), max(xs)
    if x_lo == x_hi:
        x_lo, x_hi = x_lo - 1, x_hi + 1
    y_lo, y_hi = 0.0, max(ys) * 1.1 if max(ys) > 0 else 1.0
    pw = WIDTH - MARGIN_L - MARGIN_R
    ph = HEIGHT - MARGIN_T - MARGIN_B

    def px(x):
        return MARGIN_L + (x - x_lo) / (x_hi - x_lo) * pw

    def py(y):
        return MARGIN_T + ph - (y - y_lo) / (y_hi - y_lo) * ph

    best = min(range(len(stats)), key=lambda i: (ys[i], xs[i]))
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line class="axis" x1="{MARGIN_L}" y1="{MARGIN_T + ph}" x2="{MARGIN_L + pw}" '
        f'y2="{MARGIN_T + ph}" stroke="black"/>',
        f'<line class="axis" x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" '
        f'y2="{MARGIN_T + ph}" stroke="black"/>',
    ]
    for t in sorted(set(xs)):
        out.append(
            f'<text class="xtick" x="{px(t):.2f}" y="{MARGIN_T + ph + 18}" '
            f'text-anchor="middle">{t}</text>'
        )
    for v in _nice_ticks(y_lo, y_hi):
        out.append(
            f'<text class="ytick" x="{MARGIN_L - 8}" y="{py(v) + 4:.2f}" '
            f'text-anchor="end">{v:.1f}</text>'
        )
    out.append(
        f'<text class="xlabel" x="{MARGIN_L + pw / 2:.1f}" y="{HEIGHT - 15}" '
        f'text-anchor="middle">CPU threads</text>'
    )
    out.append(
        f'<text class="ylabel" x="18" y="{MARGIN_T + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {MARGIN_T + ph / 2:.1f})">p50 latency (ms)</text>'
    )
    pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
    out.append(f'<polyline class="series" points="{pts}" fill="none" stroke="#1f77b4" stroke-width="2"/>')
    for x, y in zip(xs, ys):
        out.append(f'<circle class="point" cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" fill="#1f77b4"/>')
    bx, by = px(xs[best]), py(ys[best])
    out.append(
        f'<circle class="min" cx="{bx:.2f}" cy="{by:.2f}" r="7" fill="none" '
        f'stroke="#d62728" stroke-width="2"/>'
    )
    out.append(
        f'<text class="minlabel" x="{bx:.2f}" y="{by - 12:.2f}" text-anchor="middle" '
        f'fill="#d62728">min {ys[best]:.3f} ms @ {xs[best]}</text>'
    )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_csv(text: str) -> str:
    return latency_svg(parse_bench_csv(text))
