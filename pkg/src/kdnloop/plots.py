"""Deterministic SVG bar and line charts for controller comparisons."""

import math
from html import escape
from pathlib import Path

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
PANEL_W, PANEL_H = 320, 240
MARGIN = dict(left=56, right=12, top=28, bottom=40)


def fmt(x: float) -> str:
    """Fixed-precision number text so identical input gives identical bytes."""
    s = f"{x:.2f}"
    return "0.00" if s == "-0.00" else s


def _tick_label(x: float) -> str:
    return "0" if x == 0 else f"{x:.3g}"


def nice_range(lo: float, hi: float) -> tuple:
    if not (math.isfinite(lo) and math.isfinite(hi)):
        return 0.0, 1.0
    if hi <= lo:
        pad = abs(hi) * 0.1 or 1.0
        return lo - pad, hi + pad
    return lo, hi + (hi - lo) * 0.05


def _text(x, y, s, anchor="middle", size=11, extra=""):
    return (f'<text x="{fmt(x)}" y="{fmt(y)}" font-family="sans-serif" font-size="{size}" '
            f'text-anchor="{anchor}"{extra}>{escape(str(s))}</text>')


def _axes(lo, hi, title, w=PANEL_W):
    x0, y0 = MARGIN["left"], PANEL_H - MARGIN["bottom"]
    x1, y1 = w - MARGIN["right"], MARGIN["top"]
    parts = [_text(w / 2, 16, title, size=12, extra=' font-weight="bold"'),
             f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="#333"/>',
             f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="#333"/>']
    for v in np.linspace(lo, hi, 5):
        y = y0 - (v - lo) / (hi - lo) * (y0 - y1)
        parts.append(f'<line x1="{x0 - 4}" y1="{fmt(y)}" x2="{x0}" y2="{fmt(y)}" stroke="#333"/>')
        parts.append(_text(x0 - 6, y + 4, _tick_label(float(v)), anchor="end", size=9))
    return parts


def _no_data(title, w=PANEL_W):
    return [_text(w / 2, 16, title, size=12, extra=' font-weight="bold"'),
            _text(w / 2, PANEL_H / 2, "no data", size=13, extra=' fill="#888"')]


def bar_panel(title: str, labels, values) -> list:
    vals = [v for v in values if v is not None and math.isfinite(v)]
    if not labels or not vals:
        return _no_data(title)
    lo, hi = nice_range(min(0.0, min(vals)), max(0.0, max(vals)))
    parts = _axes(lo, hi, title)
    x0, y0 = MARGIN["left"], PANEL_H - MARGIN["bottom"]
    plot_w = PANEL_W - MARGIN["left"] - MARGIN["right"]
    plot_h = y0 - MARGIN["top"]
    slot = plot_w / len(labels)
    zero = y0 - (0.0 - lo) / (hi - lo) * plot_h
    for i, (lab, v) in enumerate(zip(labels, values)):
        cx = x0 + slot * (i + 0.5)
        parts.append(_text(cx, y0 + 14, lab, size=10))
        if v is None or not math.isfinite(v):
            parts.append(_text(cx, y0 - 6, "n/a", size=9, extra=' fill="#888"'))
            continue
        y = y0 - (v - lo) / (hi - lo) * plot_h
        top, h = min(y, zero), abs(zero - y)
        parts.append(f'<rect x="{fmt(cx - slot * 0.3)}" y="{fmt(top)}" width="{fmt(slot * 0.6)}" '
                     f'height="{fmt(h)}" fill="{PALETTE[i % len(PALETTE)]}"/>')
        parts.append(_text(cx, top - 3, f"{v:.3g}", size=9))
    return parts


def line_panel(title: str, series: dict, width: int = PANEL_W * 2) -> list:
    """``series`` maps label -> 1-d array; legend follows insertion order."""
    clean = {k: np.asarray(v, dtype=np.float64) for k, v in series.items()}
    pts = [v[np.isfinite(v)] for v in clean.values()]
    if not clean or not any(len(p) for p in pts):
        return _no_data(title, width)
    lo = min(float(p.min()) for p in pts if len(p))
    hi = max(float(p.max()) for p in pts if len(p))
    lo, hi = nice_range(lo, hi)
    parts = _axes(lo, hi, title, width)
    x0, y0 = MARGIN["left"], PANEL_H - MARGIN["bottom"]
    plot_w = width - MARGIN["left"] - MARGIN["right"] - 70
    plot_h = y0 - MARGIN["top"]
    n = max(len(v) for v in clean.values())
    for i, (lab, v) in enumerate(clean.items()):
        color = PALETTE[i % len(PALETTE)]
        xs = x0 + (np.arange(len(v)) / max(n - 1, 1)) * plot_w
        ys = y0 - (v - lo) / (hi - lo) * plot_h
        ok = np.isfinite(ys)
        if ok.sum() == 1:
            j = int(np.flatnonzero(ok)[0])
            parts.append(f'<circle cx="{fmt(xs[j])}" cy="{fmt(ys[j])}" r="3" fill="{color}"/>')
        elif ok.sum() > 1:
            d = " ".join(f"{fmt(x)},{fmt(y)}" for x, y in zip(xs[ok], ys[ok]))
            parts.append(f'<polyline points="{d}" fill="none" stroke="{color}" stroke-width="1"/>')
        ly = MARGIN["top"] + 14 * i + 8
        lx = x0 + plot_w + 10
        parts.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 16}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(_text(lx + 20, ly + 4, lab, anchor="start", size=10))
    parts.append(_text(x0 + plot_w / 2, PANEL_H - 8, "tick", size=10))
    return parts


def compose(panels, widths=None) -> str:
    widths = widths or [PANEL_W] * len(panels)
    total = sum(widths)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{PANEL_H}" '
           f'viewBox="0 0 {total} {PANEL_H}">', f'<rect width="{total}" height="{PANEL_H}" fill="white"/>']
    x = 0
    for parts, w in zip(panels, widths):
        out.append(f'<g transform="translate({x},0)">')
        out.extend(parts)
        out.append("</g>")
        x += w
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plots(comparison, controllers, out) -> list:
    """Four SVGs: effectiveness panels, stability panels, decision latency, latency increase."""
    out = Path(out)
    means = {m: comparison.means(m) for m in (
        "delay_reduction", "throughput_variability", "effectiveness_score", "jitter", "throughput_variance",
        "stability_score", "decision_latency_ms")}
    labels = [c for c in controllers if c in means["effectiveness_score"]]

    def bars(metric, title):
        return bar_panel(title, labels, [means[metric].get(c) for c in labels])

    files = {
        "effectiveness.svg": compose([bars("delay_reduction", "Delay reduction"),
                                      bars("throughput_variability", "Throughput variability"),
                                      bars("effectiveness_score", "Effectiveness score")]),
        "stability.svg": compose([bars("jitter", "Delay jitter (ms)"),
                                  bars("throughput_variance", "Throughput variance"),
                                  bars("stability_score", "Stability score")]),
        "decision_latency.svg": compose([bars("decision_latency_ms", "Decision latency (ms)")]),
    }
    series = {}
    for c in labels:
        runs = [r.latency_increase for (ctrl, _), r in sorted(comparison.results.items()) if ctrl == c]
        if runs:
            n = min(len(r) for r in runs)
            series[c] = np.mean([r[:n] for r in runs], axis=0)
    files["latency_increase.svg"] = compose([line_panel("Latency increase since fault onset (ms)", series)],
                                            [PANEL_W * 2])
    paths = []
    for name, text in files.items():
        p = out / name
        p.write_text(text)
        paths.append(p)
    return paths
