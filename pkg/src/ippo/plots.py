"""Static SVG line charts written by hand, no plotting library involved."""
from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
           "#7f7f7f", "#17becf")
W, H = 640, 420
MARGIN = dict(left=80, right=170, top=40, bottom=55)


def _ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=raw)
    start = np.ceil(lo / step) * step
    return np.arange(start, hi + 0.5 * step, step)


def line_chart(series: dict, title: str, xlabel: str, ylabel: str) -> str:
    """``series`` maps a label to (x values, y values); returns the SVG document."""
    xs = np.concatenate([np.asarray(v[0], float) for v in series.values()]) if series else np.zeros(1)
    ys = np.concatenate([np.asarray(v[1], float) for v in series.values()]) if series else np.zeros(1)
    ys = ys[np.isfinite(ys)] if np.any(np.isfinite(ys)) else np.zeros(1)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    pad = 0.05 * (y1 - y0 or abs(y1) or 1.0)
    y0, y1 = y0 - pad, y1 + pad
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    pw = W - MARGIN["left"] - MARGIN["right"]
    ph = H - MARGIN["top"] - MARGIN["bottom"]

    def px(x):
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN["top"] + (1 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
           f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>']
    for t in _ticks(y0, y1):
        y = py(t)
        out.append(f'<line x1="{MARGIN["left"]}" y1="{y:.1f}" x2="{MARGIN["left"] + pw}" y2="{y:.1f}" '
                   f'stroke="#e5e5e5"/>')
        out.append(f'<text x="{MARGIN["left"] - 6}" y="{y + 4:.1f}" text-anchor="end">{t:g}</text>')
    for t in _ticks(x0, x1):
        x = px(t)
        out.append(f'<line x1="{x:.1f}" y1="{MARGIN["top"] + ph}" x2="{x:.1f}" y2="{MARGIN["top"] + ph + 5}" '
                   f'stroke="black"/>')
        out.append(f'<text x="{x:.1f}" y="{MARGIN["top"] + ph + 18}" text-anchor="middle">{t:g}</text>')
    out.append(f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" '
               f'fill="none" stroke="black"/>')
    out.append(f'<text x="{MARGIN["left"] + pw / 2:.1f}" y="{H - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text transform="translate(18 {MARGIN["top"] + ph / 2:.1f}) rotate(-90)" '
               f'text-anchor="middle">{escape(ylabel)}</text>')
    for i, (label, (x, y)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = [(px(a), py(b)) for a, b in zip(x, y) if np.isfinite(b)]
        if pts:
            path = " ".join(f"{a:.1f},{b:.1f}" for a, b in pts)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"/>')
            out.extend(f'<circle cx="{a:.1f}" cy="{b:.1f}" r="3" fill="{color}"/>' for a, b in pts)
        ly = MARGIN["top"] + 12 + 18 * i
        lx = MARGIN["left"] + pw + 12
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 20}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly}">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_results(results_csv, out_dir, splits=("test",)) -> list:
    """Mean cost against target R², one line per method, one chart per problem and split."""
    from .experiment import read_results

    rows = read_results(results_csv)
    out_dir = Path(out_dir)
    made = []
    for problem in sorted({r["problem"] for r in rows}):
        for split in splits:
            sel = [r for r in rows if r["problem"] == problem and r["split"] == split]
            series = {}
            for m in dict.fromkeys(r["method"] for r in sel):
                acc: dict = {}
                for r in sel:
                    if r["method"] == m:
                        acc.setdefault(float(r["r2_target"]), []).append(float(r["mean_cost"]))
                x = sorted(acc)
                series[m] = (x, [float(np.mean(acc[v])) for v in x])
            if not series:
                continue
            path = out_dir / f"cost_vs_r2_{problem}_{split}.svg"
            path.write_text(line_chart(series, f"{problem}: mean {split} cost", "target R²", "mean cost"))
            made.append(path)
    return made


def plot_tuning(values, train_costs, valid_costs, path, name="lambda1") -> Path:
    """Train and validation cost over one regularization grid."""
    path = Path(path)
    path.write_text(line_chart({"train": (values, train_costs), "validation": (values, valid_costs)},
                               f"cost over {name}", name, "mean cost"))
    return path
