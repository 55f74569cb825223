"""Learning-curve SVGs written by hand so regeneration is byte-identical."""

from __future__ import annotations

import json
from pathlib import Path

from . import metrics as M

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")
PANEL_W, PANEL_H = 420, 300
MARGIN = 50
AXES = (("macro_steps", "macro-steps"), ("raw_steps", "raw env steps"))


def _curves(rows: list[dict], x_key: str) -> dict:
    """algorithm -> list of (x, mean, lo, hi) per batch index, across seeds."""
    grouped: dict = {}
    for r in rows:
        if r["mean_return"] is None:
            continue
        grouped.setdefault(r["algorithm"], {}).setdefault(r["batch"], []).append((r[x_key], r["mean_return"]))
    out = {}
    for alg in sorted(grouped):
        pts = []
        for batch in sorted(grouped[alg]):
            xs, ys = zip(*grouped[alg][batch])
            pts.append((sum(xs) / len(xs), sum(ys) / len(ys), min(ys), max(ys)))
        out[alg] = pts
    return out


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _panel(curves: dict, colors: dict, x0: float, title: str) -> list[str]:
    all_pts = [p for pts in curves.values() for p in pts]
    if all_pts:
        xmin, xmax = min(p[0] for p in all_pts), max(p[0] for p in all_pts)
        ymin, ymax = min(p[2] for p in all_pts), max(p[3] for p in all_pts)
    else:
        xmin, xmax, ymin, ymax = 0.0, 1.0, 0.0, 1.0
    if xmax <= xmin:
        xmax = xmin + 1.0
    if ymax <= ymin:
        ymax = ymin + 1.0
    left, top = x0 + MARGIN, MARGIN / 2
    w, h = PANEL_W - 1.5 * MARGIN, PANEL_H - 1.5 * MARGIN

    def sx(x):
        return left + (x - xmin) / (xmax - xmin) * w

    def sy(y):
        return top + h - (y - ymin) / (ymax - ymin) * h

    parts = [
        f'<rect x="{_fmt(left)}" y="{_fmt(top)}" width="{_fmt(w)}" height="{_fmt(h)}" fill="none" stroke="#333"/>',
        f'<text x="{_fmt(left + w / 2)}" y="{_fmt(top + h + 32)}" text-anchor="middle" font-size="12">{title}</text>',
        f'<text x="{_fmt(left)}" y="{_fmt(top + h + 15)}" font-size="10">{xmin:.0f}</text>',
        f'<text x="{_fmt(left + w)}" y="{_fmt(top + h + 15)}" text-anchor="end" font-size="10">{xmax:.0f}</text>',
        f'<text x="{_fmt(left - 4)}" y="{_fmt(top + h)}" text-anchor="end" font-size="10">{ymin:.2f}</text>',
        f'<text x="{_fmt(left - 4)}" y="{_fmt(top + 10)}" text-anchor="end" font-size="10">{ymax:.2f}</text>',
    ]
    for alg, pts in curves.items():
        c = colors[alg]
        if len(pts) > 1:
            band = [f"{_fmt(sx(x))},{_fmt(sy(hi))}" for x, _, _, hi in pts]
            band += [f"{_fmt(sx(x))},{_fmt(sy(lo))}" for x, _, lo, _ in reversed(pts)]
            parts.append(f'<polygon points="{" ".join(band)}" fill="{c}" fill-opacity="0.15" stroke="none"/>')
        line = " ".join(f"{_fmt(sx(x))},{_fmt(sy(m))}" for x, m, _, _ in pts)
        parts.append(f'<polyline points="{line}" fill="none" stroke="{c}" stroke-width="1.5"/>')
    return parts


def render_svg(rows: list[dict], env: str) -> str:
    algs = sorted({r["algorithm"] for r in rows})
    colors = {a: PALETTE[i % len(PALETTE)] for i, a in enumerate(algs)}
    width, height = 2 * PANEL_W, PANEL_H + 20
    body = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<title>mean episode return on {env}</title>',
        '<rect width="100%" height="100%" fill="white"/>',
    ]
    for i, (key, label) in enumerate(AXES):
        body += _panel(_curves(rows, key), colors, i * PANEL_W, f"mean return vs {label}")
    for i, alg in enumerate(algs):
        y = PANEL_H + 8 - 14 * (len(algs) - 1 - i)
        body.append(f'<rect x="{width - 110}" y="{y - 8}" width="10" height="10" fill="{colors[alg]}"/>')
        body.append(f'<text x="{width - 95}" y="{y + 1}" font-size="11">{alg}</text>')
    body.append("</svg>")
    return "\n".join(body) + "\n"


def plot_curves(out_dir) -> list[Path]:
    """One ``curves_<env>.svg`` per environment found in ``metrics.csv``."""
    out = Path(out_dir)
    csv_path = out / M.CSV_NAME
    rows = M.read_csv(csv_path) if csv_path.exists() else []
    envs = sorted({r["env"] for r in rows})
    if not envs:
        envs = [_env_from_meta(out)]
    written = []
    for env in envs:
        path = out / f"curves_{env}.svg"
        path.write_text(render_svg([r for r in rows if r["env"] == env], env))
        written.append(path)
    return written


def _env_from_meta(out: Path) -> str:
    meta = out / "experiment.json"
    if meta.exists():
        return json.loads(meta.read_text())["env"]["name"]
    return "unknown"
