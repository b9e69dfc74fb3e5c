"""Deterministic SVG line charts from metrics.jsonl."""

from __future__ import annotations

import json
from pathlib import Path
from xml.sax.saxutils import escape

KINDS = {
    "reward": ("reward_mean", "mean reward"),
    "gap": ("gap_mean", "mean teacher-student gap"),
    "gate_ratio": ("gate_active_ratio", "gate active ratio"),
    "gap_profile": ("gap_per_turn", "gap by turn (last profiled step)"),
}
W, H, PAD = 640, 400, 56


class MissingColumn(KeyError):
    pass


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def series(records: list[dict], kind: str) -> tuple[list[float], list[float], str, str]:
    if kind not in KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; choose from {sorted(KINDS)}")
    col, label = KINDS[kind]
    if kind == "gap_profile":
        prof = [r[col] for r in records if r.get(col)]
        if not prof:
            raise MissingColumn(col)
        ys = prof[-1]
        pts = [(float(i), float(y)) for i, y in enumerate(ys) if y is not None]
        return [p[0] for p in pts], [p[1] for p in pts], "turn", label
    pts = [(float(r["step"]), float(r[col])) for r in records if r.get(col) is not None]
    if not pts:
        raise MissingColumn(col)
    return [p[0] for p in pts], [p[1] for p in pts], "step", label


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * k / (n - 1) for k in range(n)]


def render_svg(xs: list[float], ys: list[float], xlabel: str, ylabel: str, y_range=None) -> str:
    x0, x1 = min(xs), max(xs)
    y0, y1 = y_range if y_range is not None else (min(ys), max(ys))
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def sx(x):
        return PAD + (x - x0) / (x1 - x0) * (W - 2 * PAD)

    def sy(y):
        return H - PAD - (y - y0) / (y1 - y0) * (H - 2 * PAD)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
    ]
    for t in _ticks(x0, x1):
        out.append(f'<text x="{sx(t):.2f}" y="{H - PAD + 18}" font-size="11" text-anchor="middle">{t:g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<text x="{PAD - 6}" y="{sy(t) + 4:.2f}" font-size="11" text-anchor="end">{t:.3g}</text>')
    out.append(f'<text x="{W / 2:.0f}" y="{H - 12}" font-size="13" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{H / 2:.0f}" font-size="13" text-anchor="middle" '
               f'transform="rotate(-90 16 {H / 2:.0f})">{escape(ylabel)}</text>')
    pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
    out.append(f'<polyline fill="none" stroke="#1f5fa8" stroke-width="1.5" points="{pts}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot(metrics: str | Path, kind: str, out: str | Path) -> Path:
    xs, ys, xl, yl = series(read_metrics(metrics), kind)
    y_range = (0.0, 1.0) if kind in ("reward", "gate_ratio") else None
    out = Path(out)
    out.write_text(render_svg(xs, ys, xl, yl, y_range), encoding="utf-8")
    return out
