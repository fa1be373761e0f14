"""Text tables and static SVG figures for benchmark results.

All numbers are formatted with fixed precision so equal inputs give
byte-identical files.
"""

from __future__ import annotations

import csv
import io
from xml.sax.saxutils import escape

import numpy as np

from .metrics import Scores
from .stats import VolumeReport

TABLE_HEADER = ("Model", "Dice Score", "IoU Score", "Precision", "Recall")


def metrics_table(rows: list[tuple[str, Scores | None]], title: str = "") -> str:
    """Fixed-width table, one row per model; ``None`` scores mark a failed run."""
    lines = [title] if title else []
    lines.append(f"{TABLE_HEADER[0]:<20} {TABLE_HEADER[1]:>10} {TABLE_HEADER[2]:>10} "
                 f"{TABLE_HEADER[3]:>10} {TABLE_HEADER[4]:>10}")
    for model_id, s in rows:
        if s is None:
            lines.append(f"{model_id:<20} {'failed':>10} {'':>10} {'':>10} {'':>10}")
        else:
            lines.append(f"{model_id:<20} {s.dice:>10.4f} {s.iou:>10.4f} {s.precision:>10.4f} {s.recall:>10.4f}")
    return "\n".join(lines) + "\n"


def metrics_rows_csv(rows: list[tuple[str, Scores | None]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("model_id", "dice", "iou", "precision", "recall"))
    for model_id, s in rows:
        w.writerow([model_id] + (["", "", "", ""] if s is None else [repr(v) for v in s]))
    return buf.getvalue()


def read_metrics_rows_csv(text: str) -> list[tuple[str, Scores | None]]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        if row["dice"] == "":
            out.append((row["model_id"], None))
        else:
            out.append((row["model_id"], Scores(*(float(row[k]) for k in ("dice", "iou", "precision", "recall")))))
    return out


# ---------------------------------------------------------------------------
# SVG


def _f(x: float) -> str:
    return f"{x:.2f}"


def _nice_max(v: float) -> float:
    return v * 1.05 if v > 0 else 1.0


def _svg(width: int, height: int, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">')
    return "\n".join([head, f'<rect width="{width}" height="{height}" fill="white"/>'] + body + ["</svg>"]) + "\n"


def _axes(x0, y0, w, h, vmax, xlabel, ylabel, title) -> list[str]:
    out = [
        f'<rect x="{_f(x0)}" y="{_f(y0)}" width="{_f(w)}" height="{_f(h)}" fill="none" stroke="black"/>',
        f'<text x="{_f(x0 + w / 2)}" y="{_f(y0 - 8)}" text-anchor="middle" font-weight="bold">{escape(title)}</text>',
        f'<text x="{_f(x0 + w / 2)}" y="{_f(y0 + h + 32)}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="{_f(x0 - 40)}" y="{_f(y0 + h / 2)}" text-anchor="middle" '
        f'transform="rotate(-90 {_f(x0 - 40)} {_f(y0 + h / 2)})">{escape(ylabel)}</text>',
    ]
    for k in range(5):
        v = vmax * k / 4
        out.append(f'<text x="{_f(x0 - 4)}" y="{_f(y0 + h - h * k / 4 + 4)}" text-anchor="end">{v:.0f}</text>')
    return out


def scatter_svg(reports: list[VolumeReport], panel: int = 260) -> str:
    """Predicted against actual lesion volume per model, with the identity line."""
    pad = 70
    width = pad + len(reports) * (panel + pad)
    height = panel + 2 * pad
    body = []
    for i, r in enumerate(reports):
        pts = r.scatter
        vmax = _nice_max(max([0.0] + [max(a, p) for a, p in pts]))
        x0, y0 = pad + i * (panel + pad), pad
        body += _axes(x0, y0, panel, panel, vmax, "actual volume (mm3)", "predicted volume (mm3)", r.model_id)
        for k in range(5):
            body.append(f'<text x="{_f(x0 + panel * k / 4)}" y="{_f(y0 + panel + 14)}" '
                        f'text-anchor="middle">{vmax * k / 4:.0f}</text>')
        body.append(f'<line x1="{_f(x0)}" y1="{_f(y0 + panel)}" x2="{_f(x0 + panel)}" y2="{_f(y0)}" '
                    f'stroke="red" stroke-width="1.5"/>')
        for a, p in pts:
            cx = x0 + panel * a / vmax
            cy = y0 + panel - panel * p / vmax
            body.append(f'<circle cx="{_f(cx)}" cy="{_f(cy)}" r="3" fill="gray" fill-opacity="0.8"/>')
    return _svg(width, height, body)


def _box(x: float, w: float, y_of, summary, colour: str) -> list[str]:
    lo, q1, med, q3, hi = summary
    c = x + w / 2
    return [
        f'<line x1="{_f(c)}" y1="{_f(y_of(lo))}" x2="{_f(c)}" y2="{_f(y_of(q1))}" stroke="black"/>',
        f'<line x1="{_f(c)}" y1="{_f(y_of(q3))}" x2="{_f(c)}" y2="{_f(y_of(hi))}" stroke="black"/>',
        f'<line x1="{_f(x + w / 4)}" y1="{_f(y_of(lo))}" x2="{_f(x + 3 * w / 4)}" y2="{_f(y_of(lo))}" stroke="black"/>',
        f'<line x1="{_f(x + w / 4)}" y1="{_f(y_of(hi))}" x2="{_f(x + 3 * w / 4)}" y2="{_f(y_of(hi))}" stroke="black"/>',
        f'<rect x="{_f(x)}" y="{_f(y_of(q3))}" width="{_f(w)}" height="{_f(y_of(q1) - y_of(q3))}" '
        f'fill="{colour}" stroke="black"/>',
        f'<line x1="{_f(x)}" y1="{_f(y_of(med))}" x2="{_f(x + w)}" y2="{_f(y_of(med))}" stroke="black" stroke-width="2"/>',
    ]


def boxplot_svg(reports: list[VolumeReport], panel: int = 260) -> str:
    """Box plots of actual and predicted lesion volumes per model."""
    pad = 70
    width = pad + len(reports) * (panel + pad)
    height = panel + 2 * pad
    body = []
    for i, r in enumerate(reports):
        vmax = _nice_max(max(r.actual_box[4], r.predicted_box[4]))
        x0, y0 = pad + i * (panel + pad), pad

        def y_of(v, y0=y0, vmax=vmax):
            return y0 + panel - panel * v / vmax

        body += _axes(x0, y0, panel, panel, vmax, "", "lesion volume (mm3)", r.model_id)
        bw = panel / 5
        for j, (label, summary, colour) in enumerate((("actual", r.actual_box, "#9ecae1"),
                                                     ("predicted", r.predicted_box, "#fdae6b"))):
            bx = x0 + panel * (1 + 2 * j) / 4 - bw / 2
            body += _box(bx, bw, y_of, summary, colour)
            body.append(f'<text x="{_f(bx + bw / 2)}" y="{_f(y0 + panel + 14)}" text-anchor="middle">{label}</text>')
    return _svg(width, height, body)


def overlay_svg(image, truth, prediction, title: str = "", scale: int = 4) -> str:
    """Grey-scale slice with ground-truth (green) and predicted (red) pixels."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    norm = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    h, w = img.shape
    body = [f'<text x="4" y="12">{escape(title)}</text>'] if title else []
    top = 16 if title else 0
    for r in range(h):
        for c in range(w):
            g = int(round(255 * norm[r, c]))
            t, p = truth[r, c], prediction[r, c]
            colour = f"rgb({g},{g},{g})"
            if t and p:
                colour = "rgb(255,215,0)"
            elif t:
                colour = "rgb(0,200,0)"
            elif p:
                colour = "rgb(220,0,0)"
            body.append(f'<rect x="{c * scale}" y="{top + r * scale}" width="{scale}" height="{scale}" fill="{colour}"/>')
    return _svg(w * scale, h * scale + top, body)
