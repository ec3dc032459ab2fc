"""Metric CSV export and dependency-free SVG charts."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from ..metrics import MetricRecord

COLUMNS = MetricRecord.columns()
_TYPES = {"run_id": str, "stage": str, "epoch": int, "rate_index": int, "snr_db": float,
          "delay_spread_ns": float, "metric": str, "value": float, "seed": int}
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#7f7f7f")


def _cell(value) -> str:
    return repr(float(value)) if isinstance(value, float) else str(value)


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in records:
        w.writerow([_cell(getattr(r, c)) for c in COLUMNS])
    return buf.getvalue()


def export_csv(records, path) -> None:
    Path(path).write_text(records_to_csv(records))


def parse_csv(text: str) -> list[MetricRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != COLUMNS:
        raise ValueError(f"CSV header must be {','.join(COLUMNS)}")
    return [MetricRecord(**{c: _TYPES[c](v) for c, v in zip(COLUMNS, row)}) for row in rows[1:]]


def read_csv(path) -> list[MetricRecord]:
    return parse_csv(Path(path).read_text())


# -- SVG -----------------------------------------------------------------------------------------
@dataclass
class PlotSpec:
    """What to draw from a record stream.

    ``line``: mean ``value`` of ``metric`` against the ``x`` field, one polyline per distinct ``series`` value.
    ``box``: distribution of ``value`` per distinct ``series`` value.
    """
    kind: str = "line"
    metric: str = "psnr"
    x: str = "snr_db"
    series: str = "rate_index"
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    series_label: str = "rate"
    stage: str | None = None
    width: int = 560
    height: int = 380


_MARGIN = dict(left=64, right=120, top=36, bottom=52)


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    start = math.ceil(lo / step - 1e-9) * step
    out = []
    v = start
    while v <= hi + 1e-9 * step:
        out.append(round(v, 10))
        v += step
    return out


def _fmt(v: float) -> str:
    return f"{v:.4g}"


class _Canvas:
    def __init__(self, spec: PlotSpec, xr, yr):
        self.spec = spec
        self.x0, self.x1 = _MARGIN["left"], spec.width - _MARGIN["right"]
        self.y0, self.y1 = spec.height - _MARGIN["bottom"], _MARGIN["top"]
        self.xr, self.yr = xr, yr
        self.parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{spec.width}" height="{spec.height}" '
                      f'viewBox="0 0 {spec.width} {spec.height}" font-family="sans-serif" font-size="11">',
                      f'<rect width="{spec.width}" height="{spec.height}" fill="white"/>']

    def px(self, x):
        lo, hi = self.xr
        return self.x0 + (x - lo) / (hi - lo) * (self.x1 - self.x0)

    def py(self, y):
        lo, hi = self.yr
        return self.y0 - (y - lo) / (hi - lo) * (self.y0 - self.y1)

    def axes(self, xticks, yticks, xlabels=None):
        s = self.spec
        p = self.parts
        p.append(f'<g class="axes" stroke="black" stroke-width="1">'
                 f'<line x1="{self.x0}" y1="{self.y0}" x2="{self.x1}" y2="{self.y0}"/>'
                 f'<line x1="{self.x0}" y1="{self.y0}" x2="{self.x0}" y2="{self.y1}"/></g>')
        for i, t in enumerate(xticks):
            x = self.px(t)
            label = xlabels[i] if xlabels else _fmt(t)
            p.append(f'<line x1="{x:.2f}" y1="{self.y0}" x2="{x:.2f}" y2="{self.y0 + 4}" stroke="black"/>'
                     f'<text x="{x:.2f}" y="{self.y0 + 16}" text-anchor="middle">{escape(label)}</text>')
        for t in yticks:
            y = self.py(t)
            p.append(f'<line x1="{self.x0 - 4}" y1="{y:.2f}" x2="{self.x0}" y2="{y:.2f}" stroke="black"/>'
                     f'<line x1="{self.x0}" y1="{y:.2f}" x2="{self.x1}" y2="{y:.2f}" stroke="#ddd"/>'
                     f'<text x="{self.x0 - 6}" y="{y + 4:.2f}" text-anchor="end">{_fmt(t)}</text>')
        mid_x = (self.x0 + self.x1) / 2
        mid_y = (self.y0 + self.y1) / 2
        p.append(f'<text x="{mid_x:.1f}" y="{s.height - 12}" text-anchor="middle">{escape(s.xlabel or s.x)}</text>')
        p.append(f'<text x="16" y="{mid_y:.1f}" text-anchor="middle" '
                 f'transform="rotate(-90 16 {mid_y:.1f})">{escape(s.ylabel or s.metric)}</text>')
        if s.title:
            p.append(f'<text x="{mid_x:.1f}" y="20" text-anchor="middle" font-size="13">{escape(s.title)}</text>')

    def legend(self, names):
        x = self.x1 + 12
        items = []
        for i, name in enumerate(names):
            y = self.y1 + 8 + 16 * i
            color = PALETTE[i % len(PALETTE)]
            items.append(f'<line x1="{x}" y1="{y}" x2="{x + 18}" y2="{y}" stroke="{color}" stroke-width="2"/>'
                         f'<text x="{x + 22}" y="{y + 4}">{escape(name)}</text>')
        self.parts.append('<g class="legend">' + "".join(items) + "</g>")

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _padded(lo: float, hi: float) -> tuple[float, float]:
    if hi - lo < 1e-12:
        return lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _select(records, spec: PlotSpec):
    rows = [r for r in records if r.metric == spec.metric and (spec.stage is None or r.stage == spec.stage)]
    if not rows:
        raise ValueError(f"no records for metric {spec.metric!r}" + (f" in stage {spec.stage!r}" if spec.stage else ""))
    return rows


def line_svg(records, spec: PlotSpec) -> str:
    rows = _select(records, spec)
    series: dict = {}
    for r in rows:
        series.setdefault(getattr(r, spec.series), {}).setdefault(float(getattr(r, spec.x)), []).append(r.value)
    xs = sorted({x for pts in series.values() for x in pts})
    means = {k: [(x, float(np.mean(v))) for x, v in sorted(pts.items())] for k, pts in sorted(series.items())}
    ys = [y for pts in means.values() for _, y in pts]
    cv = _Canvas(spec, _padded(min(xs), max(xs)), _padded(min(ys), max(ys)))
    cv.axes([x for x in _ticks(min(xs), max(xs)) if min(xs) <= x <= max(xs)] or xs, _ticks(*cv.yr))
    for i, (k, pts) in enumerate(means.items()):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{cv.px(x):.2f},{cv.py(y):.2f}" for x, y in pts)
        cv.parts.append(f'<polyline class="series" data-series="{escape(str(k))}" points="{coords}" '
                        f'fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in pts:
            cv.parts.append(f'<circle cx="{cv.px(x):.2f}" cy="{cv.py(y):.2f}" r="2.5" fill="{color}"/>')
    cv.legend([f"{spec.series_label} {k}" for k in means])
    return cv.render()


def box_svg(records, spec: PlotSpec) -> str:
    rows = _select(records, spec)
    groups: dict = {}
    for r in rows:
        groups.setdefault(getattr(r, spec.series), []).append(r.value)
    keys = sorted(groups)
    vals = [np.asarray(groups[k]) for k in keys]
    lo = min(float(v.min()) for v in vals)
    hi = max(float(v.max()) for v in vals)
    cv = _Canvas(spec, (0.0, float(len(keys))), _padded(lo, hi))
    centers = [i + 0.5 for i in range(len(keys))]
    cv.axes(centers, _ticks(*cv.yr), [f"{spec.series_label} {k}" for k in keys])
    half = 0.3 * (cv.px(1) - cv.px(0))
    for i, (c, v) in enumerate(zip(centers, vals)):
        color = PALETTE[i % len(PALETTE)]
        q1, med, q3 = np.percentile(v, [25, 50, 75])
        x = cv.px(c)
        cv.parts.append(
            f'<g class="box" data-series="{escape(str(keys[i]))}" stroke="{color}" stroke-width="1.5">'
            f'<line x1="{x:.2f}" y1="{cv.py(v.min()):.2f}" x2="{x:.2f}" y2="{cv.py(q1):.2f}"/>'
            f'<line x1="{x:.2f}" y1="{cv.py(q3):.2f}" x2="{x:.2f}" y2="{cv.py(v.max()):.2f}"/>'
            f'<rect x="{x - half:.2f}" y="{cv.py(q3):.2f}" width="{2 * half:.2f}" '
            f'height="{max(cv.py(q1) - cv.py(q3), 0.5):.2f}" fill="white"/>'
            f'<line x1="{x - half:.2f}" y1="{cv.py(med):.2f}" x2="{x + half:.2f}" y2="{cv.py(med):.2f}" '
            f'stroke-width="2.5"/></g>')
    cv.legend([f"{spec.series_label} {k}" for k in keys])
    return cv.render()


def export_svg_plot(records, spec: PlotSpec, path) -> None:
    if spec.kind == "line":
        text = line_svg(records, spec)
    elif spec.kind == "box":
        text = box_svg(records, spec)
    else:
        raise ValueError(f"unknown plot kind {spec.kind!r}")
    Path(path).write_text(text)


def save_image_grid(path, images, cols: int, scale: int = 4) -> None:
    """Write (N, 3, h, w) images in [0, 1] as one PNG grid with 2-pixel gutters."""
    from PIL import Image

    images = np.asarray(images)
    n, _, h, w = images.shape
    rows = -(-n // cols)
    canvas = np.ones((rows * (h + 2), cols * (w + 2), 3))
    for i, im in enumerate(images):
        r, c = divmod(i, cols)
        canvas[r * (h + 2):r * (h + 2) + h, c * (w + 2):c * (w + 2) + w] = im.transpose(1, 2, 0)
    pixels = (np.clip(canvas, 0, 1) * 255).round().astype(np.uint8)
    Image.fromarray(pixels).resize((canvas.shape[1] * scale, canvas.shape[0] * scale), Image.NEAREST).save(path)
