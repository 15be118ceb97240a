"""Self-contained SVG figures: AP-vs-IoU curves, size-bucket bars, the alpha
schedule and before/after excitation heatmaps.

Everything is written as plain SVG text so no plotting backend is required.
"""

from __future__ import annotations

import csv
from html import escape
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import PlotError
from .excitation import ExcitationConfig, alpha_schedule, excite
from .metrics import SIZE_BUCKETS, EvalReport
from .tensor import channel_mean

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")
WIDTH, HEIGHT = 480, 320
MARGIN = {"left": 56, "right": 16, "top": 28, "bottom": 44}


class _Canvas:
    def __init__(self, width: int = WIDTH, height: int = HEIGHT, title: str = ""):
        self.width, self.height = width, height
        self.parts: list[str] = []
        if title:
            self.text(width / 2, 18, title, anchor="middle", size=14)

    def line(self, x0, y0, x1, y1, color="#000", width=1.0, dash: Optional[str] = None):
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(
            f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x1:.2f}" y2="{y1:.2f}" stroke="{color}" stroke-width="{width}"{extra}/>'
        )

    def polyline(self, pts, color, width=2.0, label: str = ""):
        coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
        title = f"<title>{escape(label)}</title>" if label else ""
        self.parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="{width}">{title}</polyline>')

    def rect(self, x, y, w, h, fill, stroke: Optional[str] = None, label: str = ""):
        extra = f' stroke="{stroke}"' if stroke else ""
        title = f"<title>{escape(label)}</title>" if label else ""
        self.parts.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{w:.2f}" height="{h:.2f}" fill="{fill}"{extra}>{title}</rect>')

    def text(self, x, y, s, anchor="start", size=11, rotate: Optional[float] = None):
        rot = f' transform="rotate({rotate} {x:.2f} {y:.2f})"' if rotate is not None else ""
        self.parts.append(
            f'<text x="{x:.2f}" y="{y:.2f}" font-family="sans-serif" font-size="{size}" text-anchor="{anchor}"{rot}>{escape(str(s))}</text>'
        )

    def render(self) -> str:
        body = "\n".join(self.parts)
        return (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
            f'viewBox="0 0 {self.width} {self.height}">\n<rect width="100%" height="100%" fill="white"/>\n{body}\n</svg>\n'
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.render())
        return path


class _Axes:
    """Linear data-to-pixel mapping inside the canvas margins."""

    def __init__(self, canvas: _Canvas, xlim, ylim, xlabel: str, ylabel: str):
        self.c = canvas
        self.x0, self.x1 = MARGIN["left"], canvas.width - MARGIN["right"]
        self.y0, self.y1 = canvas.height - MARGIN["bottom"], MARGIN["top"]
        self.xlim, self.ylim = xlim, ylim
        canvas.line(self.x0, self.y0, self.x1, self.y0)
        canvas.line(self.x0, self.y0, self.x0, self.y1)
        canvas.text((self.x0 + self.x1) / 2, canvas.height - 8, xlabel, anchor="middle")
        canvas.text(14, (self.y0 + self.y1) / 2, ylabel, anchor="middle", rotate=-90)

    def px(self, x, y):
        fx = (x - self.xlim[0]) / (self.xlim[1] - self.xlim[0])
        fy = (y - self.ylim[0]) / (self.ylim[1] - self.ylim[0])
        return self.x0 + fx * (self.x1 - self.x0), self.y0 + fy * (self.y1 - self.y0)

    def ticks(self, xs: Sequence[float], ys: Sequence[float], xfmt="{:g}", yfmt="{:g}"):
        for x in xs:
            px, py = self.px(x, self.ylim[0])
            self.c.line(px, py, px, py + 4)
            self.c.text(px, py + 16, xfmt.format(x), anchor="middle", size=10)
        for y in ys:
            px, py = self.px(self.xlim[0], y)
            self.c.line(px - 4, py, px, py)
            self.c.line(px, py, self.x1, py, color="#ddd", width=0.5)
            self.c.text(px - 6, py + 3, yfmt.format(y), anchor="end", size=10)

    def legend(self, names: Sequence[str]):
        for k, name in enumerate(names):
            y = self.y1 + 6 + 14 * k
            self.c.line(self.x1 - 120, y, self.x1 - 100, y, color=PALETTE[k % len(PALETTE)], width=2)
            self.c.text(self.x1 - 96, y + 4, name, size=10)


def _as_report(r) -> EvalReport:
    return r if isinstance(r, EvalReport) else EvalReport.load(r)


def ap_vs_iou(reports: Mapping[str, object], out) -> Path:
    """One AP-vs-IoU-threshold curve per named report (object or JSON path)."""
    if not reports:
        raise PlotError("no reports to plot")
    canvas = _Canvas(title="AP vs IoU threshold")
    ax = _Axes(canvas, (0.5, 0.95), (0.0, 1.0), "IoU threshold", "AP")
    ax.ticks([0.5, 0.6, 0.7, 0.8, 0.9], [0, 0.25, 0.5, 0.75, 1.0])
    for k, (name, r) in enumerate(reports.items()):
        rep = _as_report(r)
        pts = [ax.px(t, a) for t, a in zip(rep.thresholds, rep.ap_curve)]
        canvas.polyline(pts, PALETTE[k % len(PALETTE)], label=name)
    ax.legend(list(reports))
    return canvas.save(out)


def size_buckets(reports: Mapping[str, object], out) -> Path:
    """Grouped bars of AP50 per size bucket, one bar per run inside each group."""
    if not reports:
        raise PlotError("no reports to plot")
    reps = {name: _as_report(r) for name, r in reports.items()}
    canvas = _Canvas(title="AP50 by object size")
    ax = _Axes(canvas, (0.0, float(len(SIZE_BUCKETS))), (0.0, 1.0), "object size", "AP50")
    ax.ticks([], [0, 0.25, 0.5, 0.75, 1.0])
    n = len(reps)
    for b, bucket in enumerate(SIZE_BUCKETS):
        cx, _ = ax.px(b + 0.5, 0)
        canvas.text(cx, ax.y0 + 16, bucket, anchor="middle", size=10)
        for k, (name, rep) in enumerate(reps.items()):
            v = rep.size_ap50.get(bucket)
            if v is None:
                continue
            left, top = ax.px(b + 0.1 + 0.8 * k / n, v)
            right, bottom = ax.px(b + 0.1 + 0.8 * (k + 1) / n, 0.0)
            canvas.rect(left, top, right - left, bottom - top, PALETTE[k % len(PALETTE)], label=f"{name} {bucket}: {v:.3f}")
    ax.legend(list(reps))
    return canvas.save(out)


def read_alpha_column(metrics_csv) -> list[tuple[int, float]]:
    """(epoch, alpha) pairs from a metrics log; missing columns are a plot error."""
    with open(metrics_csv, newline="") as fh:
        reader = csv.DictReader(fh)
        absent = [c for c in ("epoch", "alpha") if c not in (reader.fieldnames or [])]
        if absent:
            raise PlotError(f"{metrics_csv}: missing columns {absent}")
        return [(int(r["epoch"]), float(r["alpha"])) for r in reader]


def schedule_points(max_iteration: float, epochs: int) -> list[tuple[int, float]]:
    return [(t, alpha_schedule(t, max_iteration)) for t in range(epochs + 1)]


def alpha_curve(series: Mapping[str, Sequence[tuple[float, float]]], out) -> Path:
    """Alpha against epoch for each named series of (epoch, alpha) points."""
    if not series or not any(series.values()):
        raise PlotError("no alpha series to plot")
    xmax = max(max(e for e, _ in pts) for pts in series.values() if pts) or 1
    canvas = _Canvas(title="Excitation factor")
    ax = _Axes(canvas, (0.0, float(xmax)), (0.0, 1.0), "epoch", "alpha")
    step = max(1, int(round(xmax / 6)))
    ax.ticks(list(range(0, int(xmax) + 1, step)), [0, 0.5, 1.0])
    for k, (name, pts) in enumerate(series.items()):
        canvas.polyline([ax.px(e, a) for e, a in pts], PALETTE[k % len(PALETTE)], label=name)
    ax.legend(list(series))
    return canvas.save(out)


def _gray(v: float) -> str:
    q = int(round(255 * min(1.0, max(0.0, v))))
    return f"#{q:02x}{q:02x}{q:02x}"


def excitation_maps(model, image: np.ndarray, boxes, alpha: float, out, ae: Optional[ExcitationConfig] = None) -> tuple[Path, np.ndarray, np.ndarray]:
    """Channel-averaged activation at the AE stage before and after excitation.

    Both panels share one gray scale so a zero mask gives identical pictures.
    Returns the path and the two (H, W) maps.
    """
    ae = ae or model.ae or ExcitationConfig()
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 3:
        img = img[None]
    a = model.stage_activation(img, ae.stage)
    after = excite(a, [list(boxes)], ae, alpha)
    before_map = channel_mean(a).data[0, 0].astype(np.float64)
    after_map = channel_mean(after).data[0, 0].astype(np.float64)
    lo = min(before_map.min(), after_map.min())
    hi = max(before_map.max(), after_map.max())
    scale = (hi - lo) or 1.0
    h, w = before_map.shape
    cell = max(4, 200 // max(h, w))
    pad = 20
    canvas = _Canvas(2 * w * cell + 3 * pad, h * cell + 2 * pad + 20, title=f"Averaged activation, stage {ae.stage}, alpha={alpha:g}")
    for panel, (label, m) in enumerate((("before", before_map), ("after", after_map))):
        ox = pad + panel * (w * cell + pad)
        oy = pad + 16
        for i in range(h):
            for j in range(w):
                canvas.rect(ox + j * cell, oy + i * cell, cell, cell, _gray((m[i, j] - lo) / scale))
        canvas.text(ox + w * cell / 2, oy + h * cell + 14, label, anchor="middle")
    return canvas.save(out), before_map, after_map
