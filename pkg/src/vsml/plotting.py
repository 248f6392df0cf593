"""Deterministic SVG line plots for learning curves and introspection traces."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]
WIDTH, HEIGHT = 640, 400
MARGIN = {"left": 60, "right": 150, "top": 30, "bottom": 45}


class SchemaError(ValueError):
    pass


@dataclass
class PlotSpec:
    x: str = "step"
    series: list = field(default_factory=lambda: ["mean_cum_acc"])
    title: str = ""
    y_label: str = ""
    y_range: tuple | None = None
    markers: dict = field(default_factory=dict)   # column -> label, drawn as dots instead of lines

    @property
    def columns(self) -> list:
        return [self.x, *self.series, *self.markers]

    @classmethod
    def learning_curve(cls, series=("mean_cum_acc",), title="") -> "PlotSpec":
        return cls("step", list(series), title, "cumulative accuracy", (0.0, 1.0))

    @classmethod
    def introspection(cls, n_classes: int, title="") -> "PlotSpec":
        return cls("step", [f"prob_{i}" for i in range(n_classes)], title, "output probability", (0.0, 1.0),
                   {"label": "true class", "predicted": "prediction"})


def read_csv(path) -> tuple[list, list]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty file has no header")
        return header, [row for row in reader if row]


def check_schema(header, spec: PlotSpec) -> None:
    missing = [c for c in spec.columns if c not in header]
    if missing:
        raise SchemaError(f"missing columns: {', '.join(missing)}")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, n: int = 5) -> list:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def render_svg(header, rows, spec: PlotSpec) -> str:
    check_schema(header, spec)
    col = {name: header.index(name) for name in spec.columns}
    xs = [float(r[col[spec.x]]) for r in rows]
    ys = {s: [float(r[col[s]]) for r in rows] for s in spec.series}
    x_lo, x_hi = (min(xs), max(xs)) if xs else (0.0, 1.0)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if spec.y_range:
        y_lo, y_hi = spec.y_range
    else:
        vals = [v for s in ys.values() for v in s]
        y_lo, y_hi = (min(vals), max(vals)) if vals else (0.0, 1.0)
        if y_hi == y_lo:
            y_hi = y_lo + 1.0
    L, T = MARGIN["left"], MARGIN["top"]
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
    px = lambda x: L + (x - x_lo) / (x_hi - x_lo) * pw
    py = lambda y: T + ph - (y - y_lo) / (y_hi - y_lo) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="DejaVu Sans, sans-serif" font-size="11">',
           f'<rect id="background" x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>']
    if spec.title:
        out.append(f'<text id="title" x="{WIDTH / 2:.2f}" y="18" text-anchor="middle" font-size="13">'
                   f'{escape(spec.title)}</text>')
    out.append(f'<g id="axes" stroke="black" fill="none">'
               f'<line x1="{L}" y1="{T + ph}" x2="{L + pw}" y2="{T + ph}"/>'
               f'<line x1="{L}" y1="{T}" x2="{L}" y2="{T + ph}"/></g>')
    out.append('<g id="ticks" fill="black">')
    for v in _ticks(x_lo, x_hi):
        out.append(f'<text x="{_fmt(px(v))}" y="{T + ph + 15}" text-anchor="middle">{v:g}</text>')
    for v in _ticks(y_lo, y_hi):
        out.append(f'<text x="{L - 6}" y="{_fmt(py(v) + 4)}" text-anchor="end">{v:.3g}</text>')
    out.append('</g>')
    out.append(f'<text id="x-label" x="{L + pw / 2:.2f}" y="{HEIGHT - 8}" text-anchor="middle">{escape(spec.x)}</text>')
    if spec.y_label:
        out.append(f'<text id="y-label" x="14" y="{T + ph / 2:.2f}" text-anchor="middle" '
                   f'transform="rotate(-90 14 {T + ph / 2:.2f})">{escape(spec.y_label)}</text>')

    legend = []
    for i, s in enumerate(spec.series):
        color = PALETTE[i % len(PALETTE)]
        if xs:
            pts = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(xs, ys[s]))
            out.append(f'<polyline id="series-{i}" fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        legend.append((s, color, "line"))
    for j, (m, label) in enumerate(spec.markers.items()):
        color = "black" if j == 0 else "#d62728"
        if xs:
            # a marker column holds a series index; dot sits on that series' value
            out.append(f'<g id="marker-{j}" fill="{color}">')
            for n, (r, x) in enumerate(zip(rows, xs)):
                k = int(float(r[col[m]]))
                if 0 <= k < len(spec.series):
                    out.append(f'<circle cx="{_fmt(px(x))}" cy="{_fmt(py(ys[spec.series[k]][n]))}" '
                               f'r="{2.5 + 1.5 * (j == 0):.1f}"/>')
            out.append('</g>')
        legend.append((label, color, "dot"))
    if legend:
        out.append('<g id="legend">')
        lx = L + pw + 15
        for i, (name, color, kind) in enumerate(legend):
            y = T + 10 + 16 * i
            if kind == "line":
                out.append(f'<line x1="{lx}" y1="{y}" x2="{lx + 20}" y2="{y}" stroke="{color}" stroke-width="2"/>')
            else:
                out.append(f'<circle cx="{lx + 10}" cy="{y}" r="3" fill="{color}"/>')
            out.append(f'<text x="{lx + 26}" y="{y + 4}">{escape(name)}</text>')
        out.append('</g>')
    out.append('</svg>')
    return "\n".join(out) + "\n"


def render_plot(csv_path, spec: PlotSpec, out_path=None) -> str:
    header, rows = read_csv(csv_path)
    svg = render_svg(header, rows, spec)
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(svg)
    return svg
