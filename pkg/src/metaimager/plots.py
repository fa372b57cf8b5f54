"""SVG figure emission from a results table.

Each panel is a standalone SVG built with ``xml.etree`` next to a CSV with
the same stem.  Every number drawn in the SVG (``data-*`` attributes and the
heatmap cell labels) is copied verbatim from that CSV.
"""
from __future__ import annotations

import csv
import math
import xml.etree.ElementTree as ET
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import aggregate

METRICS = ("accuracy", "overlap", "intensity_ratio", "on_ratio")
LINE_COLUMNS = ["mode", "x", "mean", "std", "n"]
HEAT_COLUMNS = ["mode", "train_level", "test_level", "mean", "std", "n", "label"]
COLORS = {"learned": "#1f77b4", "random": "#d62728"}

W, H = 480, 360
LEFT, RIGHT, TOP, BOTTOM = 64, 112, 36, 48


def _sibling(stem: Path, suffix: str) -> Path:
    return stem.parent / (stem.name + suffix)


def _num(x) -> str:
    return repr(float(x))


def _svg_root(title: str) -> ET.Element:
    root = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(W), height=str(H),
                      viewBox=f"0 0 {W} {H}")
    ET.SubElement(root, "rect", x="0", y="0", width=str(W), height=str(H), fill="white")
    t = ET.SubElement(root, "text", x=str(W / 2), y="20", attrib={"text-anchor": "middle", "font-size": "13"})
    t.text = title
    return root


def _write_svg(root: ET.Element, path: Path) -> None:
    ET.ElementTree(root).write(path, encoding="utf-8", xml_declaration=True)


class _Axis:
    def __init__(self, lo: float, hi: float, pix_lo: float, pix_hi: float, log: bool = False):
        self.log = log
        f = math.log10 if log else float
        self.lo, self.hi = f(lo), f(hi)
        if self.hi == self.lo:
            self.lo, self.hi = self.lo - 0.5, self.hi + 0.5
        self.pix_lo, self.pix_hi = pix_lo, pix_hi

    def __call__(self, v: float) -> float:
        v = math.log10(v) if self.log else v
        return self.pix_lo + (v - self.lo) / (self.hi - self.lo) * (self.pix_hi - self.pix_lo)


def _axes(root, xs: Sequence[float], xaxis: _Axis, yaxis: _Axis, xlabel: str, ylabel: str, ylo: float, yhi: float):
    x0, x1, y0, y1 = LEFT, W - RIGHT, H - BOTTOM, TOP
    ET.SubElement(root, "line", x1=str(x0), y1=str(y0), x2=str(x1), y2=str(y0), stroke="black")
    ET.SubElement(root, "line", x1=str(x0), y1=str(y0), x2=str(x0), y2=str(y1), stroke="black")
    for x in xs:
        px = xaxis(x)
        ET.SubElement(root, "line", x1=f"{px:.2f}", y1=str(y0), x2=f"{px:.2f}", y2=str(y0 + 4), stroke="black")
        t = ET.SubElement(root, "text", x=f"{px:.2f}", y=str(y0 + 16),
                          attrib={"class": "tick", "text-anchor": "middle", "font-size": "10"})
        t.text = f"{x:g}"
    for v in np.linspace(ylo, yhi, 5):
        py = yaxis(v)
        ET.SubElement(root, "line", x1=str(x0 - 4), y1=f"{py:.2f}", x2=str(x0), y2=f"{py:.2f}", stroke="black")
        t = ET.SubElement(root, "text", x=str(x0 - 6), y=f"{py + 3:.2f}",
                          attrib={"class": "tick", "text-anchor": "end", "font-size": "10"})
        t.text = f"{v:.3g}"
    t = ET.SubElement(root, "text", x=str((x0 + x1) / 2), y=str(H - 10), attrib={"text-anchor": "middle", "font-size": "11"})
    t.text = xlabel
    t = ET.SubElement(root, "text", x="14", y=str((y0 + y1) / 2),
                      attrib={"text-anchor": "middle", "font-size": "11", "transform": f"rotate(-90 14 {(y0 + y1) / 2})"})
    t.text = ylabel


def line_panel(series: dict, path_stem: Path, title: str, xlabel: str, ylabel: str, log_x: bool) -> tuple[Path, Path]:
    """``series`` maps mode -> list of (x, mean, std, n); NaN means are listed but not drawn."""
    csv_path, svg_path = _sibling(path_stem, ".csv"), _sibling(path_stem, ".svg")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LINE_COLUMNS)
        for mode, pts in series.items():
            for x, mean, std, n in pts:
                w.writerow([mode, _num(x), _num(mean), _num(std), n])

    finite = [(m, s) for pts in series.values() for _, m, s, _ in pts if math.isfinite(m)]
    ylo = min((m - s for m, s in finite), default=0.0)
    yhi = max((m + s for m, s in finite), default=1.0)
    pad = 0.05 * (yhi - ylo) or 0.05
    ylo, yhi = ylo - pad, yhi + pad
    xs = sorted({x for pts in series.values() for x, *_ in pts})
    xaxis = _Axis(min(xs), max(xs), LEFT + 16, W - RIGHT - 16, log=log_x)
    yaxis = _Axis(ylo, yhi, H - BOTTOM, TOP)

    root = _svg_root(title)
    _axes(root, xs, xaxis, yaxis, xlabel, ylabel, ylo, yhi)
    for idx, (mode, pts) in enumerate(series.items()):
        color = COLORS.get(mode, "#2ca02c")
        g = ET.SubElement(root, "g", attrib={"class": "series", "data-mode": mode})
        drawn = [(x, m, s) for x, m, s, _ in pts if math.isfinite(m)]
        if len(drawn) > 1:
            coords = " ".join(f"{xaxis(x):.2f},{yaxis(m):.2f}" for x, m, _ in drawn)
            ET.SubElement(g, "polyline", points=coords, fill="none", stroke=color)
        for x, m, s in drawn:
            px = xaxis(x)
            ET.SubElement(g, "line", x1=f"{px:.2f}", y1=f"{yaxis(m - s):.2f}", x2=f"{px:.2f}",
                          y2=f"{yaxis(m + s):.2f}", stroke=color)
            ET.SubElement(g, "circle", cx=f"{px:.2f}", cy=f"{yaxis(m):.2f}", r="3", fill=color,
                          attrib={"class": "marker", "data-x": _num(x), "data-mean": _num(m), "data-std": _num(s)})
        ly = TOP + 14 * (idx + 1)
        ET.SubElement(root, "rect", x=str(W - RIGHT + 10), y=str(ly - 8), width="10", height="10", fill=color)
        t = ET.SubElement(root, "text", x=str(W - RIGHT + 24), y=str(ly), attrib={"font-size": "11"})
        t.text = mode
    _write_svg(root, svg_path)
    return svg_path, csv_path


def heatmap_panel(cells: list, path_stem: Path, title: str) -> tuple[Path, Path]:
    """``cells`` is a list of (mode, train_level, test_level, mean, std, n) for one mode."""
    csv_path, svg_path = _sibling(path_stem, ".csv"), _sibling(path_stem, ".svg")
    rows = [(mode, tr, te, m, s, n, f"{m:.3f}") for mode, tr, te, m, s, n in cells]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEAT_COLUMNS)
        for mode, tr, te, m, s, n, label in rows:
            w.writerow([mode, _num(tr), _num(te), _num(m), _num(s), n, label])

    trains = sorted({r[1] for r in rows})
    tests = sorted({r[2] for r in rows})
    cw = (W - LEFT - RIGHT) / len(tests)
    ch = (H - TOP - BOTTOM) / len(trains)
    root = _svg_root(title)
    for mode, tr, te, m, s, n, label in rows:
        i, j = trains.index(tr), tests.index(te)
        x = LEFT + j * cw
        y = H - BOTTOM - (i + 1) * ch
        shade = int(255 * (1 - min(max(m, 0.0), 1.0)))
        ET.SubElement(root, "rect", x=f"{x:.2f}", y=f"{y:.2f}", width=f"{cw:.2f}", height=f"{ch:.2f}",
                      fill=f"rgb({shade},{shade},255)", stroke="white",
                      attrib={"class": "cell", "data-train": _num(tr), "data-test": _num(te),
                              "data-mean": _num(m), "data-std": _num(s)})
        t = ET.SubElement(root, "text", x=f"{x + cw / 2:.2f}", y=f"{y + ch / 2 + 4:.2f}",
                          attrib={"class": "value", "text-anchor": "middle", "font-size": "11"})
        t.text = label
    for j, te in enumerate(tests):
        t = ET.SubElement(root, "text", x=f"{LEFT + (j + 0.5) * cw:.2f}", y=str(H - BOTTOM + 16),
                          attrib={"class": "tick", "text-anchor": "middle", "font-size": "10"})
        t.text = f"{te:g}"
    for i, tr in enumerate(trains):
        t = ET.SubElement(root, "text", x=str(LEFT - 6), y=f"{H - BOTTOM - (i + 0.5) * ch + 3:.2f}",
                          attrib={"class": "tick", "text-anchor": "end", "font-size": "10"})
        t.text = f"{tr:g}"
    t = ET.SubElement(root, "text", x=str((LEFT + W - RIGHT) / 2), y=str(H - 10), attrib={"text-anchor": "middle", "font-size": "11"})
    t.text = "test level"
    t = ET.SubElement(root, "text", x="14", y=str(H / 2),
                      attrib={"text-anchor": "middle", "font-size": "11", "transform": f"rotate(-90 14 {H / 2})"})
    t.text = "trained level"
    _write_svg(root, svg_path)
    return svg_path, csv_path


def _aggregate_by(rows, keyfn, metric):
    groups = defaultdict(list)
    for r in rows:
        groups[keyfn(r)].append(getattr(r, metric))
    out = {}
    for k, vals in groups.items():
        finite = [v for v in vals if math.isfinite(v)]
        mean, std = aggregate(finite) if finite else (float("nan"), float("nan"))
        out[k] = (mean, std, len(finite))
    return out


def _drawable(series: dict) -> bool:
    return any(math.isfinite(p[1]) for pts in series.values() for p in pts)


def emit_plots(rows: Sequence, out_dir) -> list[Path]:
    """Write every panel the table supports; returns the written paths.

    Line panels use rows whose test level equals the trained level; a panel
    per M against noise level (log axis), and a panel per level against M
    when several M values are present.  Rows tested off their trained level
    produce one detuning heatmap per (kind, M, mode).
    """
    rows = list(rows)
    if not rows:
        raise ValueError("cannot plot an empty results table")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for kind in sorted({r.noise_kind for r in rows}):
        kind_rows = [r for r in rows if r.noise_kind == kind]
        matched = [r for r in kind_rows if r.test_level == r.train_level]
        ms = sorted({r.M for r in matched})
        levels = sorted({r.train_level for r in matched})
        modes = sorted({r.mode for r in matched})
        for metric in METRICS:
            agg = _aggregate_by(matched, lambda r: (r.mode, r.M, r.train_level), metric)
            for m in ms:
                series = {mode: [(lv, *agg[(mode, m, lv)]) for lv in levels if (mode, m, lv) in agg] for mode in modes}
                series = {k: v for k, v in series.items() if v}
                if _drawable(series):
                    log_x = all(lv > 0 for lv in levels)
                    written += line_panel(series, out_dir / f"{metric}_vs_level_{kind}_M{m}",
                                          f"{metric} vs level ({kind}, M={m})", "noise level", metric, log_x)
            if len(ms) > 1:
                for lv in levels:
                    series = {mode: [(m, *agg[(mode, m, lv)]) for m in ms if (mode, m, lv) in agg] for mode in modes}
                    series = {k: v for k, v in series.items() if v}
                    if _drawable(series):
                        written += line_panel(series, out_dir / f"{metric}_vs_M_{kind}_{lv!r}",
                                              f"{metric} vs M ({kind}, level={lv:g})", "M", metric, False)
        if any(r.test_level != r.train_level for r in kind_rows):
            agg = _aggregate_by(kind_rows, lambda r: (r.mode, r.M, r.train_level, r.test_level), "accuracy")
            for mode, m in sorted({(k[0], k[1]) for k in agg}):
                cells = [(mode, tr, te, *v) for (md, mm, tr, te), v in sorted(agg.items()) if md == mode and mm == m]
                written += heatmap_panel(cells, out_dir / f"detuning_heatmap_{kind}_M{m}_{mode}",
                                         f"detuning accuracy ({kind}, M={m}, {mode})")
    return written
