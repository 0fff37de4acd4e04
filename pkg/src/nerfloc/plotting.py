"""Report figures.

Two back ends: a dependency-free SVG writer for the ``plot`` command, and
matplotlib PNG figures written next to the CSV output of train/eval/ablate.
"""

from __future__ import annotations

import csv
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=20, top=40, bottom=50)
PAD = 0.05
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


class PlotError(ValueError):
    pass


def padded_range(values) -> tuple[float, float]:
    """Data min/max widened by 5% of the span on each side."""
    lo, hi = float(np.min(values)), float(np.max(values))
    span = hi - lo
    if span == 0:
        span = abs(lo) if lo else 1.0
        return lo - PAD * span, hi + PAD * span
    return lo - PAD * span, hi + PAD * span


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise PlotError(f"{path}: empty CSV")
    header, body = rows[0], [r for r in rows[1:] if r]
    if not body:
        raise PlotError(f"{path}: CSV has a header but no data rows")
    for r in body:
        if len(r) != len(header):
            raise PlotError(f"{path}: row {r} does not match header {header}")
    return header, body


def _numeric(path, rows, col) -> np.ndarray:
    try:
        return np.array([float(r[col]) for r in rows])
    except ValueError as exc:
        raise PlotError(f"{path}: non-numeric value in column {col}: {exc}") from exc


class _Frame:
    def __init__(self, xr, yr):
        self.xr, self.yr = xr, yr
        self.x0 = MARGIN["left"]
        self.x1 = WIDTH - MARGIN["right"]
        self.y0 = HEIGHT - MARGIN["bottom"]
        self.y1 = MARGIN["top"]

    def x(self, v):
        return self.x0 + (v - self.xr[0]) / (self.xr[1] - self.xr[0]) * (self.x1 - self.x0)

    def y(self, v):
        return self.y0 - (v - self.yr[0]) / (self.yr[1] - self.yr[0]) * (self.y0 - self.y1)

    def axes(self, title, xlabel, ylabel) -> list[str]:
        xr, yr = self.xr, self.yr
        parts = [
            f'<g class="axes" data-xmin="{xr[0]!r}" data-xmax="{xr[1]!r}" '
            f'data-ymin="{yr[0]!r}" data-ymax="{yr[1]!r}">',
            f'<rect x="{self.x0}" y="{self.y1}" width="{self.x1 - self.x0}" height="{self.y0 - self.y1}" '
            'fill="none" stroke="#333"/>',
        ]
        for k in range(5):
            fx = xr[0] + (xr[1] - xr[0]) * k / 4
            fy = yr[0] + (yr[1] - yr[0]) * k / 4
            parts.append(f'<text x="{self.x(fx):.2f}" y="{self.y0 + 18}" font-size="11" '
                         f'text-anchor="middle">{fx:.3g}</text>')
            parts.append(f'<text x="{self.x0 - 6}" y="{self.y(fy) + 4:.2f}" font-size="11" '
                         f'text-anchor="end">{fy:.3g}</text>')
        parts.append(f'<text x="{(self.x0 + self.x1) / 2}" y="{HEIGHT - 10}" font-size="13" '
                     f'text-anchor="middle">{escape(xlabel)}</text>')
        parts.append(f'<text x="16" y="{(self.y0 + self.y1) / 2}" font-size="13" text-anchor="middle" '
                     f'transform="rotate(-90 16 {(self.y0 + self.y1) / 2})">{escape(ylabel)}</text>')
        parts.append(f'<text x="{WIDTH / 2}" y="24" font-size="15" text-anchor="middle">{escape(title)}</text>')
        parts.append("</g>")
        return parts


def _document(body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">')
    return "\n".join([head, f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>', *body, "</svg>"]) + "\n"


def line_chart_svg(x, y, title="", xlabel="epoch", ylabel="loss") -> str:
    x, y = np.asarray(x, float), np.asarray(y, float)
    frame = _Frame(padded_range(x), padded_range(y))
    pts = " ".join(f"{frame.x(a):.3f},{frame.y(b):.3f}" for a, b in zip(x, y))
    body = frame.axes(title, xlabel, ylabel)
    body.append(f'<polyline class="series" fill="none" stroke="{PALETTE[0]}" stroke-width="2" points="{pts}"/>')
    return _document(body)


def bar_chart_svg(variants, thresholds, values, title="mAP by IoU threshold") -> str:
    """Grouped bars: one group per threshold, one bar per variant."""
    values = np.asarray(values, float)  # (variants, thresholds)
    n_v, n_t = values.shape
    yr = padded_range(np.append(values.ravel(), 0.0))
    frame = _Frame((0.0, float(n_t)), yr)
    body = frame.axes(title, "IoU threshold", "mAP")
    width = 0.8 / n_v
    base = frame.y(max(yr[0], 0.0))
    for t in range(n_t):
        body.append(f'<text x="{frame.x(t + 0.5):.2f}" y="{frame.y0 + 34}" font-size="12" '
                    f'text-anchor="middle">IoU {escape(str(thresholds[t]))}</text>')
        for v in range(n_v):
            x = frame.x(t + 0.1 + v * width)
            top = frame.y(values[v, t])
            body.append(f'<rect class="bar" x="{x:.2f}" y="{min(top, base):.2f}" '
                        f'width="{frame.x(width) - frame.x(0):.2f}" height="{abs(base - top):.2f}" '
                        f'fill="{PALETTE[v % len(PALETTE)]}"><title>{escape(variants[v])}</title></rect>')
    for v, name in enumerate(variants):
        body.append(f'<text x="{frame.x1 - 4}" y="{frame.y1 + 14 + 14 * v}" font-size="11" text-anchor="end" '
                    f'fill="{PALETTE[v % len(PALETTE)]}">{escape(name)}</text>')
    return _document(body)


def plot_csv(path, out_dir, with_lr: bool = False) -> list[Path]:
    """Render one CSV (loss curve or metrics table) to SVG file(s) in ``out_dir``."""
    header, rows = read_csv(path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(path).stem
    written = []
    if header[:2] == ["epoch", "loss"]:
        epochs = _numeric(path, rows, 0)
        dest = out / f"{stem}_loss.svg"
        dest.write_text(line_chart_svg(epochs, _numeric(path, rows, 1), f"{stem}: training loss"))
        written.append(dest)
        if with_lr and len(header) > 2 and header[2] == "lr":
            dest = out / f"{stem}_lr.svg"
            dest.write_text(line_chart_svg(epochs, _numeric(path, rows, 2), f"{stem}: learning rate",
                                           ylabel="learning rate"))
            written.append(dest)
    elif header and header[0] == "variant":
        cols = [i for i, h in enumerate(header) if h.startswith("map_")]
        if not cols:
            raise PlotError(f"{path}: metrics CSV without map_ columns")
        thresholds = [header[i][4:] for i in cols]
        variants = [r[0] for r in rows]
        values = np.stack([_numeric(path, rows, i) for i in cols], axis=1)
        dest = out / f"{stem}_map.svg"
        dest.write_text(bar_chart_svg(variants, thresholds, values))
        written.append(dest)
    else:
        raise PlotError(f"{path}: unrecognised CSV header {header}")
    return written


# ---------------------------------------------------------------------------
# matplotlib figures for report directories


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update({"font.size": 10, "axes.grid": True, "grid.alpha": 0.3,
                         "svg.hashsalt": "nerfloc", "figure.dpi": 100})
    return plt


def figure_loss_curve(curve, path) -> Path:
    plt = _pyplot()
    epochs = [r[0] for r in curve]
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    ax.plot(epochs, [r[1] for r in curve], color=PALETTE[0], label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r[2] for r in curve], color=PALETTE[1], lw=1, ls="--", label="lr")
    ax2.set_ylabel("learning rate")
    ax2.grid(False)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def figure_map_bars(reports: dict, path) -> Path:
    """Grouped mAP bars for ``{variant: MetricsReport}``."""
    plt = _pyplot()
    names = list(reports)
    thresholds = list(next(iter(reports.values())).thresholds)
    fig, ax = plt.subplots(figsize=(max(6.4, 1.2 * len(names)), 3.6))
    width = 0.8 / (len(thresholds) + 1)
    xs = np.arange(len(names))
    for k, t in enumerate(thresholds):
        ax.bar(xs + k * width, [reports[n].map[t] for n in names], width, label=f"IoU {t:g}")
    ax.bar(xs + len(thresholds) * width, [reports[n].average for n in names], width, label="average",
           color="#555")
    ax.set_xticks(xs + width * len(thresholds) / 2)
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("mAP")
    ax.legend(fontsize=8, ncol=len(thresholds) + 1)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return Path(path)
