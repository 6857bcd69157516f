"""Metric charts: dependency-free standalone SVG plus matplotlib PNG companions."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"]


@dataclass(frozen=True)
class SvgLayout:
    width: float = 640.0
    height: float = 400.0
    left: float = 70.0
    right: float = 20.0
    top: float = 30.0
    bottom: float = 50.0

    @property
    def plot_w(self) -> float:
        return self.width - self.left - self.right

    @property
    def plot_h(self) -> float:
        return self.height - self.top - self.bottom


def _span(lo, hi):
    if hi > lo:
        return lo, hi
    pad = 0.5 if lo == 0 else 0.05 * abs(lo)
    return lo - pad, hi + pad


def plot_svg(series: dict, path, title: str = "", xlabel: str = "step", ylabel: str = "",
             layout: SvgLayout = SvgLayout()) -> Path:
    """One polyline per ``name -> (x, y)`` entry, sharing linear axes.

    Data maps affinely onto the plot box: x_min to ``left``, x_max to
    ``width - right``; y_min to ``height - bottom``, y_max to ``top``.
    Non-finite points are dropped.
    """
    clean = {}
    for name, (x, y) in series.items():
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        ok = np.isfinite(x) & np.isfinite(y)
        clean[name] = (x[ok], y[ok])
    xs = np.concatenate([x for x, _ in clean.values()]) if clean else np.zeros(0)
    ys = np.concatenate([y for _, y in clean.values()]) if clean else np.zeros(0)
    x0, x1 = _span(xs.min(), xs.max()) if xs.size else (0.0, 1.0)
    y0, y1 = _span(ys.min(), ys.max()) if ys.size else (0.0, 1.0)
    L = layout

    def px(x):
        return L.left + (x - x0) / (x1 - x0) * L.plot_w

    def py(y):
        return L.top + (y1 - y) / (y1 - y0) * L.plot_h

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{L.width:g}" height="{L.height:g}" '
        f'viewBox="0 0 {L.width:g} {L.height:g}">',
        f'<rect x="0" y="0" width="{L.width:g}" height="{L.height:g}" fill="white"/>',
        f'<rect x="{L.left:g}" y="{L.top:g}" width="{L.plot_w:g}" height="{L.plot_h:g}" '
        'fill="none" stroke="black" stroke-width="1"/>',
    ]
    for frac in (0.0, 0.5, 1.0):
        xv, yv = x0 + frac * (x1 - x0), y0 + frac * (y1 - y0)
        out.append(f'<text x="{px(xv):.3f}" y="{L.height - L.bottom + 16:g}" font-size="11" '
                   f'text-anchor="middle">{xv:.4g}</text>')
        out.append(f'<text x="{L.left - 6:g}" y="{py(yv) + 4:.3f}" font-size="11" '
                   f'text-anchor="end">{yv:.4g}</text>')
    out.append(f'<text x="{L.left + L.plot_w / 2:g}" y="{L.height - 10:g}" font-size="13" '
               f'text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{L.top + L.plot_h / 2:g}" font-size="13" text-anchor="middle" '
               f'transform="rotate(-90 16 {L.top + L.plot_h / 2:g})">{escape(ylabel)}</text>')
    if title:
        out.append(f'<text x="{L.width / 2:g}" y="20" font-size="14" text-anchor="middle">{escape(title)}</text>')
    for k, (name, (x, y)) in enumerate(clean.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{px(a):.6f},{py(b):.6f}" for a, b in zip(x, y))
        out.append(f'<polyline data-series="{escape(name)}" fill="none" stroke="{color}" '
                   f'stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{L.width - L.right - 4:g}" y="{L.top + 14 + 14 * k:g}" font-size="11" '
                   f'text-anchor="end" fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    path = Path(path)
    try:
        path.write_text("\n".join(out) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write plot {path}: {exc}") from exc
    return path


def plot_png(series: dict, path, title: str = "", xlabel: str = "step", ylabel: str = "") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for name, (x, y) in series.items():
        ax.plot(x, y, label=name, lw=1.5)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


DEFAULT_PANELS = {
    "reward": ["mean_raw_reward", "eval_reward"],
    "losses": ["crd_loss", "kl_loss"],
    "implicit_reward": ["implicit_reward_mean", "implicit_reward_std"],
    "kl_to_phi": ["kl_to_phi"],
}


def plot_metrics(metrics: dict[str, np.ndarray], out_dir, columns: list[str] | None = None,
                 png: bool = True) -> list[Path]:
    """Render metric panels (or one panel of the given columns) to SVG and PNG."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    panels = {"_".join(columns): columns} if columns else DEFAULT_PANELS
    written = []
    for name, cols in panels.items():
        missing = [c for c in cols if c not in metrics]
        if missing:
            raise KeyError(f"unknown metric columns {missing}")
        series = {c: (metrics["step"], metrics[c]) for c in cols}
        written.append(plot_svg(series, out_dir / f"{name}.svg", title=name, ylabel=name))
        if png:
            written.append(plot_png(series, out_dir / f"{name}.png", title=name, ylabel=name))
    return written
