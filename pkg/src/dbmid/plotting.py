"""Figures for harness CSVs; the layout is chosen from the CSV header."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .blur_synthesis import BLUR_CLASSES  # noqa: E402
from .errors import ConfigurationError  # noqa: E402
from .harness import read_csv  # noqa: E402


def _groups(rows, key):
    out = {}
    for row in rows:
        out.setdefault(row[key], []).append(row)
    return out


def _curve(ax, rows, x, y, err, label):
    rows = sorted(rows, key=lambda r: float(r[x]))
    xs = [float(r[x]) for r in rows]
    ys = [float(r[y]) for r in rows]
    es = [float(r[err]) for r in rows] if err else None
    ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, label=label)


def _defocus(fig, rows):
    ax = fig.add_subplot(111)
    for method, group in _groups(rows, "method").items():
        _curve(ax, group, "radius_px", "ssim_mean", "ssim_std", method)
    ax.set_xlabel("defocus radius (px)")
    ax.set_ylabel("SSIM vs sharp")
    ax.legend()


def _motion(fig, rows):
    directions = sorted({r["direction"] for r in rows})
    for i, d in enumerate(directions):
        ax = fig.add_subplot(1, len(directions), i + 1)
        for method, group in _groups([r for r in rows if r["direction"] == d], "method").items():
            _curve(ax, group, "length_px", "fwhm_mean", "fwhm_std", method)
        ax.set_title(d)
        ax.set_xlabel("motion length (px)")
        ax.set_ylabel("spot FWHM (px)")
        ax.legend()


def _mixed(fig, rows):
    surfaces = list(_groups(rows, "surface"))
    radii = sorted({float(r["radius_px"]) for r in rows})
    lengths = sorted({float(r["length_px"]) for r in rows})
    for i, surface in enumerate(surfaces):
        grid = np.full((len(radii), len(lengths)), np.nan)
        for r in rows:
            if r["surface"] == surface:
                grid[radii.index(float(r["radius_px"])), lengths.index(float(r["length_px"]))] = float(r["ssim_mean"])
        ax = fig.add_subplot(1, len(surfaces), i + 1)
        im = ax.imshow(grid, origin="lower", vmin=0, vmax=1, cmap="viridis", aspect="auto")
        ax.set_xticks(range(len(lengths)), [f"{v:g}" for v in lengths])
        ax.set_yticks(range(len(radii)), [f"{v:g}" for v in radii])
        ax.set_xlabel("motion length (px)")
        ax.set_ylabel("defocus radius (px)")
        ax.set_title(surface)
    fig.colorbar(im, ax=fig.axes, shrink=0.8, label="SSIM")


def _classification(fig, rows):
    names = [c.value for c in BLUR_CLASSES]
    grid = np.zeros((4, 4), dtype=int)
    for r in rows:
        grid[names.index(r["predicted"]), names.index(r["actual"])] = int(r["count"])
    ax = fig.add_subplot(111)
    ax.imshow(grid, cmap="Blues")
    for i in range(4):
        for j in range(4):
            ax.text(j, i, str(grid[i, j]), ha="center", va="center")
    ax.set_xticks(range(4), names)
    ax.set_yticks(range(4), names)
    ax.set_xlabel("actual")
    ax.set_ylabel("predicted")


def _runtime(fig, rows):
    ax = fig.add_subplot(111)
    for method, group in _groups(rows, "method").items():
        group = sorted(group, key=lambda r: int(r["height"]) * int(r["width"]))
        xs = [int(r["height"]) * int(r["width"]) / 1e6 for r in group]
        ax.errorbar(xs, [float(r["median_s"]) for r in group], yerr=[float(r["iqr_s"]) / 2 for r in group],
                    marker="o", capsize=3, label=method)
    ax.set_xlabel("megapixels")
    ax.set_ylabel("median seconds")
    ax.legend()


PLOTTERS = {"defocus_sweep": (_defocus, (6, 4)), "motion_sweep": (_motion, (10, 4)),
            "mixed_grid": (_mixed, (16, 4)), "classification": (_classification, (5, 5)),
            "runtime": (_runtime, (6, 4))}


STYLE = {"defocus_sweep": "line", "motion_sweep": "line", "runtime": "line",
         "mixed_grid": "heatmap", "classification": "heatmap"}


def plot_csv(csv_path, out_path=None, style: str | None = None) -> Path:
    """Render the figure for a harness CSV; defaults to the CSV path with ``.png``.

    ``style`` ("line" or "heatmap") is optional and only checked against
    what the CSV header implies.
    """
    csv_path = Path(csv_path)
    kind, rows = read_csv(csv_path)
    if not rows:
        raise ConfigurationError(f"{csv_path}: no rows to plot")
    if style is not None and style != STYLE[kind]:
        raise ConfigurationError(f"{csv_path.name} is a {kind} table, drawn as {STYLE[kind]}, not {style}")
    out_path = Path(out_path) if out_path else csv_path.with_suffix(".png")
    draw, size = PLOTTERS[kind]
    fig = plt.figure(figsize=size, layout="constrained")
    try:
        draw(fig, rows)
        fig.suptitle(csv_path.stem)
        fig.savefig(out_path, dpi=100, metadata={"Software": None})
    finally:
        plt.close(fig)
    return out_path
