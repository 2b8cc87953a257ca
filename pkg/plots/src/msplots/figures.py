"""Figure builders for the inversion pipeline's CSV exports.

Five figure kinds are supported, selected by the ``kind`` field of a figure
spec (a JSON document or dict):

  field-map     panels of cellwise fields from a field-stats CSV
  gradient-map  spatial gradient magnitude of selected field columns
  slice-band    credible/prediction bands along a response slice
  hist-ecdf-qq  per-component distribution panels from the chain exports
  decay-curve   log-scale decay of the forward error and KL divergence

Rendering never recomputes statistics; every curve comes straight from the
CSV columns.  The one sanctioned exception is the gradient map, which applies
central differences to an exported mean field for display.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

FIGURE_KINDS = ("field-map", "gradient-map", "slice-band", "hist-ecdf-qq",
                "decay-curve")


class InputSchemaError(ValueError):
    """An input CSV is missing a required column."""


def read_table(path) -> dict:
    """CSV as a dict of float columns keyed by header name."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row]
    data = np.array(rows, dtype=float)
    return {name: data[:, i] for i, name in enumerate(header)}


def need(table: dict, column: str, path) -> np.ndarray:
    if column not in table:
        raise InputSchemaError(f"missing column {column!r} in {path}")
    return table[column]


def _cell_grid(table, path):
    xs = np.unique(need(table, "x", path))
    ys = np.unique(need(table, "y", path))
    return xs, ys


def _as_image(table, column, path):
    xs, ys = _cell_grid(table, path)
    vals = need(table, column, path)
    if vals.size != xs.size * ys.size:
        raise InputSchemaError(
            f"column {column!r} in {path} is not a full grid")
    return vals.reshape(ys.size, xs.size), (xs[0], xs[-1], ys[0], ys[-1])


def field_map_figure(spec) -> plt.Figure:
    path = spec["inputs"]["stats"]
    table = read_table(path)
    groups = spec.get("panels", [["truth", "mean"], ["std"]])
    columns = [c for grp in groups for c in grp]
    fig, axes = plt.subplots(1, len(columns), figsize=(4 * len(columns), 3.4),
                             constrained_layout=True)
    axes = np.atleast_1d(axes)
    k = 0
    for grp in groups:
        images = {c: _as_image(table, c, path) for c in grp}
        lo = min(img.min() for img, _ in images.values())
        hi = max(img.max() for img, _ in images.values())
        for c in grp:
            img, extent = images[c]
            im = axes[k].imshow(img, origin="lower", extent=extent,
                                vmin=lo, vmax=hi, cmap=spec.get("cmap", "viridis"))
            axes[k].set_title(c.replace("_", " "))
            fig.colorbar(im, ax=axes[k], shrink=0.85)
            k += 1
    fig.suptitle(spec.get("title", "log-permeability field"))
    return fig


def gradient_map_figure(spec) -> plt.Figure:
    path = spec["inputs"]["stats"]
    table = read_table(path)
    columns = spec.get("columns", ["truth", "mean"])
    fig, axes = plt.subplots(1, len(columns), figsize=(4 * len(columns), 3.4),
                             constrained_layout=True)
    axes = np.atleast_1d(axes)
    mags = {}
    for c in columns:
        img, extent = _as_image(table, c, path)
        gy, gx = np.gradient(img)
        mags[c] = (np.hypot(gx, gy), extent)
    lo = min(m.min() for m, _ in mags.values())
    hi = max(m.max() for m, _ in mags.values())
    for ax, c in zip(axes, columns):
        mag, extent = mags[c]
        im = ax.imshow(mag, origin="lower", extent=extent, vmin=lo, vmax=hi,
                       cmap=spec.get("cmap", "magma"))
        ax.set_title(f"|grad {c.replace('_', ' ')}|")
        fig.colorbar(im, ax=ax, shrink=0.85)
    fig.suptitle(spec.get("title", "spatial gradient"))
    return fig


def slice_band_figure(spec) -> plt.Figure:
    path = spec["inputs"]["slice"]
    table = read_table(path)
    coord = need(table, "coord", path)
    fig, ax = plt.subplots(figsize=(6, 4), constrained_layout=True)
    ax.fill_between(coord, need(table, "predictive_lo", path),
                    need(table, "predictive_hi", path), alpha=0.2,
                    color="tab:orange", label="95% prediction")
    ax.fill_between(coord, need(table, "credible_lo", path),
                    need(table, "credible_hi", path), alpha=0.35,
                    color="tab:blue", label="95% credible")
    ax.plot(coord, need(table, "median", path), color="tab:blue", lw=1.2,
            label="posterior median")
    ax.plot(coord, need(table, "reference", path), "k--", lw=1.2,
            label="reference")
    ax.set_xlabel(spec.get("xlabel", "coordinate"))
    ax.set_ylabel(spec.get("ylabel", "pressure"))
    ax.legend(loc="best", fontsize=8)
    ax.set_title(spec.get("title", "response slice"))
    return fig


def hist_ecdf_qq_figure(spec) -> plt.Figure:
    inputs = spec["inputs"]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6), constrained_layout=True)

    qq = read_table(inputs["qq"])
    axes[0].plot(need(qq, "theoretical", inputs["qq"]),
                 need(qq, "sample", inputs["qq"]), ".", ms=2)
    lims = [qq["theoretical"].min(), qq["theoretical"].max()]
    axes[0].plot(lims, lims, "r--", lw=1)
    axes[0].set_title("normal quantile-quantile")

    hist = read_table(inputs["hist"])
    left = need(hist, "bin_left", inputs["hist"])
    right = need(hist, "bin_right", inputs["hist"])
    axes[1].bar(left, need(hist, "count", inputs["hist"]),
                width=right - left, align="edge", color="tab:blue",
                edgecolor="white")
    axes[1].set_title("histogram")

    ecdf = read_table(inputs["ecdf"])
    axes[2].step(need(ecdf, "value", inputs["ecdf"]),
                 need(ecdf, "cdf", inputs["ecdf"]), where="post")
    axes[2].set_title("empirical cdf")
    fig.suptitle(spec.get("title", "posterior component distribution"))
    return fig


def decay_curve_figure(spec) -> plt.Figure:
    path = spec["inputs"]["decay"]
    table = read_table(path)
    x = need(table, "n_local_basis", path)
    fig, ax = plt.subplots(figsize=(6, 4), constrained_layout=True)
    ax.semilogy(x, need(table, "e_l2", path), "o-", color="tab:blue",
                label=r"forward error $E_{L_2}$")
    ax.semilogy(x, need(table, "d_kl", path), "s--", color="tab:red",
                label=r"$D_{KL}$")
    if "e_l2_se" in table and "d_kl_se" in table:
        ax.errorbar(x, table["e_l2"], yerr=table["e_l2_se"], fmt="none",
                    ecolor="tab:blue", capsize=3)
        ax.errorbar(x, np.abs(table["d_kl"]), yerr=table["d_kl_se"], fmt="none",
                    ecolor="tab:red", capsize=3)
    ax.set_xticks(x)
    ax.set_xlabel("multiscale basis functions per neighborhood")
    ax.legend()
    ax.set_title(spec.get("title", "surrogate convergence"))
    return fig


_BUILDERS = {
    "field-map": field_map_figure,
    "gradient-map": gradient_map_figure,
    "slice-band": slice_band_figure,
    "hist-ecdf-qq": hist_ecdf_qq_figure,
    "decay-curve": decay_curve_figure,
}


def build_figure(spec) -> plt.Figure:
    """Figure object for a spec dict (no file written)."""
    kind = spec.get("kind")
    if kind not in _BUILDERS:
        raise ValueError(f"unknown figure kind {kind!r}; expected one of "
                         f"{FIGURE_KINDS}")
    missing = [p for p in spec.get("inputs", {}).values() if not Path(p).exists()]
    if missing:
        raise FileNotFoundError(f"figure inputs do not exist: {missing}")
    return _BUILDERS[kind](spec)


def render(spec) -> Path:
    """Render a figure spec (dict or JSON path) to its output image."""
    if not isinstance(spec, dict):
        spec = json.loads(Path(spec).read_text())
    fig = build_figure(spec)
    out = Path(spec.get("output", "figure.png"))
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=spec.get("dpi", 150))
    plt.close(fig)
    return out
