"""Every figure kind renders from the shipped sample CSVs."""

import csv
import json
from pathlib import Path

import pytest

from msplots import InputSchemaError, build_figure, render

SAMPLES = Path(__file__).resolve().parents[1] / "samples"


def spec_for(kind, out):
    inputs = {
        "field-map": {"stats": str(SAMPLES / "field_stats.csv")},
        "gradient-map": {"stats": str(SAMPLES / "field_stats.csv")},
        "slice-band": {"slice": str(SAMPLES / "slice_line.csv")},
        "hist-ecdf-qq": {"hist": str(SAMPLES / "component_hist.csv"),
                         "ecdf": str(SAMPLES / "component_ecdf.csv"),
                         "qq": str(SAMPLES / "component_qq.csv")},
        "decay-curve": {"decay": str(SAMPLES / "kl_decay.csv")},
    }[kind]
    return {"kind": kind, "inputs": inputs, "output": str(out)}


@pytest.mark.parametrize("kind", ["field-map", "gradient-map", "slice-band",
                                  "hist-ecdf-qq", "decay-curve"])
def test_every_kind_renders(kind, tmp_path):
    out = render(spec_for(kind, tmp_path / f"{kind}.png"))
    assert out.exists()
    assert out.stat().st_size > 1000


def test_render_from_spec_file(tmp_path):
    spec = spec_for("slice-band", tmp_path / "fig.png")
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(spec))
    out = render(spec_path)
    assert out.exists()


def test_decay_curve_points_and_log_axis(tmp_path):
    # automated visual check: one plotted point per CSV row, log-scale y axis
    with open(SAMPLES / "kl_decay.csv") as fh:
        n_rows = sum(1 for _ in csv.reader(fh)) - 1
    fig = build_figure(spec_for("decay-curve", tmp_path / "d.png"))
    ax = fig.axes[0]
    assert ax.get_yscale() == "log"
    counts = [len(line.get_xdata()) for line in ax.get_lines()
              if len(line.get_xdata()) > 2]
    assert counts[:2] == [n_rows, n_rows]


def test_field_map_share_groups_share_color_scale(tmp_path):
    fig = build_figure(spec_for("field-map", tmp_path / "f.png"))
    images = [ax.images[0] for ax in fig.axes if ax.images]
    truth_mean = images[:2]
    assert truth_mean[0].get_clim() == truth_mean[1].get_clim()


def test_missing_column_names_it(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y,wrong\n0.5,0.5,1.0\n")
    spec = {"kind": "field-map", "inputs": {"stats": str(bad)},
            "output": str(tmp_path / "o.png")}
    with pytest.raises(InputSchemaError, match="truth"):
        build_figure(spec)


def test_missing_input_file_rejected(tmp_path):
    spec = {"kind": "decay-curve",
            "inputs": {"decay": str(tmp_path / "nope.csv")},
            "output": str(tmp_path / "o.png")}
    with pytest.raises(FileNotFoundError):
        build_figure(spec)


def test_unknown_kind_rejected(tmp_path):
    with pytest.raises(ValueError, match="kind"):
        build_figure({"kind": "pie", "inputs": {}})
