"""End-to-end CLI commands on the smoke configuration."""

import csv
import hashlib
import json
import shutil
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from msinvert.cli import main


@pytest.fixture(scope="module")
def smoke_config(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    path = root / "smoke.json"
    with resources.files("msinvert.configs").joinpath("smoke.json").open() as fh:
        raw = json.load(fh)
    path.write_text(json.dumps(raw))
    return path


def read_csv(path):
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    return header, rows


class TestForwardCommand:
    def test_forward_outputs(self, smoke_config, tmp_path):
        out = tmp_path / "fw"
        assert main(["forward", "--config", str(smoke_config),
                     "--out", str(out)]) == 0
        for name in ("fine_trajectory.csv", "surrogate_trajectory.csv",
                     "observations.csv", "forward_summary.json",
                     "forward_manifest.json"):
            assert (out / name).exists()
        header, rows = read_csv(out / "fine_trajectory.csv")
        assert header[:2] == ["x", "y"]
        assert len(rows) == 21 * 21
        summary = json.loads((out / "forward_summary.json").read_text())
        assert summary["n_observations"] == 75
        assert summary["relative_observation_discrepancy"] < 0.2

    def test_malformed_config_reports_field(self, smoke_config, tmp_path, capsys):
        raw = json.loads(smoke_config.read_text())
        raw["forward"]["t_end"] = 0.1234
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(raw))
        code = main(["forward", "--config", str(bad), "--out", str(tmp_path / "o")])
        assert code == 2
        assert "t_end" in capsys.readouterr().err


class TestBuildBasisCommand:
    def test_idempotent_given_seed(self, smoke_config, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(["build-basis", "--config", str(smoke_config),
                     "--out", str(out_a)]) == 0
        assert main(["build-basis", "--config", str(smoke_config),
                     "--out", str(out_b)]) == 0
        ha = hashlib.sha256((out_a / "basis_library.npz").read_bytes()).hexdigest()
        hb = hashlib.sha256((out_b / "basis_library.npz").read_bytes()).hexdigest()
        assert ha == hb
        manifest = json.loads((out_a / "build_basis_manifest.json").read_text())
        assert manifest["library_sha256"] == ha

    def test_stale_library_rejected_later(self, smoke_config, tmp_path, capsys):
        out = tmp_path / "lib"
        main(["build-basis", "--config", str(smoke_config), "--out", str(out)])
        raw = json.loads(smoke_config.read_text())
        raw["fine_grid"] = [40, 40]
        raw["coarse_grid"] = [4, 4]
        other = tmp_path / "other.json"
        other.write_text(json.dumps(raw))
        code = main(["forward", "--config", str(other),
                     "--out", str(tmp_path / "x"),
                     "--library", str(out / "basis_library.npz")])
        assert code == 2

    def test_seed_override_changes_hash(self, smoke_config, tmp_path):
        out_a, out_b = tmp_path / "s0", tmp_path / "s1"
        main(["build-basis", "--config", str(smoke_config), "--out", str(out_a)])
        main(["build-basis", "--config", str(smoke_config), "--out", str(out_b),
              "--seed", "1"])
        ma = json.loads((out_a / "build_basis_manifest.json").read_text())
        mb = json.loads((out_b / "build_basis_manifest.json").read_text())
        assert ma["content_hash"] != mb["content_hash"]


class TestChainCommand:
    @pytest.fixture(scope="class")
    def chain_out(self, smoke_config, tmp_path_factory):
        out = tmp_path_factory.mktemp("chain")
        assert main(["chain", "--config", str(smoke_config),
                     "--out", str(out)]) == 0
        return out

    def test_products_exist(self, chain_out):
        for name in ("field_stats.csv", "trace.csv", "chain_summary.json",
                     "chain_checkpoint.npz", "chain_manifest.json",
                     "slice_0_line_y.csv", "slice_1_time.csv",
                     "component_0_hist.csv", "component_0_ecdf.csv",
                     "component_0_qq.csv"):
            assert (chain_out / name).exists(), name

    def test_field_stats_layout(self, chain_out):
        header, rows = read_csv(chain_out / "field_stats.csv")
        assert header[:5] == ["x", "y", "truth", "mean", "std"]
        assert header[-1] == "map_estimate"
        assert len(rows) == 400

    def test_summary_values(self, chain_out):
        summary = json.loads((chain_out / "chain_summary.json").read_text())
        assert 0.0 <= summary["acceptance_rate"] <= 1.0
        assert summary["n_steps"] == 100
        assert summary["misfit_at_truth_per_obs"] == pytest.approx(0.5, abs=0.35)

    def test_slice_bands_ordered(self, chain_out):
        header, rows = read_csv(chain_out / "slice_0_line_y.csv")
        arr = np.array(rows, dtype=float)
        cols = {h: arr[:, i] for i, h in enumerate(header)}
        assert np.all(cols["credible_lo"] <= cols["credible_hi"] + 1e-12)
        assert np.all(cols["predictive_lo"] <= cols["credible_lo"] + 1e-12)

    def test_composes_with_prebuilt_library(self, smoke_config, chain_out,
                                            tmp_path):
        lib_out = tmp_path / "lib"
        main(["build-basis", "--config", str(smoke_config), "--out", str(lib_out)])
        out = tmp_path / "chained"
        assert main(["chain", "--config", str(smoke_config), "--out", str(out),
                     "--library", str(lib_out / "basis_library.npz")]) == 0
        ours = (out / "chain_summary.json").read_text()
        theirs = (chain_out / "chain_summary.json").read_text()
        assert json.loads(ours)["acceptance_rate"] == \
            json.loads(theirs)["acceptance_rate"]


class TestDiagnoseCommand:
    def test_sweep_tables(self, smoke_config, tmp_path):
        raw = json.loads(smoke_config.read_text())
        raw["forward"]["boundary"] = {"type": "noflow"}
        raw["diagnose"] = {"m_values": [2], "n_values": [4],
                           "methods": ["mbar", "ens"], "n_test": 10,
                           "timing_evals": 3}
        del raw["chain"]
        cfg = tmp_path / "diag.json"
        cfg.write_text(json.dumps(raw))
        out = tmp_path / "diag"
        assert main(["diagnose", "--config", str(cfg), "--out", str(out)]) == 0
        header, rows = read_csv(out / "sweep_local_basis.csv")
        assert header == ["metric", "M=2"]
        metrics = {r[0] for r in rows}
        assert {"tau_ens", "eps_2_ens", "eps_inf_ens"} <= metrics
        header, rows = read_csv(out / "sweep_terms.csv")
        assert header == ["metric", "N=4"]

    def test_single_point_sweep_single_column(self, smoke_config, tmp_path):
        raw = json.loads(smoke_config.read_text())
        raw["forward"]["boundary"] = {"type": "noflow"}
        raw["diagnose"] = {"m_values": [2], "methods": ["ens"], "n_test": 10,
                           "timing_evals": 2}
        del raw["chain"]
        cfg = tmp_path / "single.json"
        cfg.write_text(json.dumps(raw))
        out = tmp_path / "single"
        assert main(["diagnose", "--config", str(cfg), "--out", str(out)]) == 0
        header, _ = read_csv(out / "sweep_local_basis.csv")
        assert len(header) == 2
