"""Command-line driver: forward runs, basis-library builds, chains, sweeps.

Every command validates its config up front, writes its outputs under the
run directory, and drops a JSON manifest (config hash, seeds, versions,
wall clock) so a run can be reproduced exactly.

Output formats
--------------
trajectory CSV      x, y, u_t<time>...           (one row per fine node)
observations CSV    time, x, y, <columns>        (one row per sensor/time)
field stats CSV     x, y, truth, mean, std, q*, map_estimate (one row per cell)
slice CSV           coord, reference, mean, median, credible/predictive bands
component CSVs      per-component histogram / ecdf / qq data
sweep CSVs          one metric per row, one column per swept value
decay CSV           n_local_basis, e_l2, e_l2_se, d_kl, d_kl_se, ...
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from dataclasses import replace

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .coarse_model import (ResponseSlice, assemble_coarse, fine_forward_map,
                           fine_response_slice, forward_map, response_slice,
                           solve_parabolic_coarse, uniform_sensor_grid)
from .diagnostics import derived_rng, forward_errors, kl_decay_study
from .ensemble import StochasticBasisLibrary, build_library
from .gmsfem import build_coarse_grid
from .inference import (ChainConfig, ObservationSet, TGPosterior,
                        component_distributions, posterior_stats, predict_intervals,
                        run_chain)
from .mesh import build_fine_mesh, solve_parabolic_fine
from .random_field import build_prior


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, cfg: RunConfig, t0: float, extra=None):
    manifest = {
        "command": command,
        "config_hash": cfg.content_hash(),
        "seed": cfg.seed,
        "version": __version__,
        "wall_clock_s": time.time() - t0,
        "outputs": sorted(p.name for p in out.iterdir() if p.is_file()),
    }
    if extra:
        manifest.update(extra)
    (out / f"{command}_manifest.json").write_text(json.dumps(manifest, indent=2))


def _trajectory_csv(path, mesh, times, traj):
    header = ["x", "y"] + [f"u_t{t:.6g}" for t in times]
    rows = np.column_stack([mesh.nodes, traj.T])
    _write_csv(path, header, rows.tolist())


def _ensure_library(cfg: RunConfig, mesh, grid, library_path=None):
    if library_path:
        lib = StochasticBasisLibrary.load(library_path)
        if not lib.matches(mesh, grid):
            raise ConfigError(
                f"library {library_path} was built for other grids", path="fine_grid")
        return lib
    s = cfg.raw["surrogate"]
    return build_library(mesh, grid, cfg.kernel_params(), s["n_local_basis"],
                         s["n_terms"], s["n_train"], seed=cfg.seed)


def cmd_forward(cfg: RunConfig, out: Path, library_path=None) -> None:
    """Fine and surrogate forward runs at the truth (or zero) parameter."""
    t0 = time.time()
    mesh = cfg.build_mesh()
    grid = cfg.build_grid(mesh)
    xi = cfg.truth_xi(mesh) if "truth" in cfg.raw else np.zeros(mesh.n_cells)
    spec = cfg.forward_spec(mesh)
    data_spec = cfg.data_spec(mesh)

    record_times = sorted(set(spec.obs_times.tolist()) | {spec.t_end})
    fine_steps = [round(t / data_spec.dt) for t in record_times]
    fine_traj = solve_parabolic_fine(mesh, xi, data_spec.problem(),
                                     record_steps=fine_steps)
    _trajectory_csv(out / "fine_trajectory.csv", mesh, record_times, fine_traj)

    lib = _ensure_library(cfg, mesh, grid, library_path)
    system = assemble_coarse(lib, xi)
    sur_steps = [round(t / spec.dt) for t in record_times]
    sur_traj = solve_parabolic_coarse(system, spec, record_steps=sur_steps)
    _trajectory_csv(out / "surrogate_trajectory.csv", mesh, record_times, sur_traj)

    d_fine = fine_forward_map(mesh, xi, data_spec)
    d_sur = forward_map(lib, xi, spec)
    rows = []
    k = 0
    for t in spec.obs_times:
        for sx, sy in spec.sensors:
            rows.append([t, sx, sy, d_fine[k], d_sur[k]])
            k += 1
    _write_csv(out / "observations.csv", ["time", "x", "y", "fine", "surrogate"], rows)

    rel = float(np.linalg.norm(d_fine - d_sur) / max(np.linalg.norm(d_fine), 1e-300))
    summary = {
        "relative_observation_discrepancy": rel,
        "max_field_difference": float(np.max(np.abs(fine_traj - sur_traj))),
        "n_observations": int(d_fine.size),
    }
    (out / "forward_summary.json").write_text(json.dumps(summary, indent=2))
    _write_manifest(out, "forward", cfg, t0, {"summary": summary})


def cmd_build_basis(cfg: RunConfig, out: Path) -> None:
    """Train the four template bases and write the library file."""
    t0 = time.time()
    mesh = cfg.build_mesh()
    grid = cfg.build_grid(mesh)
    lib = _ensure_library(cfg, mesh, grid)
    path = out / "basis_library.npz"
    lib.save(path)
    _write_manifest(out, "build_basis", cfg, t0, {
        "library_file": path.name,
        "library_sha256": _file_sha256(path),
        "content_hash": lib.content_hash,
        "training_tails": {k: tb.training_tail for k, tb in lib.templates.items()},
    })


def cmd_chain(cfg: RunConfig, out: Path, library_path=None) -> None:
    """Synthetic data, pCN sampling with the surrogate, statistics exports."""
    t0 = time.time()
    if "chain" not in cfg.raw:
        raise ConfigError("chain command needs a 'chain' section", path="chain")
    mesh = cfg.build_mesh()
    grid = cfg.build_grid(mesh)
    lib = _ensure_library(cfg, mesh, grid, library_path)
    spec = cfg.forward_spec(mesh)
    data_spec = cfg.data_spec(mesh)
    truth = cfg.truth_xi(mesh)
    ch = cfg.raw["chain"]
    sigma = ch["sigma"]

    noise_rng = derived_rng(cfg.seed, "noise")
    d_clean = fine_forward_map(mesh, truth, data_spec)
    data = d_clean + sigma * noise_rng.standard_normal(d_clean.size)
    obs = ObservationSet(sensors=spec.sensors, times=spec.obs_times,
                         values=data, sigma=sigma)

    prior = build_prior(mesh, cfg.kernel_params())
    post = TGPosterior(obs, lambda xi: forward_map(lib, xi, spec), prior, mesh,
                       tv_weight=ch["tv_weight"], tv_eps=ch.get("tv_eps", 1e-3),
                       tv_on_log=ch.get("tv_on_log", True))
    chain_cfg = ChainConfig(
        n_steps=ch["n_steps"], beta=ch["beta"],
        seed=int(derived_rng(cfg.seed, "chain").integers(2 ** 31)),
        burn_in=ch.get("burn_in", 0.5), thin=ch.get("thin", 1),
        checkpoint_every=ch.get("checkpoint_every", 0),
        checkpoint_path=str(out / "chain_checkpoint.npz"))
    chain = run_chain(post, chain_cfg)

    n_kept = chain.kept_after_burn_in().shape[0]
    stats = posterior_stats(chain, prior=prior, min_samples=min(100, n_kept))
    centers = mesh.cell_centers()
    header = ["x", "y", "truth", "mean", "std"] + \
        [f"q{q:g}" for q in stats.quantiles] + ["map_estimate"]
    rows = np.column_stack([centers, truth, stats.mean, stats.std]
                           + [stats.quantiles[q] for q in stats.quantiles]
                           + [stats.map_state])
    _write_csv(out / "field_stats.csv", header, rows.tolist())

    _write_csv(out / "trace.csv", ["step", "potential", "accepted"],
               [[i, p, int(a)] for i, (p, a) in enumerate(
                   zip(chain.potentials[1:], chain.accepts), start=1)])

    for comp, dist in component_distributions(
            chain, ch.get("components", [])).items():
        base = out / f"component_{comp}"
        _write_csv(f"{base}_hist.csv", ["bin_left", "bin_right", "count"],
                   np.column_stack([dist["hist_edges"][:-1], dist["hist_edges"][1:],
                                    dist["hist_counts"]]).tolist())
        _write_csv(f"{base}_ecdf.csv", ["value", "cdf"],
                   np.column_stack([dist["ecdf_x"], dist["ecdf_y"]]).tolist())
        _write_csv(f"{base}_qq.csv", ["theoretical", "sample"],
                   np.column_stack([dist["qq_theoretical"], dist["qq_sample"]]).tolist())

    for i, raw_slc in enumerate(cfg.raw.get("slices", [])):
        slc = ResponseSlice(**raw_slc)
        bands = predict_intervals(
            chain, lambda xi: response_slice(lib, xi, spec, slc), sigma,
            n_push=ch.get("n_push", 100))
        _, reference = fine_response_slice(mesh, truth, data_spec, ResponseSlice(
            **{**raw_slc, "n_points": raw_slc.get("n_points", 81)}))
        if reference.size != bands.coords.size:   # time slices on different dt lattices
            src = np.linspace(0.0, 1.0, reference.size)
            dst = np.linspace(0.0, 1.0, bands.coords.size)
            reference = np.interp(dst, src, reference)
        _write_csv(out / f"slice_{i}_{slc.kind}.csv",
                   ["coord", "reference", "mean", "median",
                    "credible_lo", "credible_hi", "predictive_lo", "predictive_hi"],
                   np.column_stack([bands.coords, reference, bands.mean, bands.median,
                                    bands.credible_lo, bands.credible_hi,
                                    bands.predictive_lo, bands.predictive_hi]).tolist())

    summary = {
        "acceptance_rate": chain.acceptance_rate,
        "n_steps": chain.n_steps,
        "kept_samples": int(chain.kept_after_burn_in().shape[0]),
        "misfit_at_truth_per_obs": float(
            ((data - d_clean) @ (data - d_clean)) / (2 * sigma ** 2) / data.size),
        "map_log_density": stats.map_log_density,
        "chain_seed": chain_cfg.seed,
    }
    (out / "chain_summary.json").write_text(json.dumps(summary, indent=2))
    _write_manifest(out, "chain", cfg, t0, {"summary": summary})


def _sweep_csv(path, sweep_name, values, metric_rows):
    header = ["metric"] + [f"{sweep_name}={v}" for v in values]
    _write_csv(path, header, metric_rows)


def cmd_diagnose(cfg: RunConfig, out: Path) -> None:
    """Error/timing sweep tables and the KL/L2 decay study."""
    t0 = time.time()
    diag = cfg.raw.get("diagnose", {})
    if not diag:
        raise ConfigError("diagnose command needs a 'diagnose' section", path="diagnose")
    mesh = cfg.build_mesh()
    grid = cfg.build_grid(mesh)
    params = cfg.kernel_params()
    spec = cfg.forward_spec(mesh)
    s = cfg.raw["surrogate"]
    n_test = diag.get("n_test", 100)
    methods = tuple(diag.get("methods", ["H", "mbar", "ens"]))
    timing_evals = diag.get("timing_evals", 50)
    prior = build_prior(mesh, params)
    summary = {}

    if "m_values" in diag:
        m_values = diag["m_values"]
        reports = []
        for m in m_values:
            lib = build_library(mesh, grid, params, m, s["n_terms"], s["n_train"],
                                seed=cfg.seed)
            reports.append(forward_errors(lib, spec, methods=methods,
                                          n_samples=n_test, seed=cfg.seed,
                                          prior=prior, timing_evals=timing_evals))
        rows = []
        for method in methods:
            rows.append([f"tau_{method}"] + [r.timings[method] for r in reports])
            rows.append([f"eps_inf_{method}"] + [r.eps_inf[method] for r in reports])
            rows.append([f"eps_2_{method}"] + [r.eps_2[method] for r in reports])
        _sweep_csv(out / "sweep_local_basis.csv", "M", m_values, rows)
        summary["m_sweep"] = {str(m): {method: r.eps_2[method] for method in methods}
                              for m, r in zip(m_values, reports)}

    if "n_values" in diag:
        n_values = diag["n_values"]
        reports = []
        for n in n_values:
            lib = build_library(mesh, grid, params, s["n_local_basis"], n,
                                s["n_train"], seed=cfg.seed)
            reports.append(forward_errors(lib, spec, methods=("mbar", "ens"),
                                          n_samples=n_test, seed=cfg.seed,
                                          prior=prior, timing_evals=timing_evals))
        rows = [["tau_ens"] + [r.timings["ens"] for r in reports],
                ["tau_mbar"] + [r.timings["mbar"] for r in reports],
                ["eps_inf_ens"] + [r.eps_inf["ens"] for r in reports],
                ["eps_2_ens"] + [r.eps_2["ens"] for r in reports]]
        _sweep_csv(out / "sweep_terms.csv", "N", n_values, rows)
        summary["n_sweep"] = {str(n): r.eps_2["ens"]
                              for n, r in zip(n_values, reports)}

    if "kl" in diag:
        kl = diag["kl"]
        kmesh = build_fine_mesh(*kl["fine_grid"]) if "fine_grid" in kl else mesh
        kgrid = build_coarse_grid(kmesh, *kl.get("coarse_grid", cfg.coarse_grid))
        kdt = kl.get("dt", cfg.raw["forward"]["dt"])
        kspec = cfg.forward_spec(kmesh, dt=kdt)
        updates = {"t_end": kl.get("t_end", kspec.t_end),
                   "obs_times": np.asarray(kl.get("obs_times", kspec.obs_times),
                                           dtype=float)}
        if "sensors_grid" in kl:
            updates["sensors"] = uniform_sensor_grid(*kl["sensors_grid"])
        kspec = replace(kspec, **updates)
        kdata_spec = kspec.with_dt(kl.get("data_dt", kdt))
        rows = kl_decay_study(
            kmesh, kgrid, params, cfg.truth_xi(kmesh), kspec, kdata_spec,
            sigma=kl.get("sigma", 0.1), tv_weight=kl.get("tv_weight", 1.0),
            tv_eps=cfg.raw.get("chain", {}).get("tv_eps", 1e-3),
            beta=kl.get("beta", 0.1), chain_steps=kl.get("chain_steps", 5000),
            m_values=kl.get("m_values", [2, 3, 4, 5]),
            n_terms=kl.get("n_terms", s["n_terms"]),
            n_train=kl.get("n_train", s["n_train"]),
            n_mc=kl.get("n_mc", 200), n_eval=kl.get("n_eval", 200),
            seed=cfg.seed)
        _write_csv(out / "kl_decay.csv", list(rows[0].keys()),
                   [list(r.values()) for r in rows])
        summary["kl_decay"] = rows

    (out / "diagnose_summary.json").write_text(json.dumps(summary, indent=2))
    _write_manifest(out, "diagnose", cfg, t0)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msinvert",
        description="Multiscale surrogate construction and Bayesian field identification")
    parser.add_argument("command",
                        choices=["forward", "build-basis", "chain", "diagnose"])
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--library", default=None,
                        help="existing basis-library file (forward/chain)")
    parser.add_argument("--threads", type=int, default=None,
                        help="reserved for parallel sample evaluation (default: serial)")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.raw["seed"] = args.seed
        out = Path(args.out or cfg.raw.get("out_dir", "runs/latest"))
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "forward":
            cmd_forward(cfg, out, library_path=args.library)
        elif args.command == "build-basis":
            cmd_build_basis(cfg, out)
        elif args.command == "chain":
            cmd_chain(cfg, out, library_path=args.library)
        elif args.command == "diagnose":
            cmd_diagnose(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
