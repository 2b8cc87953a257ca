"""Run configuration: JSON schema, cross-field validation, and builders.

A single JSON document drives every CLI command.  Structural validation uses
jsonschema; semantic checks (grid nesting, observation times on the time-step
lattice, sensors inside the domain) run before any compute and report the
offending field path.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from jsonschema import Draft202012Validator

from .coarse_model import ForwardSpec, linear_boundary_values, uniform_sensor_grid
from .gmsfem import build_coarse_grid
from .mesh import FineMesh, build_fine_mesh, gaussian_plume
from .random_field import KernelParams


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


_SHAPE_SCHEMA = {
    "type": "object",
    "required": ["kind", "log_value"],
    "properties": {
        "kind": {"enum": ["disk", "ellipse", "rect", "heart"]},
        "log_value": {"type": "number"},
        "center": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        "radius": {"type": "number", "exclusiveMinimum": 0},
        "radii": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                  "minItems": 2, "maxItems": 2},
        "bounds": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
        "scale": {"type": "number", "exclusiveMinimum": 0},
    },
}

_GRID = {"type": "array", "items": {"type": "integer", "minimum": 2},
         "minItems": 2, "maxItems": 2}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["fine_grid", "coarse_grid", "kernel", "surrogate", "forward", "seed"],
    "additionalProperties": False,
    "properties": {
        "fine_grid": _GRID,
        "coarse_grid": _GRID,
        "seed": {"type": "integer", "minimum": 0},
        "out_dir": {"type": "string"},
        "kernel": {
            "type": "object",
            "required": ["variance", "length_x", "length_y"],
            "additionalProperties": False,
            "properties": {
                "variance": {"type": "number", "exclusiveMinimum": 0},
                "length_x": {"type": "number", "exclusiveMinimum": 0},
                "length_y": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "surrogate": {
            "type": "object",
            "required": ["n_local_basis", "n_terms", "n_train"],
            "additionalProperties": False,
            "properties": {
                "n_local_basis": {"type": "integer", "minimum": 1},
                "n_terms": {"type": "integer", "minimum": 1},
                "n_train": {"type": "integer", "minimum": 2},
            },
        },
        "forward": {
            "type": "object",
            "required": ["boundary", "source", "dt", "t_end", "sensors", "obs_times"],
            "additionalProperties": False,
            "properties": {
                "boundary": {
                    "type": "object",
                    "required": ["type"],
                    "properties": {
                        "type": {"enum": ["dirichlet", "noflow"]},
                        "coeffs": {"type": "array", "items": {"type": "number"},
                                   "minItems": 3, "maxItems": 3},
                    },
                },
                "source": {
                    "type": "object",
                    "required": ["center", "std", "weight"],
                    "additionalProperties": False,
                    "properties": {
                        "center": {"type": "array", "items": {"type": "number"},
                                   "minItems": 2, "maxItems": 2},
                        "std": {"type": "number", "exclusiveMinimum": 0},
                        "weight": {"type": "number"},
                    },
                },
                "storage": {"type": "number", "exclusiveMinimum": 0},
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "data_dt": {"type": "number", "exclusiveMinimum": 0},
                "t_end": {"type": "number", "exclusiveMinimum": 0},
                "sensors": {
                    "type": "object",
                    "properties": {
                        "grid": _GRID,
                        "bounds": {"type": "array", "items": {"type": "number"},
                                   "minItems": 2, "maxItems": 2},
                        "points": {"type": "array",
                                   "items": {"type": "array", "items": {"type": "number"},
                                             "minItems": 2, "maxItems": 2}},
                    },
                },
                "obs_times": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                              "minItems": 1},
            },
        },
        "truth": {
            "type": "object",
            "required": ["shapes"],
            "additionalProperties": False,
            "properties": {
                "background": {"type": "number"},
                "shapes": {"type": "array", "items": _SHAPE_SCHEMA},
            },
        },
        "chain": {
            "type": "object",
            "required": ["n_steps", "beta", "tv_weight", "sigma"],
            "additionalProperties": False,
            "properties": {
                "n_steps": {"type": "integer", "minimum": 1},
                "beta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "tv_weight": {"type": "number", "minimum": 0},
                "tv_eps": {"type": "number", "exclusiveMinimum": 0},
                "tv_on_log": {"type": "boolean"},
                "sigma": {"type": "number", "exclusiveMinimum": 0},
                "burn_in": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "thin": {"type": "integer", "minimum": 1},
                "checkpoint_every": {"type": "integer", "minimum": 0},
                "n_push": {"type": "integer", "minimum": 1},
                "components": {"type": "array", "items": {"type": "integer", "minimum": 0}},
            },
        },
        "slices": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["kind"],
                "properties": {
                    "kind": {"enum": ["line_x", "line_y", "time"]},
                    "x": {"type": "number"}, "y": {"type": "number"},
                    "t": {"type": "number"},
                    "n_points": {"type": "integer", "minimum": 2},
                },
            },
        },
        "diagnose": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "m_values": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "n_values": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "methods": {"type": "array", "items": {"enum": ["H", "mbar", "ens"]}},
                "n_test": {"type": "integer", "minimum": 10},
                "timing_evals": {"type": "integer", "minimum": 1},
                "kl": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "fine_grid": _GRID,
                        "coarse_grid": _GRID,
                        "m_values": {"type": "array",
                                     "items": {"type": "integer", "minimum": 1}},
                        "n_terms": {"type": "integer", "minimum": 1},
                        "n_train": {"type": "integer", "minimum": 2},
                        "sensors_grid": _GRID,
                        "obs_times": {"type": "array",
                                      "items": {"type": "number", "exclusiveMinimum": 0}},
                        "dt": {"type": "number", "exclusiveMinimum": 0},
                        "data_dt": {"type": "number", "exclusiveMinimum": 0},
                        "t_end": {"type": "number", "exclusiveMinimum": 0},
                        "sigma": {"type": "number", "exclusiveMinimum": 0},
                        "tv_weight": {"type": "number", "minimum": 0},
                        "beta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                        "chain_steps": {"type": "integer", "minimum": 100},
                        "n_mc": {"type": "integer", "minimum": 50},
                        "n_eval": {"type": "integer", "minimum": 10},
                    },
                },
            },
        },
    },
}


def _lattice_check(times, dt, path):
    steps = np.round(np.asarray(times, dtype=float) / dt)
    bad = np.flatnonzero(np.abs(steps * dt - times) > 1e-9)
    if bad.size:
        raise ConfigError(
            f"value {np.asarray(times)[bad[0]]} is not a multiple of dt={dt}",
            path=f"{path}[{bad[0]}]")


@dataclass
class RunConfig:
    """Validated configuration with typed builders for the pipeline objects."""

    raw: dict

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def fine_grid(self) -> tuple:
        return tuple(self.raw["fine_grid"])

    @property
    def coarse_grid(self) -> tuple:
        return tuple(self.raw["coarse_grid"])

    def content_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.raw, sort_keys=True).encode()).hexdigest()

    def kernel_params(self) -> KernelParams:
        k = self.raw["kernel"]
        return KernelParams(k["variance"], k["length_x"], k["length_y"])

    def build_mesh(self) -> FineMesh:
        return build_fine_mesh(*self.fine_grid)

    def build_grid(self, mesh: FineMesh):
        return build_coarse_grid(mesh, *self.coarse_grid)

    def sensor_points(self) -> np.ndarray:
        s = self.raw["forward"]["sensors"]
        if "points" in s:
            return np.asarray(s["points"], dtype=float)
        lo, hi = s.get("bounds", [0.05, 0.95])
        return uniform_sensor_grid(*s["grid"], lo=lo, hi=hi)

    def forward_spec(self, mesh: FineMesh, dt: float | None = None) -> ForwardSpec:
        f = self.raw["forward"]
        b = f["boundary"]
        g = None if b["type"] == "noflow" else linear_boundary_values(mesh, b["coeffs"])
        src = f["source"]
        return ForwardSpec(
            source=gaussian_plume(mesh, src["center"], src["std"], src["weight"]),
            dirichlet=g, storage=f.get("storage", 1.0),
            dt=f["dt"] if dt is None else dt, t_end=f["t_end"],
            sensors=self.sensor_points(),
            obs_times=np.asarray(f["obs_times"], dtype=float))

    def data_spec(self, mesh: FineMesh) -> ForwardSpec:
        """Forward spec at the data-generation time step (inverse-crime guard)."""
        return self.forward_spec(mesh, dt=self.raw["forward"].get(
            "data_dt", self.raw["forward"]["dt"]))

    def truth_xi(self, mesh: FineMesh) -> np.ndarray:
        if "truth" not in self.raw:
            raise ConfigError("command needs a truth descriptor", path="truth")
        return truth_field(mesh, self.raw["truth"])


def truth_field(mesh: FineMesh, truth: dict) -> np.ndarray:
    """Cellwise log-coefficient vector from a declarative shape list.

    Shapes are applied in order at the cell centers; later shapes override
    earlier ones, which is how nested targets are described.
    """
    centers = mesh.cell_centers()
    xi = np.full(mesh.n_cells, float(truth.get("background", 0.0)))
    for shape in truth["shapes"]:
        kind = shape["kind"]
        if kind == "disk":
            cx, cy = shape["center"]
            mask = (centers[:, 0] - cx) ** 2 + (centers[:, 1] - cy) ** 2 \
                <= shape["radius"] ** 2
        elif kind == "ellipse":
            cx, cy = shape["center"]
            rx, ry = shape["radii"]
            mask = ((centers[:, 0] - cx) / rx) ** 2 + ((centers[:, 1] - cy) / ry) ** 2 <= 1.0
        elif kind == "rect":
            x0, x1, y0, y1 = shape["bounds"]
            mask = ((centers[:, 0] >= x0) & (centers[:, 0] <= x1)
                    & (centers[:, 1] >= y0) & (centers[:, 1] <= y1))
        elif kind == "heart":
            cx, cy = shape["center"]
            s = shape["scale"]
            u = (centers[:, 0] - cx) / s
            v = (centers[:, 1] - cy) / s
            mask = (u ** 2 + v ** 2 - 1.0) ** 3 - u ** 2 * v ** 3 <= 0.0
        else:  # pragma: no cover - schema forbids
            raise ConfigError(f"unknown shape kind {kind!r}", path="truth.shapes")
        xi[mask] = float(shape["log_value"])
    return xi


def validate_config(raw: dict) -> RunConfig:
    """Structural and cross-field validation; raises ConfigError with paths."""
    validator = Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = ".".join(str(p) for p in err.absolute_path)
        raise ConfigError(err.message, path=path or "<root>")

    nx, ny = raw["fine_grid"]
    hx, hy = raw["coarse_grid"]
    if nx % hx or ny % hy:
        raise ConfigError(f"fine grid {nx}x{ny} does not nest in coarse {hx}x{hy}",
                          path="coarse_grid")
    f = raw["forward"]
    if f["boundary"]["type"] == "dirichlet" and "coeffs" not in f["boundary"]:
        raise ConfigError("dirichlet boundary needs 'coeffs'", path="forward.boundary")
    dt, t_end = f["dt"], f["t_end"]
    n = round(t_end / dt)
    if n < 1 or abs(n * dt - t_end) > 1e-9 * t_end:
        raise ConfigError(f"t_end={t_end} is not a positive multiple of dt={dt}",
                          path="forward.t_end")
    _lattice_check(f["obs_times"], dt, "forward.obs_times")
    if "data_dt" in f:
        _lattice_check(f["obs_times"], f["data_dt"], "forward.obs_times")
    if max(f["obs_times"]) > t_end + 1e-12:
        raise ConfigError("observation times exceed t_end", path="forward.obs_times")
    sensors = RunConfig(raw).sensor_points()
    if np.any(sensors < 0.0) or np.any(sensors > 1.0):
        raise ConfigError("sensors must lie inside the unit square",
                          path="forward.sensors")
    if "kl" in raw.get("diagnose", {}):
        kl = raw["diagnose"]["kl"]
        kfg, kcg = kl.get("fine_grid", [40, 40]), kl.get("coarse_grid", [4, 4])
        if kfg[0] % kcg[0] or kfg[1] % kcg[1]:
            raise ConfigError("KL study grids do not nest", path="diagnose.kl.fine_grid")
    return RunConfig(raw)


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    return validate_config(raw)
