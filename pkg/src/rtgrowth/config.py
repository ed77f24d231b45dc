"""Run configuration: a single JSON file, schema-validated before any compute."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError
from .params import PhysParams

SCHEMA_VERSION = 1

_ANALYTIC_FAMILIES = ("linear", "exponential", "bump")


@dataclass
class RunConfig:
    physics: PhysParams
    profile: dict
    mesh: dict
    solver: dict
    s_grid: dict
    evolution: dict
    jobs: int
    seed: int
    base_dir: str = "."
    raw: dict = field(default_factory=dict)

    def profile_spec(self) -> dict:
        """Density spec for build_steady_state, extents taken from the mesh."""
        spec = dict(self.profile)
        spec.pop("e_floor", None)
        lo, hi = self.mesh["extents"][-1]
        spec.setdefault("x3_min", lo)
        spec.setdefault("x3_max", hi)
        if spec.get("kind", "analytic") == "table" and "path" in spec:
            spec["path"] = os.path.join(self.base_dir, spec["path"])
        return spec

    @property
    def e_floor(self) -> float:
        return float(self.profile.get("e_floor", 0.1))


def _expect(cond: bool, path: str, msg: str):
    if not cond:
        raise ConfigError(f"{path}: {msg}")


def _positive(v, path):
    _expect(isinstance(v, (int, float)) and v > 0, path, f"must be positive, got {v!r}")
    return float(v)


def validate_config(data: dict, base_dir: str = ".") -> RunConfig:
    _expect(isinstance(data, dict), "$", "config must be a JSON object")
    _expect(data.get("schema_version") == SCHEMA_VERSION, "schema_version",
            f"must be {SCHEMA_VERSION}")

    phys = data.get("physics", {})
    _expect(isinstance(phys, dict), "physics", "must be an object")
    try:
        params = PhysParams(
            g=float(phys.get("g", 1.0)),
            gamma=float(phys.get("gamma", 5.0 / 3.0)),
            mu=float(phys.get("mu", 0.1)),
            lambda_v=float(phys.get("lambda_v", 0.1)),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"physics: {exc}") from exc

    prof = data.get("profile")
    _expect(isinstance(prof, dict), "profile", "must be an object")
    kind = prof.get("kind", "analytic")
    if kind == "analytic":
        fam = prof.get("family")
        _expect(fam in _ANALYTIC_FAMILIES, "profile.family",
                f"must be one of {_ANALYTIC_FAMILIES}, got {fam!r}")
    elif kind == "table":
        path = prof.get("path")
        _expect(isinstance(path, str), "profile.path", "must be a file path")
        full = os.path.join(base_dir, path)
        if not os.path.exists(full):
            raise ConfigError(f"profile.path: file not found: {full}")
    else:
        raise ConfigError(f"profile.kind: unknown kind {kind!r}")
    if "e_floor" in prof:
        _positive(prof["e_floor"], "profile.e_floor")

    mesh = data.get("mesh")
    _expect(isinstance(mesh, dict), "mesh", "must be an object")
    dim = mesh.get("dim")
    _expect(dim in (2, 3), "mesh.dim", "must be 2 or 3")
    ext = mesh.get("extents")
    _expect(isinstance(ext, list) and len(ext) == dim, "mesh.extents",
            f"must list {dim} [lo, hi] pairs")
    for i, e in enumerate(ext):
        _expect(isinstance(e, list) and len(e) == 2 and e[1] > e[0],
                f"mesh.extents[{i}]", "must be [lo, hi] with hi > lo")
    cells = mesh.get("cells")
    _expect(isinstance(cells, list) and len(cells) == dim
            and all(isinstance(c, int) and c >= 2 for c in cells),
            "mesh.cells", f"must list {dim} integers >= 2")

    solver = dict(data.get("solver", {}))
    solver.setdefault("tol", 1e-9)
    solver.setdefault("method", "auto")
    solver.setdefault("dense_cutoff", 700)
    solver.setdefault("s_max_guess", 64.0)
    _positive(solver["tol"], "solver.tol")
    _expect(solver["method"] in ("auto", "dense", "shift_invert"),
            "solver.method", f"unknown method {solver['method']!r}")

    s_grid = dict(data.get("s_grid", {}))
    if "values" in s_grid:
        vals = s_grid["values"]
        _expect(isinstance(vals, list) and all(
            isinstance(v, (int, float)) and v >= 0 for v in vals),
            "s_grid.values", "must be nonnegative numbers")
        _expect(all(b > a for a, b in zip(vals, vals[1:])),
                "s_grid.values", "must be strictly increasing")
    else:
        s_grid.setdefault("count", 12)
        s_grid.setdefault("max_factor", 2.0)
        _expect(int(s_grid["count"]) >= 2, "s_grid.count", "must be >= 2")
        _positive(s_grid["max_factor"], "s_grid.max_factor")

    evo = dict(data.get("evolution", {}))
    evo.setdefault("dt", 1e-3)
    evo.setdefault("n_efold", 2.0)
    evo.setdefault("deltas", [1e-5, 1e-4, 1e-3])
    evo.setdefault("eps_target", None)
    evo.setdefault("t_max", None)
    evo.setdefault("cfl", 0.4)
    evo.setdefault("seed_amplitude", 1e-6)
    evo.setdefault("record_every", 1)
    evo.setdefault("checkpoint_every", 0)
    _expect(isinstance(evo["checkpoint_every"], int)
            and evo["checkpoint_every"] >= 0,
            "evolution.checkpoint_every",
            "must be a nonnegative integer (0 disables checkpoints)")
    _positive(evo["dt"], "evolution.dt")
    _positive(evo["cfl"], "evolution.cfl")
    _expect(isinstance(evo["deltas"], list) and len(evo["deltas"]) >= 1
            and all(isinstance(d, (int, float)) and 0 < d < 1
                    for d in evo["deltas"]),
            "evolution.deltas", "must be amplitudes in (0, 1)")
    for key in ("eps_target", "t_max"):
        if evo[key] is not None:
            _positive(evo[key], f"evolution.{key}")

    jobs = data.get("jobs", 0)
    _expect(isinstance(jobs, int) and jobs >= 0, "jobs",
            "must be a nonnegative integer (0 = all cores)")
    if jobs == 0:
        jobs = os.cpu_count() or 1
    seed = data.get("seed", 0)
    _expect(isinstance(seed, int), "seed", "must be an integer")

    return RunConfig(params, dict(prof), mesh, solver, s_grid, evo,
                     jobs, seed, base_dir=base_dir, raw=data)


def load_config(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: "
                f"{exc.msg}") from exc
    return validate_config(data, base_dir=os.path.dirname(os.path.abspath(path)))
