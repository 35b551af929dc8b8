"""Experiment drivers: error metrics, convergence studies and interpolation-rate checks."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import problems
from .dynamics import (
    WaveProblem,
    continuous_hamiltonian,
    energy_law_residual,
    hamiltonian_h,
    laplacian_commutation_defect,
)
from .integrator import CsvSeriesWriter, NewtonConfig, RunError, RunResult, run
from .mesh import MeshError, PolyMesh, generate_for_target_h, generate_voronoi, load_mesh
from .operators import LinearSolveConfig, MimeticOperators, assemble, energy_projection
from .spaces import CellField, interpolate_cell, norm_c, relative_error_c

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ConvergenceReport",
    "build_mesh",
    "metric_solution_error",
    "metric_hamiltonian_total",
    "metric_hamiltonian_drift",
    "metric_energy_law",
    "fit_slope",
    "run_experiment",
    "run_convergence_study",
    "h_study",
    "tau_study",
    "lemma_rate_checks",
]

log = logging.getLogger(__name__)

METRICS = ("E", "sigma", "delta", "epsilon")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """One (problem, mesh, tau) run.

    ``mesh`` is ``{"h": 0.1}``, ``{"n_seeds": 200}`` (both accept
    ``lloyd_iters`` and ``rng_seed``) or ``{"file": "mesh.json"}``.
    """

    test: str = "test1"
    mesh: dict = field(default_factory=lambda: {"h": 0.1})
    tau: float = 0.001
    T: float = 1.0
    newton_rtol: float = 1e-12
    newton_max_iter: int = 50
    linear_rtol: float = 1e-12
    out_dir: str | None = None
    cadence: int = 1

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not self.T >= 0:
            raise ConfigError(f"T must be non-negative, got {self.T}")
        if self.cadence < 1:
            raise ConfigError("cadence must be >= 1")
        if self.test not in ("test1", "test2", "zero", "custom"):
            raise ConfigError(f"unknown test {self.test!r}")
        m = self.mesh
        if not isinstance(m, dict):
            raise ConfigError("mesh source must be a mapping")
        kinds = [k for k in ("h", "n_seeds", "file") if k in m]
        if len(kinds) != 1:
            raise ConfigError("mesh source needs exactly one of 'h', 'n_seeds', 'file'")
        unknown = set(m) - {"h", "n_seeds", "file", "lloyd_iters", "rng_seed"}
        if unknown:
            raise ConfigError(f"unknown mesh keys {sorted(unknown)}")
        if "h" in m and not m["h"] > 0:
            raise ConfigError("target h must be positive")
        if "n_seeds" in m and not (isinstance(m["n_seeds"], int) and m["n_seeds"] >= 1):
            raise ConfigError("n_seeds must be a positive integer")

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        names = set(cls.__dataclass_fields__)
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        return asdict(self)

    @property
    def newton(self):
        return NewtonConfig(rtol=self.newton_rtol, max_iter=self.newton_max_iter)

    @property
    def solve(self):
        return LinearSolveConfig(rtol=self.linear_rtol)

    def problem(self, custom: WaveProblem | None = None):
        if self.test == "custom":
            if custom is None:
                raise ConfigError("test 'custom' needs a WaveProblem")
            return custom
        return problems.get(self.test, self.T)


_MESH_CACHE: dict = {}


def _mesh_key(source):
    return tuple(sorted(source.items()))


def build_mesh(source: dict) -> PolyMesh:
    """Mesh from a config mesh source; generated meshes are cached per source."""
    key = _mesh_key(source)
    if key in _MESH_CACHE:
        return _MESH_CACHE[key]
    lloyd = int(source.get("lloyd_iters", 100))
    seed = int(source.get("rng_seed", 0))
    if "file" in source:
        mesh = load_mesh(source["file"])
    elif "h" in source:
        mesh = generate_for_target_h(float(source["h"]), lloyd, seed)
    else:
        mesh = generate_voronoi(int(source["n_seeds"]), lloyd, seed)
    _MESH_CACHE[key] = mesh
    return mesh


def _ops_for(mesh, problem, solve, cache):
    key = (id(mesh), id(problem.K) if problem.K is not None else None)
    if key not in cache:
        cache[key] = (mesh, assemble(mesh, problem.K, solve))
    return cache[key][1]


# metrics


def metric_solution_error(state, problem: WaveProblem, mesh: PolyMesh) -> float:
    """E = ||u(T)^I - u_h^N||_C / ||u(T)^I||_C."""
    if problem.exact is None:
        raise ValueError(f"problem {problem.name!r} has no exact solution")
    t = state.t
    uT = interpolate_cell(lambda x, y: problem.exact.u(t, x, y), mesh)
    return relative_error_c(state.u, uT)


def metric_hamiltonian_total(state, problem: WaveProblem, mesh: PolyMesh, ops: MimeticOperators) -> float:
    """sigma = |H_h[u^N, v^N] - H[u0, v0]|."""
    return abs(hamiltonian_h(state.u, state.v, ops, problem.f) - continuous_hamiltonian(problem, mesh))


def metric_hamiltonian_drift(result: RunResult) -> float:
    """delta = |H_h at the last step - H_h at step 0| from the run's own series."""
    if not result.records:
        raise ValueError("run produced no steps")
    return abs(result.records[-1].H - result.H0)


def metric_energy_law(previous, final, tau, ops, problem) -> float:
    """epsilon = max over cells of the energy-law residual between steps N-1 and N."""
    if previous is None:
        raise ValueError("energy-law residual needs at least one step")
    return energy_law_residual(previous, final, tau, ops, problem.f)


def fit_slope(x, y):
    """Least-squares slope of log(y) against log(x); nan when fewer than 2 usable points."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = np.isfinite(x) & np.isfinite(y) & (x > 0) & (y > 0)
    if ok.sum() < 2 or np.unique(x[ok]).size < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


# runs and studies


@dataclass
class ConvergenceReport:
    """Rows of (h, tau, E, sigma, delta, epsilon) plus log-log slopes along ``axis``."""

    rows: list = field(default_factory=list)
    axis: str = "h"
    slopes: dict = field(default_factory=dict)

    COLUMNS = ("h", "tau", "E", "sigma", "delta", "epsilon", "status", "reason")

    def ok_rows(self):
        return [r for r in self.rows if r["status"] == "ok"]

    def compute_slopes(self):
        good = self.ok_rows()
        self.slopes = {}
        for m in METRICS:
            if len(good) < 2:
                self.slopes[m] = None
                continue
            s = fit_slope([r[self.axis] for r in good], [r[m] for r in good])
            self.slopes[m] = None if math.isnan(s) else s
        return self.slopes

    def column(self, name, only_ok=True):
        rows = self.ok_rows() if only_ok else self.rows
        return np.array([r[name] for r in rows], dtype=float)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r.get(c)) for c in self.COLUMNS])

    def to_dict(self):
        return {"axis": self.axis, "rows": self.rows, "slopes": self.slopes}

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, allow_nan=True))

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.write_csv(out / "report.csv")
        self.write_json(out / "report.json")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def run_experiment(config: ExperimentConfig, problem: WaveProblem | None = None,
                   ops_cache: dict | None = None, series_path=None) -> dict:
    """Run one configuration and return its report row (metrics that do not apply are None)."""
    prob = config.problem(problem)
    if config.T != prob.T:
        prob = replace(prob, T=config.T, check_derivatives=False)
    mesh = build_mesh(config.mesh)
    ops = _ops_for(mesh, prob, config.solve, {} if ops_cache is None else ops_cache)
    callbacks = []
    writer = CsvSeriesWriter(series_path) if series_path else None
    if writer:
        callbacks.append(writer)
    try:
        result = run(prob, mesh, config.tau, config.T, callbacks, config.newton, ops, config.cadence)
    finally:
        if writer:
            writer.close()
    row = {"h": float(mesh.h), "tau": float(config.tau), "n_cells": mesh.n_cells}
    final = result.final
    row["E"] = metric_solution_error(final, prob, mesh) if prob.exact is not None else None
    try:
        row["sigma"] = metric_hamiltonian_total(final, prob, mesh, ops)
    except ValueError:
        row["sigma"] = None
    row["delta"] = metric_hamiltonian_drift(result) if result.records else None
    row["epsilon"] = (
        metric_energy_law(result.previous, final, config.tau, ops, prob)
        if result.previous is not None else None
    )
    row["status"], row["reason"] = "ok", ""
    row["_result"] = result
    return row


def run_convergence_study(configs, axis="h", problem: WaveProblem | None = None,
                          out_dir=None) -> ConvergenceReport:
    """Run every configuration, collect metric rows and fit slopes along ``axis`` ("h" or "tau").

    Failed runs are kept as rows with ``status = "failed"`` and the reason;
    slopes use the surviving rows only.
    """
    if axis not in ("h", "tau"):
        raise ValueError("axis must be 'h' or 'tau'")
    configs = list(configs)
    if not configs:
        raise ValueError("a study needs at least one configuration")
    report = ConvergenceReport(axis=axis)
    ops_cache: dict = {}
    for cfg in configs:
        try:
            row = run_experiment(cfg, problem, ops_cache)
            row.pop("_result")
        except (RunError, MeshError, ValueError, OSError) as exc:
            log.error("run %s failed: %s", cfg, exc)
            row = {"h": None, "tau": cfg.tau, **{m: None for m in METRICS},
                   "status": "failed", "reason": str(exc)}
        report.rows.append(row)
    report.rows.sort(key=lambda r: -(r[axis] if r[axis] is not None else -math.inf))
    report.compute_slopes()
    if out_dir is not None:
        report.write(out_dir)
    return report


def h_study(h_targets, tau=0.001, T=1.0, test="test1", lloyd_iters=100, rng_seed=0,
            problem=None, out_dir=None, **kw) -> ConvergenceReport:
    configs = [
        ExperimentConfig(test=test, mesh={"h": h, "lloyd_iters": lloyd_iters, "rng_seed": rng_seed},
                         tau=tau, T=T, **kw)
        for h in h_targets
    ]
    return run_convergence_study(configs, "h", problem, out_dir)


def tau_study(taus, h=0.05, T=1.0, test="test2", lloyd_iters=100, rng_seed=0,
              problem=None, out_dir=None, **kw) -> ConvergenceReport:
    """Fixed mesh, varying tau; the same mesh realization is reused for every tau."""
    mesh = {"h": h, "lloyd_iters": lloyd_iters, "rng_seed": rng_seed}
    configs = [ExperimentConfig(test=test, mesh=mesh, tau=t, T=T, **kw) for t in taus]
    return run_convergence_study(configs, "tau", problem, out_dir)


# interpolation and projection rates


def _bump(x, y):
    return np.sin(np.pi * x) * np.sin(np.pi * y)


def _bump_laplacian(x, y):
    return -2.0 * np.pi**2 * _bump(x, y)


def lemma_rate_checks(meshes, u=_bump, lap_u=_bump_laplacian,
                      f_prime=lambda s: 3.0 * s * s, config=None) -> dict:
    """Observed rates on a mesh sequence for three interpolation quantities.

    - ``projection``: ||u^I - P_h u||_C, P_h the energy projection (expect order 2)
    - ``commutator``: ||f'(u)^I - f'(u^I)||_C (expect order 2; default f = s^3)
    - ``L``: ||(Delta u)^I - Delta_h u^I||_C, which does not converge in general

    ``lap_u`` is the analytic div(grad u); K = I.
    """
    meshes = list(meshes)
    hs, proj, comm, L = [], [], [], []
    for mesh in meshes:
        ops = assemble(mesh)
        ui = interpolate_cell(u, mesh)
        g = interpolate_cell(lap_u, mesh)
        p = energy_projection(ops, g, config)
        proj.append(norm_c(ui - p))
        fu = interpolate_cell(lambda x, y: f_prime(u(x, y)), mesh)
        comm.append(norm_c(fu - CellField(f_prime(ui.values), mesh)))
        L.append(laplacian_commutation_defect(u, lap_u, ops, config))
        hs.append(float(mesh.h))
    order = np.argsort(hs)[::-1]
    pick = lambda xs: [xs[i] for i in order]
    hs, proj, comm, L = pick(hs), pick(proj), pick(comm), pick(L)
    return {
        "h": hs,
        "projection": proj,
        "commutator": comm,
        "L": L,
        "slopes": {
            "projection": fit_slope(hs, proj),
            "commutator": fit_slope(hs, comm),
            "L": fit_slope(hs, L),
        },
        "L_ratio": L[-1] / L[0] if L and L[0] > 0 else float("nan"),
    }
