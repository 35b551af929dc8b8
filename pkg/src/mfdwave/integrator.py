"""Implicit midpoint time stepping of the semi-discrete wave system.

Each step solves for the midpoint ``m = (u^{n+1} + u^n)/2`` of

    G(m) = 2 m - (tau^2/2) Delta_h m + (tau^2/2) f'(m) - 2 u^n - tau v^n = 0

by Newton's method. The Jacobian is made symmetric by scaling with M_C,

    M_C J = 2 M_C + (tau^2/2) A + (tau^2/2) M_C diag(f''(m)),   A = M_C (-Delta_h),

and solved with preconditioned conjugate gradient.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse.linalg as spla

from .dynamics import DiagnosticsRecord, WaveProblem, energy_law_residuals, hamiltonian_h
from .mesh import PolyMesh
from .operators import MimeticOperators, SolveError, assemble
from .spaces import CellField, interpolate_cell

__all__ = [
    "SimState",
    "NewtonConfig",
    "StepError",
    "RunError",
    "RunResult",
    "sim_step",
    "initial_state",
    "run",
    "CsvSeriesWriter",
    "save_checkpoint",
    "load_checkpoint",
]

log = logging.getLogger(__name__)


class StepError(RuntimeError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class RunError(RuntimeError):
    def __init__(self, message, n, t):
        super().__init__(message)
        self.n = n
        self.t = t


@dataclass(frozen=True)
class NewtonConfig:
    rtol: float = 1e-12
    atol: float = 1e-14
    max_iter: int = 50
    linear_rtol: float = 1e-13
    divergence_factor: float = 1e4

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0 and self.linear_rtol > 0):
            raise ValueError("Newton tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.divergence_factor <= 1:
            raise ValueError("divergence_factor must exceed 1")


@dataclass(frozen=True, eq=False)
class SimState:
    n: int
    tau: float
    u: CellField
    v: CellField
    newton_iters: int = 0

    def __post_init__(self):
        if self.u.mesh is not self.v.mesh:
            raise ValueError("u and v live on different meshes")

    @property
    def t(self):
        return self.n * self.tau

    @property
    def mesh(self):
        return self.u.mesh


def initial_state(problem: WaveProblem, mesh: PolyMesh, tau: float) -> SimState:
    """u^0 = u0^I, v^0 = v0^I."""
    return SimState(0, tau, interpolate_cell(problem.u0, mesh), interpolate_cell(problem.v0, mesh))


class _StepPreconditioner:
    """Sparse LU of 2 M_C + (tau^2/2) A~ with A~ the sparse surrogate of A; reused every step."""

    def __init__(self, ops: MimeticOperators, tau):
        c = 0.5 * tau * tau
        P = (2.0 * ops.M_C + c * ops.approx_stiffness()).tocsc()
        self.tau = tau
        self.lu = spla.splu(P)
        self.op = spla.LinearOperator(P.shape, matvec=self.lu.solve)


def _preconditioner(ops, tau):
    cache = ops.__dict__.setdefault("_step_preconditioners", {})
    key = float(tau * tau)
    if key not in cache:
        cache[key] = _StepPreconditioner(ops, tau)
    return cache[key]


def sim_step(state: SimState, tau: float, problem: WaveProblem, ops: MimeticOperators,
             newton: NewtonConfig = NewtonConfig()) -> SimState:
    """Advance one implicit midpoint step of size ``tau``.

    A negative ``tau`` steps backward in time (the step index decreases); the
    scheme is symmetric, so a forward step followed by a backward one recovers
    the starting state.
    """
    if not tau or not np.isfinite(tau):
        raise ValueError(f"time step must be finite and nonzero, got {tau}")
    if state.mesh is not ops.mesh:
        raise ValueError("state and operators live on different meshes")
    a = ops.areas
    u, v = state.u.values, state.v.values
    c = 0.5 * tau * tau
    rhs = 2.0 * u + tau * v
    # M_C-weighted residual; ||G||_C = sqrt(sum MG^2 / |c|)
    MC_rhs = a * rhs
    scale = np.sqrt(np.dot(rhs, MC_rhs))
    target = max(newton.rtol * scale, newton.atol)
    pre = _preconditioner(ops, tau)

    def weighted_residual(m):
        return 2.0 * a * m + c * ops.stiffness(m) + c * a * problem.f_prime(m) - MC_rhs

    m = u + 0.5 * tau * v
    MG = weighted_residual(m)
    res = np.sqrt(np.dot(MG, MG / a))
    res0 = res
    it = 0
    while res > target:
        if it >= newton.max_iter:
            raise StepError(
                f"Newton did not converge in {newton.max_iter} iterations "
                f"(residual {res:.3e}, target {target:.3e})", res, it,
            )
        curv = c * a * np.asarray(problem.f_second(m), dtype=float)
        curv = np.broadcast_to(curv, a.shape)
        J = spla.LinearOperator(
            (len(a),) * 2, matvec=lambda w: 2.0 * a * w + c * ops.stiffness(w) + curv * w
        )
        indefinite = np.any(2.0 * a + curv <= 0.0)
        solver = spla.minres if indefinite else spla.cg
        if indefinite:
            log.warning("Jacobian diagonal is not positive at step %d; using MINRES", state.n)
        try:
            delta, info = solver(J, -MG, rtol=newton.linear_rtol, maxiter=2000, M=pre.op)
        except Exception as exc:  # pragma: no cover - scipy internals
            raise StepError(f"linear solve failed: {exc}", res, it) from exc
        if info > 0:
            lin_res = np.linalg.norm(J @ delta + MG) / np.linalg.norm(MG)
            if lin_res > 1e3 * newton.linear_rtol:
                raise StepError(
                    f"Krylov solve did not converge (relative residual {lin_res:.3e})", res, it
                )
        m = m + delta
        it += 1
        MG = weighted_residual(m)
        res = np.sqrt(np.dot(MG, MG / a))
        if not np.isfinite(res) or res > newton.divergence_factor * max(res0, target):
            raise StepError(f"Newton diverged (residual {res:.3e})", res, it)

    u1 = 2.0 * m - u
    v1 = 2.0 * (u1 - u) / tau - v
    mesh = ops.mesh
    # iterations are counted as residual evaluations, so an exact predictor costs 1
    return SimState(state.n + (1 if tau > 0 else -1), state.tau, CellField(u1, mesh), CellField(v1, mesh), it + 1)


@dataclass
class RunResult:
    initial: SimState
    final: SimState
    previous: SimState | None
    records: list = field(default_factory=list)
    H0: float = 0.0

    @property
    def H_series(self):
        return np.array([r.H for r in self.records])

    @property
    def t_series(self):
        return np.array([r.t for r in self.records])

    @property
    def delta_series(self):
        return np.array([r.delta for r in self.records])


def run(problem: WaveProblem, mesh: PolyMesh, tau: float, T: float | None = None,
        callbacks=(), newton: NewtonConfig = NewtonConfig(), ops: MimeticOperators | None = None,
        cadence: int = 1, diagnostics: bool = True) -> RunResult:
    """Integrate from the interpolated initial data over N = round(T / tau) steps.

    A :class:`DiagnosticsRecord` is produced every ``cadence`` steps and at
    the final step, and passed to each callback as ``callback(state, record)``.
    """
    T = problem.T if T is None else T
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if T < 0:
        raise ValueError(f"T must be non-negative, got {T}")
    if cadence < 1:
        raise ValueError("cadence must be >= 1")
    n_steps = int(round(T / tau))
    if ops is None:
        ops = assemble(mesh, problem.K)
    elif ops.mesh is not mesh:
        raise ValueError("operators were assembled on a different mesh")

    state = initial_state(problem, mesh, tau)
    result = RunResult(initial=state, final=state, previous=None)
    if diagnostics:
        result.H0 = hamiltonian_h(state.u, state.v, ops, problem.f)
    prev = None
    for k in range(n_steps):
        try:
            new = sim_step(state, tau, problem, ops, newton)
        except (StepError, SolveError) as exc:
            raise RunError(f"step {state.n + 1} (t = {(state.n + 1) * tau:g}) failed: {exc}",
                           state.n + 1, (state.n + 1) * tau) from exc
        prev, state = state, new
        if diagnostics and (state.n % cadence == 0 or k == n_steps - 1):
            H = hamiltonian_h(state.u, state.v, ops, problem.f)
            r = energy_law_residuals(prev.u, prev.v, state.u, state.v, tau, ops, problem.f)
            rec = DiagnosticsRecord(
                state.n, state.t, H, abs(H - result.H0), float(np.abs(r).max()), state.newton_iters
            )
            result.records.append(rec)
            for cb in callbacks:
                cb(state, rec)
    result.final = state
    result.previous = prev
    return result


class CsvSeriesWriter:
    """Callback streaming diagnostics rows (t, H_h, delta, energy_residual, newton_iters)."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(DiagnosticsRecord.CSV_COLUMNS)

    def __call__(self, state, record):
        self._w.writerow(record.csv_row())

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def save_checkpoint(state: SimState, path):
    data = {
        "n": state.n,
        "tau": state.tau,
        "u": state.u.values.tolist(),
        "v": state.v.values.tolist(),
    }
    Path(path).write_text(json.dumps(data))


def load_checkpoint(path, mesh: PolyMesh) -> SimState:
    data = json.loads(Path(path).read_text())
    return SimState(
        int(data["n"]), float(data["tau"]),
        CellField(np.array(data["u"]), mesh), CellField(np.array(data["v"]), mesh),
    )
