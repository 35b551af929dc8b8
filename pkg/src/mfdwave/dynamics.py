"""Wave problem definition and the semi-discrete Hamiltonian / energy quantities."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .mesh import UNIT_SQUARE, PolyMesh
from .spaces import CellField, cell_quadrature, interpolate_cell

__all__ = [
    "ExactSolution",
    "WaveProblem",
    "DiagnosticsRecord",
    "UnsupportedProblemError",
    "hamiltonian_h",
    "energy_density_h",
    "energy_flux_h",
    "energy_law_residuals",
    "energy_law_residual",
    "continuous_hamiltonian",
    "laplacian_commutation_defect",
]


class UnsupportedProblemError(ValueError):
    pass


@dataclass(frozen=True)
class ExactSolution:
    """Manufactured solution: ``u(t, x, y)``, ``grad(t, x, y) -> (ux, uy)``, ``v(t, x, y) = u_t``."""

    u: Callable
    grad: Callable
    v: Callable


@dataclass(frozen=True)
class WaveProblem:
    """u_tt = div(K grad u) - f'(u) on a rectangle with homogeneous Dirichlet data.

    ``f``, ``f_prime`` and ``f_second`` act elementwise on arrays. ``K`` is
    ``None`` (identity), a constant 2x2 array or a callable ``K(x, y)``.
    """

    f: Callable
    f_prime: Callable
    f_second: Callable
    u0: Callable
    v0: Callable
    K: object = None
    grad_u0: Optional[Callable] = None
    exact: Optional[ExactSolution] = None
    T: float = 1.0
    domain: tuple = UNIT_SQUARE
    name: str = "custom"
    check_derivatives: bool = True

    def __post_init__(self):
        if self.check_derivatives:
            self.verify_derivatives()

    def verify_derivatives(self, n=100, rtol=1e-6, seed=0, scale=2.0):
        """Centered-difference check of f' against f and f'' against f' at random points."""
        s = np.random.default_rng(seed).uniform(-scale, scale, n)
        eps = 1e-4 * np.maximum(1.0, np.abs(s))
        for name, F, dF in (("f_prime", self.f, self.f_prime), ("f_second", self.f_prime, self.f_second)):
            fd = (np.asarray(F(s + eps)) - np.asarray(F(s - eps))) / (2 * eps)
            exact = np.broadcast_to(np.asarray(dF(s), dtype=float), s.shape)
            err = np.abs(fd - exact)
            bad = np.flatnonzero(err > rtol * np.maximum(1.0, np.abs(exact)))
            if bad.size:
                i = bad[0]
                raise ValueError(
                    f"{name} is inconsistent with its antiderivative at s={s[i]!r}: "
                    f"centered difference {fd[i]!r} vs {exact[i]!r}"
                )

    def gradient_of_u0(self):
        if self.grad_u0 is not None:
            return self.grad_u0
        if self.exact is not None:
            return lambda x, y: self.exact.grad(0.0, x, y)
        return None


@dataclass(frozen=True)
class DiagnosticsRecord:
    n: int
    t: float
    H: float
    delta: float
    energy_residual: float
    newton_iters: int

    CSV_COLUMNS = ("t", "H_h", "delta", "energy_residual", "newton_iters")

    def csv_row(self):
        return [repr(self.t), repr(self.H), repr(self.delta), repr(self.energy_residual), self.newton_iters]


def _arr(x):
    return x.values if isinstance(x, CellField) else np.asarray(x, dtype=float)


def _potential(f):
    return f.f if isinstance(f, WaveProblem) else f


def hamiltonian_h(u, v, ops, f, config=None) -> float:
    """1/2 [v, v]_C + 1/2 [GRAD u, GRAD u]_F + [f(u), 1]_C."""
    u, v = _arr(u), _arr(v)
    g = ops.grad(u, config)
    a = ops.areas
    return float(
        0.5 * np.dot(a, v * v) + 0.5 * np.dot(g, ops.M_F @ g) + np.dot(a, _potential(f)(u))
    )


def energy_density_h(u, v, ops, f, config=None, grad_u=None) -> CellField:
    """Per-cell energy 1/2|c| v_c^2 + 1/2 [(GRAD u)_c, (GRAD u)_c]_{F,c} + |c| f(u_c)."""
    u, v = _arr(u), _arr(v)
    g = ops.grad(u, config) if grad_u is None else grad_u
    a = ops.areas
    e = 0.5 * a * v * v + 0.5 * ops.local_products(g, g) + a * _potential(f)(u)
    return CellField(e, ops.mesh)


def energy_flux_h(u, v, ops, config=None) -> CellField:
    """Discrete energy flux -|c| (Delta_h u)_c v_c - [(GRAD v)_c, (GRAD u)_c]_{F,c}."""
    u, v = _arr(u), _arr(v)
    gu = ops.grad(u, config)
    gv = ops.grad(v, config)
    lap_u = ops.div(gu)
    return CellField(-ops.areas * lap_u * v - ops.local_products(gv, gu), ops.mesh)


def energy_law_residuals(u0, v0, u1, v1, tau, ops, f, config=None) -> np.ndarray:
    """Per-cell (E^{n+1} - E^n)/tau + F(u^{n+1/2}, v^{n+1/2}) for two consecutive states."""
    u0, v0, u1, v1 = map(_arr, (u0, v0, u1, v1))
    e0 = energy_density_h(u0, v0, ops, f, config).values
    e1 = energy_density_h(u1, v1, ops, f, config).values
    flux = energy_flux_h(0.5 * (u0 + u1), 0.5 * (v0 + v1), ops, config).values
    return (e1 - e0) / tau + flux


def energy_law_residual(state_n, state_np1, tau, ops, f, config=None) -> float:
    """Max over cells of the discrete energy-law residual between two states.

    States are anything with ``u`` and ``v`` attributes (e.g. ``SimState``).
    """
    r = energy_law_residuals(state_n.u, state_n.v, state_np1.u, state_np1.v, tau, ops, f, config)
    return float(np.abs(r).max())


def _tensor_at(K, x, y):
    n = len(x)
    if K is None:
        return np.broadcast_to(np.eye(2), (n, 2, 2))
    if callable(K):
        vals = np.asarray(K(x, y), dtype=float)
        if vals.shape == (2, 2):
            return np.broadcast_to(vals, (n, 2, 2))
        if vals.shape == (2, 2, n):
            return np.moveaxis(vals, -1, 0)
        return vals
    return np.broadcast_to(np.asarray(K, dtype=float), (n, 2, 2))


def continuous_hamiltonian(problem: WaveProblem, mesh: PolyMesh) -> float:
    """Quadrature of the continuous Hamiltonian at t = 0 from the analytic initial data."""
    grad = problem.gradient_of_u0()
    if grad is None:
        raise UnsupportedProblemError(
            f"problem {problem.name!r} supplies no analytic gradient of u0"
        )
    pts, w, _ = cell_quadrature(mesh)
    x, y = pts[:, 0], pts[:, 1]
    u = np.broadcast_to(np.asarray(problem.u0(x, y), dtype=float), x.shape)
    v = np.broadcast_to(np.asarray(problem.v0(x, y), dtype=float), x.shape)
    gx, gy = (np.broadcast_to(np.asarray(c, dtype=float), x.shape) for c in grad(x, y))
    g = np.stack([gx, gy], axis=1)
    Kg = np.einsum("nab,nb->na", _tensor_at(problem.K, x, y), g)
    density = 0.5 * v * v + 0.5 * np.einsum("na,na->n", g, Kg) + problem.f(u)
    return float(np.dot(w, density))


def laplacian_commutation_defect(u, div_k_grad_u, ops, config=None) -> float:
    """L(u) = ||(div K grad u)^I - Delta_h u^I||_C for analytic ``u`` and ``div K grad u``."""
    mesh = ops.mesh
    ui = interpolate_cell(u, mesh).values
    gi = interpolate_cell(div_k_grad_u, mesh).values
    d = gi - ops.laplacian(ui, config)
    return float(np.sqrt(np.dot(ops.areas, d * d)))
