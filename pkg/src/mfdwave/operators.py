"""Mimetic operators: cell/face inner-product matrices, DIV, GRAD, the discrete Laplacian
and the energy projection.

Array conventions: ``B = DIV^T M_C`` has entries ``alpha_{c,f} |f|`` and the stiffness
form ``A = B^T M_F^{-1} B = M_C (-Delta_h)`` is symmetric positive definite. ``A`` is
only ever applied through a factorization of ``M_F``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import PolyMesh
from .spaces import CellField, FluxField

__all__ = [
    "AssemblyError",
    "ConditioningError",
    "SolveError",
    "LinearSolveConfig",
    "MimeticOperators",
    "local_geometry",
    "local_flux_matrix",
    "assemble",
    "apply_div",
    "apply_grad",
    "apply_laplacian",
    "energy_projection",
    "spectral_extremes",
]


class AssemblyError(ValueError):
    pass


class ConditioningError(AssemblyError):
    pass


class SolveError(RuntimeError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class LinearSolveConfig:
    rtol: float = 1e-12
    max_iter: int = 5000
    kind: str = "direct"

    def __post_init__(self):
        if not 0.0 < self.rtol < 1.0:
            raise ValueError(f"rtol must lie in (0, 1), got {self.rtol}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.kind not in ("direct", "cg"):
            raise ValueError(f"unknown solver kind {self.kind!r}")


DEFAULT_SOLVE = LinearSolveConfig()


def _batched_local_matrices(R, N, areas, Kinv, cells=None):
    """M = R K^-1 R^T / |c| + lambda (I - N (N^T N)^-1 N^T), batched over the leading axis."""
    k = R.shape[1]
    cons = np.einsum("mia,mab,mjb->mij", R, Kinv, R) / areas[:, None, None]
    NtN = np.einsum("mia,mib->mab", N, N)
    det = NtN[:, 0, 0] * NtN[:, 1, 1] - NtN[:, 0, 1] * NtN[:, 1, 0]
    scale = (NtN[:, 0, 0] + NtN[:, 1, 1]) ** 2
    bad = np.flatnonzero(~(det > 1e-12 * scale))
    if bad.size:
        c = int(bad[0]) if cells is None else int(cells[bad[0]])
        raise AssemblyError(f"cell {c}: singular N^T N (degenerate cell geometry)")
    inv = np.empty_like(NtN)
    inv[:, 0, 0] = NtN[:, 1, 1]
    inv[:, 1, 1] = NtN[:, 0, 0]
    inv[:, 0, 1] = -NtN[:, 0, 1]
    inv[:, 1, 0] = -NtN[:, 1, 0]
    inv /= det[:, None, None]
    proj = np.eye(k) - np.einsum("mia,mab,mjb->mij", N, inv, N)
    lam = np.trace(cons, axis1=1, axis2=2) / k
    M = cons + lam[:, None, None] * proj
    return 0.5 * (M + M.transpose(0, 2, 1))


def local_geometry(mesh: PolyMesh, c: int, K_c=None):
    """Face indices, ``R_c`` (rows alpha |f| (x_f - x_c)) and ``N_c`` (rows K_c n_f) of cell ``c``."""
    K_c = np.eye(2) if K_c is None else np.asarray(K_c, dtype=float)
    faces, signs = mesh.cell_faces(c)
    R = (signs * mesh.face_lengths[faces])[:, None] * (
        mesh.face_midpoints[faces] - mesh.cell_centroids[c]
    )
    N = mesh.face_normals[faces] @ K_c
    return faces, R, N


def local_flux_matrix(mesh: PolyMesh, c: int, K_c=None):
    """Local flux inner-product matrix of cell ``c`` in its loop face order.

    Satisfies ``M N_c = R_c`` exactly (consistency) and is SPD (stability).
    """
    K_c = np.eye(2) if K_c is None else np.asarray(K_c, dtype=float)
    _check_spd(K_c[None], [c])
    _, R, N = local_geometry(mesh, c, K_c)
    M = _batched_local_matrices(
        R[None], N[None], np.array([mesh.cell_areas[c]]), np.linalg.inv(K_c)[None], [c]
    )
    return M[0]


def _check_spd(K, cells):
    asym = np.abs(K - K.transpose(0, 2, 1)).max(axis=(1, 2))
    scale = np.abs(K).max(axis=(1, 2))
    bad = np.flatnonzero(asym > 1e-12 * scale)
    if bad.size == 0:
        eig = np.linalg.eigvalsh(0.5 * (K + K.transpose(0, 2, 1)))
        bad = np.flatnonzero(~(eig[:, 0] > 0.0))
    if bad.size:
        raise AssemblyError(f"tensor K is not symmetric positive definite at cell {cells[bad[0]]}")


def _sample_tensor(K, mesh):
    nc = mesh.n_cells
    if K is None:
        return np.broadcast_to(np.eye(2), (nc, 2, 2)).copy()
    if callable(K):
        xc = mesh.cell_centroids
        vals = np.asarray(K(xc[:, 0], xc[:, 1]), dtype=float)
        if vals.shape == (2, 2):
            vals = np.broadcast_to(vals, (nc, 2, 2))
        elif vals.shape == (2, 2, nc):
            vals = np.moveaxis(vals, -1, 0)
        if vals.shape != (nc, 2, 2):
            raise AssemblyError(f"tensor callable returned shape {vals.shape}")
        return np.array(vals)
    K = np.asarray(K, dtype=float)
    if K.shape != (2, 2):
        raise AssemblyError(f"constant tensor must be 2x2, got {K.shape}")
    return np.broadcast_to(K, (nc, 2, 2)).copy()


class MimeticOperators:
    """Assembled mimetic operators on one mesh.

    Immutable after construction. The ``M_F`` factorization is shared by all
    solves and is only read; concurrent callers each own their work arrays.
    """

    def __init__(self, mesh: PolyMesh, K=None, config: LinearSolveConfig = DEFAULT_SOLVE):
        self.mesh = mesh
        self.config = config
        nc, nf = mesh.n_cells, mesh.n_faces
        self.K_cells = _sample_tensor(K, mesh)
        _check_spd(self.K_cells, np.arange(nc))
        Kinv = np.linalg.inv(self.K_cells)

        counts = np.diff(mesh.cell_face_ptr)
        rows, cols, vals = [], [], []
        self._groups = []
        lo_eig = np.empty(nc)
        hi_eig = np.empty(nc)
        for k in np.unique(counts):
            cells = np.flatnonzero(counts == k)
            idx = mesh.cell_face_ptr[cells][:, None] + np.arange(k)
            faces = mesh.cell_face_idx[idx]
            signs = mesh.cell_face_sign[idx]
            R = (signs * mesh.face_lengths[faces])[..., None] * (
                mesh.face_midpoints[faces] - mesh.cell_centroids[cells][:, None, :]
            )
            N = np.einsum("mia,mab->mib", mesh.face_normals[faces], self.K_cells[cells])
            areas = mesh.cell_areas[cells]
            M = _batched_local_matrices(R, N, areas, Kinv[cells], cells)
            eig = np.linalg.eigvalsh(M) / areas[:, None]
            if not np.all(eig[:, 0] > 0.0):
                c = int(cells[np.flatnonzero(~(eig[:, 0] > 0.0))[0]])
                raise ConditioningError(f"cell {c}: local flux matrix is not positive definite")
            lo_eig[cells] = eig[:, 0]
            hi_eig[cells] = eig[:, -1]
            self._groups.append((cells, faces, M))
            rows.append(np.repeat(faces, k, axis=1).ravel())
            cols.append(np.tile(faces, (1, k)).ravel())
            vals.append(M.ravel())
        M_F = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nf, nf)
        ).tocsc()
        self.M_F = ((M_F + M_F.T) * 0.5).tocsc()
        self.local_eigenvalue_range = (lo_eig, hi_eig)

        owner = mesh.cell_face_owner
        fidx = mesh.cell_face_idx
        signed_len = mesh.cell_face_sign * mesh.face_lengths[fidx]
        self.B = sp.csr_matrix((signed_len, (fidx, owner)), shape=(nf, nc))
        self.DIV = sp.csr_matrix(
            (signed_len / mesh.cell_areas[owner], (owner, fidx)), shape=(nc, nf)
        )
        self.areas = mesh.cell_areas
        self.M_C = sp.diags(self.areas)

        try:
            self._lu = spla.splu(
                self.M_F, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as exc:
            raise ConditioningError(f"factorization of M_F failed: {exc}") from exc
        self._approx_stiffness = None
        self._approx_lu = None

    # -- array-level kernels -------------------------------------------------

    def solve_MF(self, rhs, config: LinearSolveConfig | None = None):
        cfg = config or self.config
        if cfg.kind == "direct":
            return self._lu.solve(rhs)
        d = self.M_F.diagonal()
        pre = spla.LinearOperator(self.M_F.shape, matvec=lambda x: x / d)
        x, info = spla.cg(self.M_F, rhs, rtol=cfg.rtol, maxiter=cfg.max_iter, M=pre)
        res = np.linalg.norm(self.M_F @ x - rhs) / max(np.linalg.norm(rhs), 1e-300)
        if info != 0 and res > cfg.rtol:
            raise SolveError(f"CG on M_F did not converge (relative residual {res:.3e})", res, info)
        return x

    def div(self, w):
        return self.DIV @ w

    def grad(self, u, config=None):
        return -self.solve_MF(self.B @ u, config)

    def laplacian(self, u, config=None):
        return self.DIV @ self.grad(u, config)

    def stiffness(self, u, config=None):
        """A u = M_C (-Delta_h) u."""
        return self.B.T @ self.solve_MF(self.B @ u, config)

    def approx_stiffness(self):
        """Sparse spectrally equivalent surrogate B^T diag(M_F)^-1 B, used for preconditioning."""
        if self._approx_stiffness is None:
            d = self.M_F.diagonal()
            self._approx_stiffness = (self.B.T @ sp.diags(1.0 / d) @ self.B).tocsc()
        return self._approx_stiffness

    def local_products(self, a, b):
        """Per-cell a_c^T M_{F,c} b_c for two face arrays."""
        out = np.empty(self.mesh.n_cells)
        for cells, faces, M in self._groups:
            out[cells] = np.einsum("mi,mij,mj->m", a[faces], M, b[faces])
        return out

    def local_matrix(self, c):
        """(face indices, M_{F,c}) of one cell."""
        for cells, faces, M in self._groups:
            hit = np.flatnonzero(cells == c)
            if hit.size:
                return faces[hit[0]], M[hit[0]]
        raise IndexError(c)

    def solve_stiffness(self, rhs, config: LinearSolveConfig | None = None, x0=None):
        """Solve A x = rhs by preconditioned conjugate gradient."""
        cfg = config or self.config
        A = spla.LinearOperator((self.mesh.n_cells,) * 2, matvec=self.stiffness)
        if self._approx_lu is None:
            self._approx_lu = spla.splu(self.approx_stiffness())
        pre = spla.LinearOperator(A.shape, matvec=self._approx_lu.solve)
        bnorm = np.linalg.norm(rhs)
        if bnorm == 0.0:
            return np.zeros_like(rhs)
        x, info = spla.cg(A, rhs, x0=x0, rtol=cfg.rtol, maxiter=cfg.max_iter, M=pre)
        res = np.linalg.norm(self.stiffness(x) - rhs) / bnorm
        if info != 0 and res > 10 * cfg.rtol:
            raise SolveError(
                f"CG on the Laplacian did not converge (relative residual {res:.3e})", res, info
            )
        return x

    def dump(self, directory):
        """Write M_F and DIV as Matrix Market files."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        scipy.io.mmwrite(directory / "M_F.mtx", self.M_F, symmetry="symmetric")
        scipy.io.mmwrite(directory / "DIV.mtx", self.DIV)

    def __repr__(self):
        return f"MimeticOperators({self.mesh!r})"


def assemble(mesh: PolyMesh, K=None, config: LinearSolveConfig = DEFAULT_SOLVE):
    """Assemble M_C, M_F (factorized), DIV for ``mesh`` with tensor ``K`` sampled at centroids.

    ``K`` may be ``None`` (identity), a constant 2x2 array, or a callable
    ``K(x, y)`` returning ``(n, 2, 2)`` or ``(2, 2, n)`` arrays.
    """
    return MimeticOperators(mesh, K, config)


def _cell(values, ops):
    return values.values if isinstance(values, CellField) else np.asarray(values, dtype=float)


def apply_div(ops, w: FluxField) -> CellField:
    return CellField(ops.div(w.values), ops.mesh)


def apply_grad(ops, u: CellField, config=None) -> FluxField:
    return FluxField(ops.grad(_cell(u, ops), config), ops.mesh)


def apply_laplacian(ops, u: CellField, config=None) -> CellField:
    return CellField(ops.laplacian(_cell(u, ops), config), ops.mesh)


def energy_projection(ops, g: CellField, config=None) -> CellField:
    """Solve Delta_h p = g; with g = (div K grad u)^I this is the energy projection of u."""
    rhs = -ops.areas * _cell(g, ops)
    return CellField(ops.solve_stiffness(rhs, config), ops.mesh)


def spectral_extremes(ops, config=None, rtol=1e-6, max_iter=20000, seed=0):
    """Smallest and largest eigenvalue of -Delta_h.

    Power iteration (largest) and inverse power iteration (smallest) on the
    M_C-self-adjoint operator, stopped when successive Rayleigh quotients
    agree to ``rtol``.
    """
    rng = np.random.default_rng(seed)
    areas = ops.areas
    cfg = config or LinearSolveConfig(rtol=1e-12)

    def rayleigh(x, Ax):
        return float(np.dot(x, Ax) / np.dot(areas * x, x))

    def iterate(step):
        x = rng.standard_normal(ops.mesh.n_cells)
        prev, prev_change = None, None
        for it in range(max_iter):
            x /= np.sqrt(np.dot(areas * x, x))
            Ax = ops.stiffness(x)
            lam = rayleigh(x, Ax)
            if prev is not None:
                change = abs(lam - prev)
                # Rayleigh quotients converge geometrically; bound the remaining tail
                if prev_change:
                    r = min(change / prev_change, 0.999)
                    if change * r / (1.0 - r) <= rtol * abs(lam) and change <= rtol * abs(lam):
                        return lam
                if change == 0.0:
                    return lam
                prev_change = change
            prev = lam
            x = step(x, Ax)
        raise SolveError(f"eigenvalue iteration did not converge in {max_iter} iterations", None, max_iter)

    lam_max = iterate(lambda x, Ax: Ax / areas)
    lam_min = iterate(lambda x, Ax: ops.solve_stiffness(areas * x, cfg, x0=x / max(rayleigh(x, Ax), 1e-300)))
    return lam_min, lam_max
