"""Cell and face discrete spaces, interpolation, and mimetic inner products."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .mesh import PolyMesh

__all__ = [
    "CellField",
    "FluxField",
    "FieldError",
    "MeshMismatchError",
    "EvaluationError",
    "cell_quadrature",
    "face_quadrature",
    "interpolate_cell",
    "interpolate_flux",
    "inner_c",
    "inner_f",
    "norm_c",
    "relative_error_c",
    "write_csv",
]

_GAUSS2 = (0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0))


class FieldError(ValueError):
    pass


class MeshMismatchError(FieldError):
    pass


class EvaluationError(FieldError):
    pass


class _Field:
    _size_attr = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        n = getattr(self.mesh, self._size_attr)
        if values.shape != (n,):
            raise FieldError(
                f"{type(self).__name__} needs {n} values for this mesh, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise FieldError(f"{type(self).__name__} has non-finite values")
        object.__setattr__(self, "values", values)

    def _check(self, other):
        if other.mesh is not self.mesh:
            raise MeshMismatchError("fields live on different meshes")

    def _like(self, values):
        return type(self)(values, self.mesh)

    def __add__(self, other):
        self._check(other)
        return self._like(self.values + other.values)

    def __sub__(self, other):
        self._check(other)
        return self._like(self.values - other.values)

    def __mul__(self, scalar):
        return self._like(self.values * float(scalar))

    __rmul__ = __mul__

    def __neg__(self):
        return self._like(-self.values)

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True, eq=False)
class CellField(_Field):
    """One value per mesh cell (piecewise-constant pressure)."""

    values: np.ndarray
    mesh: PolyMesh
    _size_attr = "n_cells"

    @classmethod
    def zeros(cls, mesh):
        return cls(np.zeros(mesh.n_cells), mesh)

    @classmethod
    def constant(cls, mesh, value):
        return cls(np.full(mesh.n_cells, float(value)), mesh)


@dataclass(frozen=True, eq=False)
class FluxField(_Field):
    """One normal-flux component per face, measured along the face normal."""

    values: np.ndarray
    mesh: PolyMesh
    _size_attr = "n_faces"

    @classmethod
    def zeros(cls, mesh):
        return cls(np.zeros(mesh.n_faces), mesh)


def _cache(mesh, key, build):
    store = mesh.__dict__.setdefault("_quadrature_cache", {})
    if key not in store:
        store[key] = build(mesh)
    return store[key]


def _build_cell_quadrature(mesh):
    # fan triangles (x_c, v_i, v_{i+1}); edge-midpoint rule is exact for degree 2
    owner = mesh.cell_face_owner
    loops = np.concatenate(mesh.cells)
    nxt = np.arange(1, len(loops) + 1)
    ptr = mesh.cell_face_ptr
    nxt[ptr[1:] - 1] = ptr[:-1]
    xc = mesh.cell_centroids[owner]
    a = mesh.vertices[loops]
    b = mesh.vertices[loops[nxt]]
    da, db = a - xc, b - xc
    tri_area = 0.5 * (da[:, 0] * db[:, 1] - da[:, 1] * db[:, 0])
    pts = np.concatenate([0.5 * (xc + a), 0.5 * (a + b), 0.5 * (b + xc)])
    w = np.tile(tri_area / 3.0, 3)
    return pts, w, np.tile(owner, 3)


def cell_quadrature(mesh):
    """Nodes, weights and owning cell of the degree-2 polygon quadrature."""
    return _cache(mesh, "cell", _build_cell_quadrature)


def _build_face_quadrature(mesh):
    p0 = mesh.vertices[mesh.face_vertices[:, 0]]
    p1 = mesh.vertices[mesh.face_vertices[:, 1]]
    return [p0 + s * (p1 - p0) for s in _GAUSS2]


def face_quadrature(mesh):
    """The two Gauss nodes of every face (equal weights 1/2)."""
    return _cache(mesh, "face", _build_face_quadrature)


def _evaluate(fn, pts, what):
    """Evaluate ``fn(x, y)``; the last axis of the result indexes the points."""
    with np.errstate(all="ignore"):
        vals = np.asarray(fn(pts[:, 0], pts[:, 1]), dtype=float)
    vals = np.broadcast_to(vals, vals.shape[:-1] + (len(pts),)) if vals.ndim else np.full(len(pts), vals)
    bad = ~np.isfinite(vals)
    if bad.any():
        i = int(np.flatnonzero(bad.reshape(-1, len(pts)).any(axis=0))[0])
        raise EvaluationError(f"{what} is not finite at ({pts[i, 0]!r}, {pts[i, 1]!r})")
    return vals


def interpolate_cell(u, mesh):
    """Cell averages of ``u(x, y)`` (vectorized callable or scalar constant)."""
    if np.isscalar(u):
        return CellField.constant(mesh, u)
    pts, w, owner = cell_quadrature(mesh)
    vals = _evaluate(u, pts, "function")
    sums = np.bincount(owner, weights=w * vals, minlength=mesh.n_cells)
    return CellField(sums / mesh.cell_areas, mesh)


def interpolate_flux(w, mesh):
    """Face-averaged normal components of the vector field ``w(x, y) -> (wx, wy)``."""
    n = mesh.face_normals
    total = np.zeros(mesh.n_faces)
    for q in face_quadrature(mesh):
        wx, wy = _evaluate(lambda x, y: np.broadcast_arrays(*w(x, y), x), q, "vector field")[:2]
        total += 0.5 * (wx * n[:, 0] + wy * n[:, 1])
    return FluxField(total, mesh)


def _same_mesh(a, b):
    if a.mesh is not b.mesh:
        raise MeshMismatchError("fields live on different meshes")


def inner_c(a: CellField, b: CellField) -> float:
    """[a, b]_C = sum_c |c| a_c b_c."""
    _same_mesh(a, b)
    return float(np.dot(a.mesh.cell_areas, a.values * b.values))


def inner_f(a: FluxField, b: FluxField, ops) -> float:
    """[a, b]_F = a^T M_F b, evaluated symmetrically so swapping arguments is bit-identical."""
    _same_mesh(a, b)
    if ops.mesh is not a.mesh:
        raise MeshMismatchError("fields and operators live on different meshes")
    M = ops.M_F
    return float(0.5 * (np.dot(a.values, M @ b.values) + np.dot(b.values, M @ a.values)))


def norm_c(a: CellField) -> float:
    return float(np.sqrt(inner_c(a, a)))


def relative_error_c(a: CellField, b: CellField) -> float:
    """||a - b||_C / ||b||_C, or the absolute norm when ``b`` vanishes."""
    _same_mesh(a, b)
    err = norm_c(a - b)
    ref = norm_c(b)
    return err / ref if ref > 0.0 else err


def write_csv(field, path):
    """Dump a field as ``index,value`` rows for debugging."""
    label = "cell" if isinstance(field, CellField) else "face"
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow([label, "value"])
        for i, v in enumerate(field.values):
            out.writerow([i, repr(float(v))])
