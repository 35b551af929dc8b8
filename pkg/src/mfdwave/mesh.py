"""Polygonal meshes: representation, clipped Voronoi generation, validation and JSON I/O."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import Voronoi, cKDTree

__all__ = [
    "MeshError",
    "MeshFormatError",
    "MeshIndexError",
    "MeshOrientationError",
    "MeshValidationError",
    "MeshGenerationError",
    "PolyMesh",
    "MeshQualityReport",
    "generate_voronoi",
    "generate_for_target_h",
    "unit_square",
    "square_grid",
    "load_mesh",
    "save_mesh",
    "validate",
]

UNIT_SQUARE = (0.0, 0.0, 1.0, 1.0)


class MeshError(ValueError):
    pass


class MeshFormatError(MeshError):
    pass


class MeshIndexError(MeshError):
    pass


class MeshOrientationError(MeshError):
    pass


class MeshValidationError(MeshError):
    def __init__(self, failures):
        self.failures = list(failures)
        super().__init__("mesh validation failed:\n  " + "\n  ".join(self.failures))


class MeshGenerationError(MeshError):
    pass


def _shoelace(pts):
    # local coordinates keep the centroid accurate to O(eps * h)
    origin = pts[0]
    pts = pts - origin
    x, y = pts[:, 0], pts[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * cross.sum()
    if area == 0.0:
        return 0.0, pts.mean(axis=0) + origin
    cx = ((x + xn) * cross).sum() / (6.0 * area)
    cy = ((y + yn) * cross).sum() / (6.0 * area)
    return area, np.array([cx, cy]) + origin


class PolyMesh:
    """Conforming polygonal mesh of a planar polygon.

    Cells are counter-clockwise vertex loops. Faces, normals and all cell
    geometry are derived on construction. An interior face's normal points
    from its lower-indexed cell to its higher-indexed cell; a boundary
    face's normal points out of the domain. ``face_sign`` entries are the
    orientation signs alpha_{c,f} (+1 when the face normal is outward for
    the cell).

    The mesh is treated as immutable: derived arrays are flagged read-only.
    """

    def __init__(self, vertices, cells, domain=None):
        vertices = np.asarray(vertices, dtype=float)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise MeshFormatError(f"vertices must have shape (n, 2), got {vertices.shape}")
        if not np.all(np.isfinite(vertices)):
            raise MeshFormatError("vertices contain non-finite coordinates")
        if len(cells) == 0:
            raise MeshFormatError("mesh has no cells")
        nv = len(vertices)
        loops = []
        for ci, loop in enumerate(cells):
            loop = np.asarray(loop)
            if loop.ndim != 1 or len(loop) < 3:
                raise MeshFormatError(f"cell {ci}: needs at least 3 vertex indices")
            if not np.issubdtype(loop.dtype, np.integer):
                raise MeshFormatError(f"cell {ci}: vertex indices must be integers")
            bad = loop[(loop < 0) | (loop >= nv)]
            if bad.size:
                raise MeshIndexError(
                    f"cell {ci}: vertex index {int(bad[0])} out of range (vertex count {nv})"
                )
            loops.append(loop.astype(np.int64))

        self.vertices = vertices
        self.cells = tuple(loops)
        self.domain = None if domain is None else tuple(float(d) for d in domain)
        self._build()
        for name in (
            "vertices", "cell_areas", "cell_centroids", "cell_diameters", "face_vertices",
            "face_cells", "face_normals", "face_midpoints", "face_lengths",
            "cell_face_ptr", "cell_face_idx", "cell_face_sign", "cell_face_owner",
        ):
            getattr(self, name).setflags(write=False)

    def _build(self):
        nc = len(self.cells)
        areas = np.empty(nc)
        centroids = np.empty((nc, 2))
        diameters = np.empty(nc)
        for ci, loop in enumerate(self.cells):
            pts = self.vertices[loop]
            a, xc = _shoelace(pts)
            if a <= 0.0:
                raise MeshOrientationError(
                    f"cell {ci}: vertex loop is not counter-clockwise (signed area {a:.3e})"
                )
            areas[ci] = a
            centroids[ci] = xc
            d = pts[:, None, :] - pts[None, :, :]
            diameters[ci] = math.sqrt(np.max(np.einsum("ijk,ijk->ij", d, d)))

        face_of = {}
        fverts, fcells = [], []
        ptr = [0]
        cf_idx, cf_sign = [], []
        for ci, loop in enumerate(self.cells):
            for a, b in zip(loop, np.roll(loop, -1)):
                a, b = int(a), int(b)
                key = (a, b) if a < b else (b, a)
                fi = face_of.get(key)
                if fi is None:
                    fi = len(fverts)
                    face_of[key] = fi
                    fverts.append((a, b))
                    fcells.append([ci, -1])
                    sign = 1
                else:
                    if fcells[fi][1] != -1:
                        raise MeshValidationError(
                            [f"face {fi} (vertices {key}) is shared by more than two cells"]
                        )
                    if fverts[fi] != (b, a):
                        raise MeshOrientationError(
                            f"cell {ci}: traverses face {fi} in the same direction as cell "
                            f"{fcells[fi][0]} (inconsistent orientation or overlap)"
                        )
                    fcells[fi][1] = ci
                    sign = -1
                cf_idx.append(fi)
                cf_sign.append(sign)
            ptr.append(len(cf_idx))

        fverts = np.array(fverts, dtype=np.int64)
        p0 = self.vertices[fverts[:, 0]]
        p1 = self.vertices[fverts[:, 1]]
        t = p1 - p0
        lengths = np.hypot(t[:, 0], t[:, 1])
        safe = np.where(lengths > 0.0, lengths, 1.0)
        # clockwise rotation of the first owner's CCW tangent gives its outward normal
        normals = np.column_stack([t[:, 1], -t[:, 0]]) / safe[:, None]
        normals[lengths == 0.0] = 0.0

        self.cell_areas = areas
        self.cell_centroids = centroids
        self.cell_diameters = diameters
        self.h = float(diameters.max())
        self.face_vertices = fverts
        self.face_cells = np.array(fcells, dtype=np.int64)
        self.face_normals = normals
        self.face_midpoints = 0.5 * (p0 + p1)
        self.face_lengths = lengths
        self.cell_face_ptr = np.array(ptr, dtype=np.int64)
        self.cell_face_idx = np.array(cf_idx, dtype=np.int64)
        self.cell_face_sign = np.array(cf_sign, dtype=float)
        self.cell_face_owner = np.repeat(np.arange(nc), np.diff(self.cell_face_ptr))

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def n_faces(self):
        return len(self.face_vertices)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def boundary_faces(self):
        return np.flatnonzero(self.face_cells[:, 1] < 0)

    def cell_faces(self, c):
        """Face indices and orientation signs of cell ``c`` in loop order."""
        s = slice(self.cell_face_ptr[c], self.cell_face_ptr[c + 1])
        return self.cell_face_idx[s], self.cell_face_sign[s]

    def domain_area(self):
        """Area of the meshed polygon, from the domain box or the boundary loop."""
        if self.domain is not None:
            x0, y0, x1, y1 = self.domain
            return (x1 - x0) * (y1 - y0)
        bf = self.boundary_faces
        p0 = self.vertices[self.face_vertices[bf, 0]]
        p1 = self.vertices[self.face_vertices[bf, 1]]
        return 0.5 * float(np.sum(p0[:, 0] * p1[:, 1] - p1[:, 0] * p0[:, 1]))

    def geometric_identity_residuals(self):
        """Per-cell relative residual of sum_f alpha |f| (x_f - x_c) n_f^T = |c| I."""
        fi, owner = self.cell_face_idx, self.cell_face_owner
        w = (self.cell_face_sign * self.face_lengths[fi])[:, None, None]
        d = self.face_midpoints[fi] - self.cell_centroids[owner]
        terms = w * d[:, :, None] * self.face_normals[fi][:, None, :]
        acc = np.zeros((self.n_cells, 2, 2))
        np.add.at(acc, owner, terms)
        acc -= self.cell_areas[:, None, None] * np.eye(2)
        return np.abs(acc).max(axis=(1, 2)) / self.cell_areas

    def __repr__(self):
        return f"PolyMesh(n_cells={self.n_cells}, n_faces={self.n_faces}, h={self.h:.4g})"


@dataclass
class MeshQualityReport:
    """Per-cell regularity indicators; reported, never enforced."""

    inradius_ratio: np.ndarray
    vertex_separation_ratio: np.ndarray
    convex: np.ndarray
    flagged: list = field(default_factory=list)
    inradius_threshold: float = 0.05
    separation_threshold: float = 1e-3

    @property
    def min_inradius_ratio(self):
        return float(self.inradius_ratio.min())

    @property
    def min_vertex_separation_ratio(self):
        return float(self.vertex_separation_ratio.min())

    @property
    def ok(self):
        return not self.flagged


def validate(mesh: PolyMesh, inradius_threshold=0.05, separation_threshold=1e-3, rtol=1e-12):
    """Check every mesh invariant and report regularity ratios per cell.

    Raises :class:`MeshValidationError` listing all failing cells/faces when
    a structural or geometric invariant is broken. Cells that are merely
    irregular (small inradius proxy, nearly coincident vertices, nonconvex)
    are flagged in the returned report.
    """
    failures = []
    for c in np.flatnonzero(mesh.cell_areas <= 0.0):
        failures.append(f"cell {c}: non-positive area {mesh.cell_areas[c]:.3e}")

    total = float(mesh.cell_areas.sum())
    omega = mesh.domain_area()
    if abs(total - omega) > rtol * abs(omega):
        failures.append(f"area partition: sum of cell areas {total!r} != domain area {omega!r}")

    fc = mesh.face_cells
    for f in np.flatnonzero(fc[:, 0] < 0):
        failures.append(f"face {f}: no adjacent cell")
    interior = np.flatnonzero(fc[:, 1] >= 0)
    if interior.size:
        starts = mesh.cell_face_ptr[fc[interior]]
        ends = mesh.cell_face_ptr[fc[interior] + 1]
        for f, (s0, s1), (e0, e1) in zip(interior, starts, ends):
            a0 = mesh.cell_face_sign[s0:e0][mesh.cell_face_idx[s0:e0] == f]
            a1 = mesh.cell_face_sign[s1:e1][mesh.cell_face_idx[s1:e1] == f]
            if len(a0) != 1 or len(a1) != 1 or a0[0] * a1[0] != -1.0:
                failures.append(f"face {f}: orientation signs are not opposite")
    bnd = mesh.boundary_faces
    if mesh.domain is not None and bnd.size:
        x0, y0, x1, y1 = mesh.domain
        mid = mesh.face_midpoints[bnd]
        outward = (mid - np.array([(x0 + x1) / 2, (y0 + y1) / 2])) * mesh.face_normals[bnd]
        for f in bnd[outward.sum(axis=1) < 0]:
            failures.append(f"face {f}: boundary normal is not outward")

    res = mesh.geometric_identity_residuals()
    for c in np.flatnonzero(res > rtol):
        failures.append(f"cell {c}: geometric identity residual {res[c]:.3e}")
    if failures:
        raise MeshValidationError(failures)

    nc = mesh.n_cells
    inr = np.empty(nc)
    sep = np.empty(nc)
    convex = np.empty(nc, dtype=bool)
    for c, loop in enumerate(mesh.cells):
        pts = mesh.vertices[loop]
        hc = mesh.cell_diameters[c]
        e = np.roll(pts, -1, axis=0) - pts
        elen = np.hypot(e[:, 0], e[:, 1])
        ok = elen > 0
        # distance from the centroid to each edge line
        rel = mesh.cell_centroids[c] - pts
        dist = np.abs(e[:, 0] * rel[:, 1] - e[:, 1] * rel[:, 0])[ok] / elen[ok]
        inr[c] = dist.min() / hc
        d = pts[:, None, :] - pts[None, :, :]
        dd = np.sqrt(np.einsum("ijk,ijk->ij", d, d))
        sep[c] = dd[np.triu_indices(len(pts), 1)].min() / hc
        turn = e[:, 0] * np.roll(e[:, 1], -1) - e[:, 1] * np.roll(e[:, 0], -1)
        convex[c] = bool(np.all(turn[ok & np.roll(ok, -1)] >= -1e-14 * hc * hc))

    flagged = [
        int(c)
        for c in range(nc)
        if inr[c] < inradius_threshold or sep[c] < separation_threshold or not convex[c]
    ]
    return MeshQualityReport(inr, sep, convex, flagged, inradius_threshold, separation_threshold)


def unit_square():
    return PolyMesh([[0, 0], [1, 0], [1, 1], [0, 1]], [[0, 1, 2, 3]], domain=UNIT_SQUARE)


def square_grid(n, domain=UNIT_SQUARE):
    """Structured n x n grid of rectangles, cells numbered row by row."""
    x0, y0, x1, y1 = domain
    xs = np.linspace(x0, x1, n + 1)
    ys = np.linspace(y0, y1, n + 1)
    X, Y = np.meshgrid(xs, ys)
    verts = np.column_stack([X.ravel(), Y.ravel()])
    cells = []
    for j in range(n):
        for i in range(n):
            v = j * (n + 1) + i
            cells.append([v, v + 1, v + n + 2, v + n + 1])
    return PolyMesh(verts, cells, domain=domain)


def _reflect(seeds, domain, band=np.inf):
    """Seeds followed by their mirror images across each domain edge within ``band``."""
    x0, y0, x1, y1 = domain
    out = [seeds]
    for col, wall in ((0, x0), (0, x1), (1, y0), (1, y1)):
        near = seeds[np.abs(seeds[:, col] - wall) <= band]
        mirrored = near.copy()
        mirrored[:, col] = 2 * wall - near[:, col]
        out.append(mirrored)
    return np.vstack(out)


def _voronoi_cells(seeds, domain, tol):
    """Clipped Voronoi cells (vertex array, list of loops) via seed reflection.

    Mirroring a seed across an edge never cuts its neighbours' cells inside
    the domain, so it suffices to mirror the seeds near the boundary as long
    as every resulting cell is bounded and lies inside the domain; otherwise
    all seeds are mirrored.
    """
    n = len(seeds)
    x0, y0, x1, y1 = domain
    band = 3.0 * math.sqrt((x1 - x0) * (y1 - y0) / n)
    for b in (band, np.inf):
        vor = Voronoi(_reflect(seeds, domain, b))
        loops = [vor.regions[r] for r in vor.point_region[:n]]
        if all(loop and -1 not in loop for loop in loops):
            used = np.unique(np.concatenate(loops))
            v = vor.vertices[used]
            if (
                v[:, 0].min() >= x0 - tol and v[:, 0].max() <= x1 + tol
                and v[:, 1].min() >= y0 - tol and v[:, 1].max() <= y1 + tol
            ):
                return vor.vertices, loops
    for i, loop in enumerate(loops):
        if not loop or -1 in loop:
            raise MeshGenerationError(f"seed {i} at {seeds[i].tolist()}: unbounded Voronoi region")
    raise MeshGenerationError("clipped Voronoi cells leave the domain")


def _clean_cells(verts, loops, domain, tol):
    """Snap boundary vertices, merge near-coincident vertices, renumber, orient CCW."""
    x0, y0, x1, y1 = domain
    used = sorted({v for loop in loops for v in loop})
    pts = verts[used].copy()
    for col, lo, hi in ((0, x0, x1), (1, y0, y1)):
        pts[np.abs(pts[:, col] - lo) <= tol, col] = lo
        pts[np.abs(pts[:, col] - hi) <= tol, col] = hi

    # union-find over vertices closer than tol
    parent = list(range(len(pts)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in sorted(cKDTree(pts).query_pairs(tol)):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    roots = sorted({find(i) for i in range(len(pts))})
    new_id = {r: k for k, r in enumerate(roots)}
    local = {v: new_id[find(k)] for k, v in enumerate(used)}
    out_pts = pts[roots]

    cells = []
    for loop in loops:
        ids = [local[v] for v in loop]
        dedup = [v for k, v in enumerate(ids) if v != ids[k - 1]]
        if len(dedup) >= 3:
            a, _ = _shoelace(out_pts[dedup])
            if a < 0:
                dedup.reverse()
        cells.append(dedup)
    return out_pts, cells


def _loops_geometry(verts, loops):
    """Signed areas and centroids of many polygons at once."""
    lens = np.fromiter((len(l) for l in loops), dtype=np.int64, count=len(loops))
    ptr = np.concatenate([[0], np.cumsum(lens)])
    flat = np.fromiter((v for l in loops for v in l), dtype=np.int64, count=ptr[-1])
    nxt = np.arange(1, ptr[-1] + 1)
    nxt[ptr[1:] - 1] = ptr[:-1]
    p, q = verts[flat], verts[flat[nxt]]
    cross = p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]
    area = 0.5 * np.add.reduceat(cross, ptr[:-1])
    cx = np.add.reduceat((p[:, 0] + q[:, 0]) * cross, ptr[:-1]) / (6.0 * area)
    cy = np.add.reduceat((p[:, 1] + q[:, 1]) * cross, ptr[:-1]) / (6.0 * area)
    return area, np.column_stack([cx, cy])


def generate_voronoi(n_seeds, lloyd_iters=0, rng_seed=0, domain=UNIT_SQUARE, seeds=None):
    """Clipped Voronoi mesh of an axis-aligned rectangle with Lloyd relaxation.

    Seeds are drawn uniformly in ``domain`` from ``numpy.random.default_rng(rng_seed)``
    unless given explicitly. Each Lloyd step moves every seed to the centroid of its
    clipped cell. Faces shorter than ``1e-10`` times the expected cell size are
    collapsed.

    Raises
    ------
    MeshGenerationError
        If a seed configuration yields a degenerate (zero-area) cell.
    """
    x0, y0, x1, y1 = (float(d) for d in domain)
    if not (x1 > x0 and y1 > y0):
        raise MeshGenerationError(f"degenerate domain {domain}")
    if seeds is None:
        if n_seeds < 1:
            raise MeshGenerationError("n_seeds must be >= 1")
        rng = np.random.default_rng(rng_seed)
        seeds = np.column_stack(
            [rng.uniform(x0, x1, n_seeds), rng.uniform(y0, y1, n_seeds)]
        )
    else:
        seeds = np.array(seeds, dtype=float)
        n_seeds = len(seeds)
        if n_seeds < 1:
            raise MeshGenerationError("n_seeds must be >= 1")
    if lloyd_iters < 0:
        raise MeshGenerationError("lloyd_iters must be non-negative")
    domain = (x0, y0, x1, y1)
    scale = math.sqrt((x1 - x0) * (y1 - y0) / n_seeds)
    tol = 1e-10 * scale

    for it in range(lloyd_iters + 1):
        inside = (
            (seeds[:, 0] > x0) & (seeds[:, 0] < x1) & (seeds[:, 1] > y0) & (seeds[:, 1] < y1)
        )
        if not inside.all():
            i = int(np.flatnonzero(~inside)[0])
            raise MeshGenerationError(f"seed {i} at {seeds[i].tolist()} is not inside the domain")
        if n_seeds > 1:
            dist, _ = cKDTree(seeds).query(seeds, k=2)
            dup = np.flatnonzero(dist[:, 1] <= tol)
            if dup.size:
                i = int(dup[0])
                raise MeshGenerationError(
                    f"seed {i} at {seeds[i].tolist()} coincides with another seed (zero-area cell)"
                )
        raw_verts, raw_loops = _voronoi_cells(seeds, domain, tol)
        if it < lloyd_iters:
            # qhull orders 2D regions cyclically; centroids are orientation independent
            area, seeds = _loops_geometry(raw_verts, raw_loops)
            bad = np.flatnonzero(np.abs(area) <= tol * scale)
            if bad.size:
                i = int(bad[0])
                raise MeshGenerationError(f"seed {i} produces a zero-area cell")
            continue
        verts, cells = _clean_cells(raw_verts, raw_loops, domain, tol)
        for i, loop in enumerate(cells):
            if len(loop) < 3 or _shoelace(verts[loop])[0] <= tol * scale:
                raise MeshGenerationError(
                    f"seed {i} at {seeds[i].tolist()} produces a zero-area cell"
                )
    return PolyMesh(verts, cells, domain=domain)


def generate_for_target_h(h_target, lloyd_iters=100, rng_seed=0, domain=UNIT_SQUARE, max_tries=12):
    """Search the seed count whose relaxed Voronoi mesh has max cell diameter closest to ``h_target``.

    Returns the mesh with the smallest seed count satisfying ``h <= h_target``
    if one is found within ``max_tries`` generations, else the closest one.
    """
    x0, y0, x1, y1 = domain
    # relaxed meshes of the unit square satisfy h * sqrt(n) ~ 1.5
    n = max(1, int(math.ceil((x1 - x0) * (y1 - y0) * (1.5 / h_target) ** 2)))
    tried = {}

    def gen(k):
        if k not in tried:
            tried[k] = generate_voronoi(k, lloyd_iters, rng_seed, domain)
        return tried[k]

    lo, hi = None, None  # largest n with h > target, smallest n with h <= target
    for _ in range(max_tries):
        m = gen(n)
        if m.h <= h_target:
            hi = n if hi is None else min(hi, n)
        else:
            lo = n if lo is None else max(lo, n)
        if lo is not None and hi is not None:
            if hi - lo <= max(1, hi // 50):
                break
            n = (lo + hi) // 2
        elif hi is None:
            n = int(math.ceil(n * max(1.05, (m.h / h_target) ** 2)))
        else:
            n = max(1, int(math.floor(n * min(0.95, (m.h / h_target) ** 2))))
        if n in tried and lo is not None and hi is not None:
            break
    if hi is not None:
        return tried[hi]
    return min(tried.values(), key=lambda m: abs(m.h - h_target))


def mesh_to_dict(mesh):
    return {
        "vertices": [[float(x), float(y)] for x, y in mesh.vertices],
        "cells": [[int(v) for v in loop] for loop in mesh.cells],
    }


def save_mesh(mesh, path):
    # repr-based float formatting round-trips bit-exactly
    Path(path).write_text(json.dumps(mesh_to_dict(mesh)))


def load_mesh(path, domain=None):
    """Read a mesh JSON file ``{"vertices": [[x, y], ...], "cells": [[i0, i1, ...], ...]}``."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MeshFormatError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc
    if not isinstance(data, dict) or "vertices" not in data or "cells" not in data:
        raise MeshFormatError(f"{path}: expected an object with 'vertices' and 'cells'")
    verts = data["vertices"]
    if not isinstance(verts, list) or not all(
        isinstance(p, list) and len(p) == 2 and all(isinstance(c, (int, float)) for c in p)
        for p in verts
    ):
        raise MeshFormatError(f"{path}: 'vertices' must be a list of [x, y] number pairs")
    cells = data["cells"]
    if not isinstance(cells, list):
        raise MeshFormatError(f"{path}: 'cells' must be a list of index lists")
    for ci, loop in enumerate(cells):
        if not isinstance(loop, list) or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in loop
        ):
            raise MeshFormatError(f"{path}: cell {ci} must be a list of integer vertex indices")
    try:
        return PolyMesh(np.array(verts, dtype=float).reshape(-1, 2), cells, domain=domain)
    except MeshValidationError as exc:
        raise MeshValidationError([f"{path}: {f}" for f in exc.failures]) from exc
    except MeshError as exc:
        raise type(exc)(f"{path}: {exc}") from exc
