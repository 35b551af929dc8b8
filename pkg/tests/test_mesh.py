import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfdwave.mesh import (
    MeshFormatError,
    MeshGenerationError,
    MeshIndexError,
    MeshOrientationError,
    MeshValidationError,
    PolyMesh,
    generate_for_target_h,
    generate_voronoi,
    load_mesh,
    save_mesh,
    square_grid,
    unit_square,
    validate,
)


def check_invariants(mesh, rtol=1e-12):
    assert np.all(mesh.cell_areas > 0)
    assert abs(mesh.cell_areas.sum() - mesh.domain_area()) <= rtol * mesh.domain_area()
    assert mesh.geometric_identity_residuals().max() <= rtol
    # each face has 1 or 2 neighbours and opposite signs on interior faces
    counts = np.bincount(mesh.cell_face_idx, minlength=mesh.n_faces)
    interior = mesh.face_cells[:, 1] >= 0
    assert np.all(counts[interior] == 2) and np.all(counts[~interior] == 1)
    sums = np.bincount(mesh.cell_face_idx, weights=mesh.cell_face_sign, minlength=mesh.n_faces)
    assert np.all(sums[interior] == 0) and np.all(sums[~interior] == 1)
    validate(mesh)


def test_single_seed_is_the_domain():
    m = generate_voronoi(1, 0, rng_seed=7)
    assert m.n_cells == 1
    assert m.cell_areas[0] == pytest.approx(1.0, abs=1e-14)
    check_invariants(m)


def test_four_symmetric_seeds_give_quadrants():
    seeds = [[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]]
    m = generate_voronoi(4, 0, seeds=seeds)
    np.testing.assert_allclose(m.cell_areas, 0.25, atol=1e-14)
    np.testing.assert_allclose(m.cell_centroids, seeds, atol=1e-14)
    check_invariants(m)


def test_target_h_005_within_range(fine_mesh):
    assert 0.03 <= fine_mesh.h <= 0.08
    check_invariants(fine_mesh)


def test_generation_is_deterministic():
    a = generate_voronoi(60, 5, rng_seed=3)
    b = generate_voronoi(60, 5, rng_seed=3)
    np.testing.assert_array_equal(a.vertices, b.vertices)
    assert all(np.array_equal(x, y) for x, y in zip(a.cells, b.cells))


@settings(max_examples=25, deadline=None)
@given(n=st.integers(2, 400), iters=st.integers(0, 8), seed=st.integers(0, 2**31))
def test_random_voronoi_invariants(n, iters, seed):
    check_invariants(generate_voronoi(n, iters, rng_seed=seed))


def test_rectangle_domain():
    dom = (-1.0, 2.0, 3.0, 2.5)
    m = generate_voronoi(80, 3, rng_seed=1, domain=dom)
    assert m.domain_area() == pytest.approx(2.0)
    check_invariants(m)


def test_coincident_seeds_name_the_seed():
    with pytest.raises(MeshGenerationError, match="seed 1"):
        generate_voronoi(3, 0, seeds=[[0.2, 0.2], [0.5, 0.5], [0.5, 0.5]])


def test_generation_rejects_bad_input():
    with pytest.raises(MeshGenerationError):
        generate_voronoi(0)
    with pytest.raises(MeshGenerationError):
        generate_voronoi(4, domain=(0, 0, 0, 1))
    with pytest.raises(MeshGenerationError):
        generate_voronoi(2, seeds=[[0.5, 0.5], [1.5, 0.5]])


def test_face_orientation_convention():
    m = square_grid(3)
    fc = m.face_cells
    interior = fc[:, 1] >= 0
    assert np.all(fc[interior, 0] < fc[interior, 1])
    d = m.cell_centroids[fc[interior, 1]] - m.cell_centroids[fc[interior, 0]]
    assert np.all(np.einsum("ij,ij->i", d, m.face_normals[interior]) > 0)
    b = m.boundary_faces
    assert np.all(np.einsum("ij,ij->i", m.face_midpoints[b] - 0.5, m.face_normals[b]) > 0)


def test_unit_square_identity_exact():
    m = unit_square()
    assert m.geometric_identity_residuals()[0] == 0.0
    assert m.h == pytest.approx(np.sqrt(2))


def test_grid_vertex_separation_ratio():
    rep = validate(square_grid(2))
    np.testing.assert_allclose(rep.vertex_separation_ratio, 0.5 / (np.sqrt(2) * 0.5))
    assert rep.ok and np.all(rep.convex)


def test_quality_report_ratios_in_unit_interval(medium_mesh):
    rep = validate(medium_mesh)
    for r in (rep.inradius_ratio, rep.vertex_separation_ratio):
        assert np.all(r > 0) and np.all(r <= 1)
    assert rep.ok


def test_duplicated_vertex_is_flagged():
    verts = [[0, 0], [1, 0], [1, 0], [1, 1], [0, 1]]
    m = PolyMesh(verts, [[0, 1, 2, 3, 4]], domain=(0, 0, 1, 1))
    rep = validate(m)
    assert rep.flagged == [0]
    assert rep.vertex_separation_ratio[0] == 0.0


def test_validate_lists_every_failure():
    # two cells overlapping the same region: area partition and face adjacency broken
    verts = [[0, 0], [1, 0], [1, 1], [0, 1]]
    m = PolyMesh(verts, [[0, 1, 2, 3]], domain=(0, 0, 2, 1))
    with pytest.raises(MeshValidationError) as exc:
        validate(m)
    assert any("area partition" in f for f in exc.value.failures)


def test_round_trip_bit_exact(tmp_path, coarse_mesh):
    for m in (unit_square(), coarse_mesh):
        p = tmp_path / "m.json"
        save_mesh(m, p)
        back = load_mesh(p)
        np.testing.assert_array_equal(back.vertices, m.vertices)
        assert all(np.array_equal(x, y) for x, y in zip(back.cells, m.cells))


def test_load_clockwise_cell(tmp_path):
    p = tmp_path / "cw.json"
    p.write_text(json.dumps({"vertices": [[0, 0], [1, 0], [1, 1], [0, 1]], "cells": [[0, 3, 2, 1]]}))
    with pytest.raises(MeshOrientationError, match="cell 0"):
        load_mesh(p)


def test_load_index_out_of_range(tmp_path):
    p = tmp_path / "idx.json"
    p.write_text(json.dumps({"vertices": [[0, 0], [1, 0], [1, 1]], "cells": [[0, 1, 3]]}))
    with pytest.raises(MeshIndexError, match="3"):
        load_mesh(p)


@pytest.mark.parametrize(
    "text",
    ["{not json", json.dumps([1, 2]), json.dumps({"vertices": [[0, 0, 0]], "cells": []}),
     json.dumps({"vertices": [[0, 0], [1, 0], [0, 1]], "cells": [[0, 1, 2.5]]})],
)
def test_load_malformed(tmp_path, text):
    p = tmp_path / "bad.json"
    p.write_text(text)
    with pytest.raises(MeshFormatError, match="bad.json"):
        load_mesh(p)


def test_mesh_arrays_are_read_only(coarse_mesh):
    with pytest.raises(ValueError):
        coarse_mesh.cell_areas[0] = 1.0


def test_target_h_search_monotone():
    m = generate_for_target_h(0.2)
    assert m.h <= 0.2
