import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_acute_pair, make_right_pair
from crosspnp.mesh import (DIRICHLET, INTERNAL, NEUMANN,
                           AdmissibilityViolation, TriMesh,
                           check_admissibility, read_mesh, regular_refine,
                           write_mesh)
from crosspnp.scenarios import rectangle_lattice_mesh


def test_two_triangle_square_connectivity():
    mesh = make_right_pair()
    assert mesh.num_vertices == 4
    assert mesh.num_triangles == 2
    assert mesh.num_edges == 5
    assert (mesh.edge_kind == INTERNAL).sum() == 1
    assert np.isclose(mesh.tri_areas.sum(), 1.0)


def test_edges_are_sorted_pairs_and_consistent():
    mesh = make_acute_pair()
    assert (mesh.edges[:, 0] < mesh.edges[:, 1]).all()
    # tri_edges[t, l] joins local vertices l and (l+1) % 3
    for t in range(mesh.num_triangles):
        for ell in range(3):
            a = mesh.triangles[t, ell]
            b = mesh.triangles[t, (ell + 1) % 3]
            e = mesh.tri_edges[t, ell]
            assert {a, b} == set(mesh.edges[e])


def test_edge_tris_lower_index_first():
    mesh = regular_refine(make_acute_pair())
    internal = mesh.edge_kind == INTERNAL
    assert (mesh.edge_tris[internal, 0] < mesh.edge_tris[internal, 1]).all()
    boundary = ~internal
    assert (mesh.edge_tris[boundary, 1] == -1).all()


def test_hat_gradients_partition_of_unity():
    mesh = regular_refine(make_acute_pair())
    assert np.allclose(mesh.hat_gradients.sum(axis=1), 0.0, atol=1e-14)


def test_regular_refine_counts_and_areas():
    mesh = make_acute_pair()
    fine = regular_refine(mesh)
    assert fine.num_triangles == 4 * mesh.num_triangles
    assert np.isclose(fine.tri_areas.sum(), mesh.tri_areas.sum())
    # children of parent t occupy slots 4t..4t+3 with a quarter area each
    child_sums = fine.tri_areas.reshape(-1, 4).sum(axis=1)
    assert np.allclose(child_sums, mesh.tri_areas)


def test_regular_refine_children_cover_parent():
    mesh = make_acute_pair()
    fine = regular_refine(mesh)
    for t in range(mesh.num_triangles):
        parent = mesh.vertices[mesh.triangles[t]]
        lo, hi = parent.min(axis=0), parent.max(axis=0)
        for c in range(4 * t, 4 * t + 4):
            child = fine.vertices[fine.triangles[c]]
            assert (child >= lo - 1e-12).all()
            assert (child <= hi + 1e-12).all()


def test_refine_preserves_boundary_tags():
    mesh = rectangle_lattice_mesh(4, 4, dirichlet="leftright")
    fine = regular_refine(mesh)
    for m in (mesh, fine):
        names = {m.edge_tag_names[e]
                 for e in np.flatnonzero(m.edge_kind == DIRICHLET)}
        assert names == {"left", "right"}
    assert (fine.edge_kind == NEUMANN).sum() == 2 * \
        (mesh.edge_kind == NEUMANN).sum()


def test_acute_pair_is_admissible():
    report = check_admissibility(make_acute_pair())
    assert report.ok


def test_right_pair_hypotenuse_is_inadmissible():
    mesh = make_right_pair()
    report = check_admissibility(mesh)
    assert not report.ok
    with pytest.raises(AdmissibilityViolation):
        mesh.require_admissible()


def test_refining_right_triangles_breaks_admissibility():
    fine = regular_refine(make_right_pair())
    assert not check_admissibility(fine).ok


@pytest.mark.parametrize("nx", [1, 2, 3, 5, 8, 16])
def test_lattice_meshes_admissible(nx):
    mesh = rectangle_lattice_mesh(nx, max(1, nx // 2))
    assert check_admissibility(mesh).ok


def test_lattice_transmissibilities_positive():
    mesh = rectangle_lattice_mesh(6, 3)
    active = mesh.edge_kind != NEUMANN
    assert (mesh.transmissibility[active] > 0).all()


def test_mesh_file_roundtrip_bitwise(tmp_path):
    mesh = rectangle_lattice_mesh(5, 3, dirichlet="leftright")
    p1 = tmp_path / "a.msh"
    p2 = tmp_path / "b.msh"
    write_mesh(mesh, str(p1))
    back = read_mesh(str(p1))
    write_mesh(back, str(p2))
    assert p1.read_bytes() == p2.read_bytes()
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.triangles, mesh.triangles)
    assert back.boundary_tags_as_list() == mesh.boundary_tags_as_list()


def test_dual_geometry_orthogonality():
    # circumcenter cell points sit on every shared edge's perpendicular
    # bisector, so the orthogonality defect vanishes identically
    mesh = rectangle_lattice_mesh(6, 4)
    assert mesh.orthogonality_defect.max() < 1e-12


@settings(max_examples=20, deadline=None)
@given(nx=st.integers(min_value=1, max_value=9),
       ny=st.integers(min_value=1, max_value=5))
def test_lattice_area_and_refine_area_invariant(nx, ny):
    mesh = rectangle_lattice_mesh(nx, ny, width=2.0, height=1.0)
    assert np.isclose(mesh.tri_areas.sum(), 2.0)
    fine = regular_refine(mesh)
    assert np.isclose(fine.tri_areas.sum(), 2.0)
    assert fine.num_triangles == 4 * mesh.num_triangles


def test_untagged_boundary_edge_rejected():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 0.9]])
    tris = np.array([[0, 1, 2]])
    with pytest.raises(Exception):
        TriMesh(pts, tris, [(0, 1, "N"), (1, 2, "N")])
