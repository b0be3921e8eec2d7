import numpy as np
import pytest

from icefit.errors import ContractViolation
from icefit.mesh import (
    DMG_DIRICHLET,
    DMG_NEUMANN,
    VEL_NOSLIP,
    VEL_STRESS_FREE,
    VEL_SYMMETRY,
    build_box_mesh,
    build_dome_mesh,
    vialov_profile,
)


def test_2x2_mesh_has_8_triangles():
    mesh = build_dome_mesh(2, 2)
    assert mesh.n_triangles == 8
    assert mesh.n_vertices == 9


def test_refinement_quadruples_triangles():
    coarse = build_dome_mesh(4, 3)
    fine = build_dome_mesh(8, 6)
    assert fine.n_triangles == 4 * coarse.n_triangles


def test_every_boundary_edge_has_both_tags():
    mesh = build_dome_mesh(5, 4)
    assert len(mesh.edge_velocity_tag) == len(mesh.boundary_edges)
    assert len(mesh.edge_damage_tag) == len(mesh.boundary_edges)
    for vtag, dtag in zip(mesh.edge_velocity_tag, mesh.edge_damage_tag):
        assert vtag in (VEL_NOSLIP, VEL_SYMMETRY, VEL_STRESS_FREE)
        assert dtag in (DMG_DIRICHLET, DMG_NEUMANN)


def test_boundary_edge_count():
    nx, ny = 6, 3
    mesh = build_dome_mesh(nx, ny)
    assert len(mesh.boundary_edges) == 2 * (nx + ny)


def test_top_edges_are_stress_free_and_damage_dirichlet():
    mesh = build_dome_mesh(5, 4)
    assert mesh.edge_is_top.sum() == 5
    for e in np.flatnonzero(mesh.edge_is_top):
        assert mesh.edge_velocity_tag[e] == VEL_STRESS_FREE
        assert mesh.edge_damage_tag[e] == DMG_DIRICHLET


def test_damage_dirichlet_only_on_top():
    mesh = build_dome_mesh(5, 4)
    for e, dtag in enumerate(mesh.edge_damage_tag):
        assert (dtag == DMG_DIRICHLET) == bool(mesh.edge_is_top[e])


def test_positive_orientation():
    for mesh in (build_dome_mesh(7, 4), build_box_mesh(3, 5)):
        assert np.all(mesh.cell_areas() > 0)


def test_total_area_matches_profile_integral():
    # the mesh fills the region under the piecewise-linear surface samples
    nx, ny = 40, 10
    mesh = build_dome_mesh(nx, ny, length=4.0, thickness=1.0)
    xs = np.linspace(0.0, 4.0, nx + 1)
    hs = vialov_profile(xs, 4.0, 1.0)
    trapezoid = 0.5 * (hs[:-1] + hs[1:]) * np.diff(xs)
    assert mesh.cell_areas().sum() == pytest.approx(trapezoid.sum(), rel=1e-12)


def test_borehole_column_one_cell_wide():
    nx, ny = 8, 5
    mesh = build_dome_mesh(nx, ny)
    assert len(mesh.borehole_cells) == 2 * ny
    # all borehole cells share the mid-span column of quads
    col = (mesh.borehole_cells // 2) % nx
    assert np.all(col == nx // 2)


def test_corner_cells_bottom_right():
    nx, ny = 8, 5
    mesh = build_dome_mesh(nx, ny)
    assert len(mesh.corner_cells) == 2
    verts = mesh.vertices[mesh.triangles[mesh.corner_cells].ravel()]
    assert verts[:, 0].max() == pytest.approx(4.0)
    assert verts[:, 1].min() == 0.0


def test_edge_cells_adjacent():
    mesh = build_dome_mesh(6, 4)
    for e, (va, vb) in enumerate(mesh.boundary_edges):
        tri = mesh.triangles[mesh.edge_cell[e]]
        assert va in tri and vb in tri


def test_degenerate_geometry_rejected():
    with pytest.raises(ContractViolation):
        build_dome_mesh(1, 4)
    with pytest.raises(ContractViolation):
        build_dome_mesh(4, 4, length=-1.0)


def test_vialov_profile_monotone():
    xs = np.linspace(0.0, 4.0, 50)
    h = vialov_profile(xs, 4.0, 1.0)
    assert h[0] == 1.0
    assert np.all(np.diff(h) < 0)
    assert h[-1] > 0.4  # truncated front keeps positive thickness


def test_box_mesh_all_noslip():
    mesh = build_box_mesh(4, 4, all_noslip=True)
    assert all(t == VEL_NOSLIP for t in mesh.edge_velocity_tag)
