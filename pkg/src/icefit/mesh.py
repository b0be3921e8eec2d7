"""Structured triangulation of a grounded ice-dome cross-section.

The domain is the half-dome between the divide (left, a symmetry plane) and
a truncated calving front (right).  The upper surface follows a Vialov-type
analytic profile sampled on a structured grid of quads, each split into two
positively oriented triangles.

Boundary conditions are encoded as per-edge tags:

* velocity: ``symmetry`` (left), ``noslip`` (bed), ``stress_free`` (surface
  and front); surface edges additionally carry ``top_surface`` (the observed
  boundary, a subset of the stress-free edges);
* damage: ``dirichlet`` (zero damage at the surface), ``neumann`` (no
  diffusive flux) elsewhere.

Cells also carry two subdomain markers: a one-cell-wide vertical column used
for synthetic borehole observations, and the bottom-right corner quad whose
strain rates are polluted by the change of boundary condition at the front.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation

VEL_SYMMETRY = "symmetry"
VEL_NOSLIP = "noslip"
VEL_STRESS_FREE = "stress_free"
DMG_DIRICHLET = "dirichlet"
DMG_NEUMANN = "neumann"


def vialov_profile(x, length, thickness, margin_fraction=0.9, exponent=3.0):
    """Dome thickness at horizontal position x in [0, length].

    Vialov-type shape ``H * (1 - s^((n+1)/n))^(n/(2n+2))`` with
    ``s = margin_fraction * x / length``; truncating at ``margin_fraction``
    leaves a calving front of positive thickness.
    """
    s = margin_fraction * np.asarray(x, dtype=float) / length
    n = exponent
    return thickness * (1.0 - s ** ((n + 1.0) / n)) ** (n / (2.0 * n + 2.0))


@dataclass
class DomeMesh:
    """Conforming triangle mesh with boundary and subdomain tags."""

    vertices: np.ndarray  # (nv, 2)
    triangles: np.ndarray  # (nt, 3), positively oriented
    boundary_edges: np.ndarray  # (ne, 2) vertex pairs, ordered along boundary
    edge_velocity_tag: list
    edge_damage_tag: list
    edge_is_top: np.ndarray  # (ne,) bool
    edge_cell: np.ndarray  # (ne,) adjacent triangle
    borehole_cells: np.ndarray  # triangle ids of the borehole column
    corner_cells: np.ndarray  # triangle ids excluded from invariant sampling
    shape: tuple = field(default=(0, 0))  # structured (nx, ny)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def cell_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _structured_mesh(xs, ys_of_col, nx, ny, borehole_col):
    """Triangulate the column-wise graph {(x_i, y_ij)}; ys_of_col is (nx+1, ny+1)."""
    nvx, nvy = nx + 1, ny + 1
    verts = np.zeros((nvx * nvy, 2))
    for i in range(nvx):
        for j in range(nvy):
            verts[j * nvx + i] = (xs[i], ys_of_col[i, j])

    tris = []
    for j in range(ny):
        for i in range(nx):
            a = j * nvx + i
            b = j * nvx + i + 1
            c = (j + 1) * nvx + i + 1
            d = (j + 1) * nvx + i
            tris.append((a, b, c))  # lower-right triangle of the quad
            tris.append((a, c, d))  # upper-left triangle
    tris = np.array(tris, dtype=int)

    def quad_cells(i, j):
        base = 2 * (j * nx + i)
        return base, base + 1

    edges, vtags, dtags, is_top, edge_cell = [], [], [], [], []
    for i in range(nx):  # bed, left to right
        edges.append((i, i + 1))
        vtags.append(VEL_NOSLIP)
        dtags.append(DMG_NEUMANN)
        is_top.append(False)
        edge_cell.append(quad_cells(i, 0)[0])
    for j in range(ny):  # calving front, bottom to top
        edges.append((j * nvx + nx, (j + 1) * nvx + nx))
        vtags.append(VEL_STRESS_FREE)
        dtags.append(DMG_NEUMANN)
        is_top.append(False)
        edge_cell.append(quad_cells(nx - 1, j)[0])
    for i in range(nx - 1, -1, -1):  # surface, right to left
        edges.append((ny * nvx + i + 1, ny * nvx + i))
        vtags.append(VEL_STRESS_FREE)
        dtags.append(DMG_DIRICHLET)
        is_top.append(True)
        edge_cell.append(quad_cells(i, ny - 1)[1])
    for j in range(ny - 1, -1, -1):  # symmetry plane, top to bottom
        edges.append(((j + 1) * nvx, j * nvx))
        vtags.append(VEL_SYMMETRY)
        dtags.append(DMG_NEUMANN)
        is_top.append(False)
        edge_cell.append(quad_cells(0, j)[1])

    borehole = []
    for j in range(ny):
        borehole.extend(quad_cells(borehole_col, j))
    corner = list(quad_cells(nx - 1, 0))

    return DomeMesh(
        vertices=verts,
        triangles=tris,
        boundary_edges=np.array(edges, dtype=int),
        edge_velocity_tag=vtags,
        edge_damage_tag=dtags,
        edge_is_top=np.array(is_top, dtype=bool),
        edge_cell=np.array(edge_cell, dtype=int),
        borehole_cells=np.array(sorted(borehole), dtype=int),
        corner_cells=np.array(sorted(corner), dtype=int),
        shape=(nx, ny),
    )


def build_dome_mesh(
    nx: int,
    ny: int,
    length: float = 4.0,
    thickness: float = 1.0,
    margin_fraction: float = 0.9,
) -> DomeMesh:
    """Structured dome mesh with 2*nx*ny triangles."""
    if nx < 2 or ny < 2:
        raise ContractViolation("need at least 2 cells per direction")
    if not (length > 0 and thickness > 0 and 0 < margin_fraction < 1):
        raise ContractViolation("degenerate dome geometry")
    xs = np.linspace(0.0, length, nx + 1)
    surface = vialov_profile(xs, length, thickness, margin_fraction)
    ys = np.array([np.linspace(0.0, h, ny + 1) for h in surface])
    return _structured_mesh(xs, ys, nx, ny, borehole_col=nx // 2)


def build_box_mesh(
    nx: int, ny: int, length: float = 1.0, thickness: float = 1.0, all_noslip=False
) -> DomeMesh:
    """Rectangular variant (verification runs); optionally no-slip everywhere."""
    if nx < 2 or ny < 2:
        raise ContractViolation("need at least 2 cells per direction")
    xs = np.linspace(0.0, length, nx + 1)
    ys = np.array([np.linspace(0.0, thickness, ny + 1) for _ in xs])
    mesh = _structured_mesh(xs, ys, nx, ny, borehole_col=nx // 2)
    if all_noslip:
        mesh.edge_velocity_tag = [VEL_NOSLIP] * len(mesh.edge_velocity_tag)
    return mesh
