"""Uniform right-triangle meshes of rectangles and two-level hierarchies.

All meshes are criss triangulations: an n x n grid of square cells, each
split into two right triangles along the same diagonal.  Red refinement
of such a mesh reproduces the criss mesh of twice the resolution, so the
refined node numbering is canonicalized to the row-major grid ordering.
That makes the fine mesh of every hierarchy bit-identical to the mesh
built directly at the fine resolution, and all spaces of a study can
share one set of fine-mesh operators.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "MeshError",
    "Rect",
    "TriMesh",
    "MeshHierarchy",
    "uniform_mesh",
    "refine",
    "build_hierarchy",
    "same_mesh_hierarchy",
    "export_mesh",
]

# snap tolerance for identifying grid-aligned coordinates after refinement
_GRID_SNAP_TOL = 1e-9


class MeshError(ValueError):
    """Invalid mesh construction arguments or inconsistent hierarchy."""


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle [xmin, xmax] x [ymin, ymax]."""

    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise MeshError(f"degenerate rectangle: {self}")

    @property
    def width(self):
        return self.xmax - self.xmin

    @property
    def height(self):
        return self.ymax - self.ymin

    @property
    def area(self):
        return self.width * self.height


class TriMesh:
    """Conforming triangulation of a rectangle.

    Attributes
    ----------
    nodes : (n, 2) float array of vertex coordinates.
    triangles : (t, 3) int array of CCW vertex index triples.
    boundary_mask : (n,) bool array, True for nodes on the rectangle boundary.
    mesh_size : longest edge length over all triangles.
    level : refinement level relative to the coarsest mesh (0 for uniform_mesh).
    domain : the meshed rectangle.
    cells_per_side : resolution of the underlying square grid.
    """

    def __init__(self, nodes, triangles, boundary_mask, level, domain, cells_per_side):
        self.nodes = np.ascontiguousarray(nodes, dtype=float)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        self.boundary_mask = np.ascontiguousarray(boundary_mask, dtype=bool)
        self.level = int(level)
        self.domain = domain
        self.cells_per_side = int(cells_per_side)
        for arr in (self.nodes, self.triangles, self.boundary_mask):
            arr.setflags(write=False)
        self.mesh_size = float(self._edge_lengths().max())

    def _edge_lengths(self):
        p = self.nodes[self.triangles]
        return np.concatenate(
            [
                np.linalg.norm(p[:, 1] - p[:, 0], axis=1),
                np.linalg.norm(p[:, 2] - p[:, 1], axis=1),
                np.linalg.norm(p[:, 0] - p[:, 2], axis=1),
            ]
        )

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_triangles(self):
        return self.triangles.shape[0]

    @property
    def cell_side(self):
        """Side length of the square grid cells (the H or h of rate tables)."""
        return self.domain.width / self.cells_per_side

    def interior_nodes(self):
        """Indices of nodes not on the boundary, in increasing order."""
        return np.flatnonzero(~self.boundary_mask)

    @property
    def n_interior(self):
        return int(np.count_nonzero(~self.boundary_mask))

    def signed_areas(self):
        p = self.nodes[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def uniform_mesh(domain, cells_per_side):
    """Criss mesh of ``domain`` with ``cells_per_side`` square cells per side.

    Nodes are numbered row-major (x fastest); each cell is split along the
    diagonal from its lower-left to its upper-right corner into two CCW
    triangles.  An n-cell mesh has (n+1)^2 nodes and 2 n^2 triangles.
    """
    n = int(cells_per_side)
    if n < 1:
        raise MeshError(f"cells_per_side must be >= 1, got {cells_per_side}")
    sx = domain.width / n
    sy = domain.height / n
    ix = np.arange(n + 1)
    xs = domain.xmin + ix * sx
    ys = domain.ymin + ix * sy
    # exact endpoints regardless of rounding in xmin + n*sx
    xs[-1] = domain.xmax
    ys[-1] = domain.ymax
    X, Y = np.meshgrid(xs, ys)  # Y varies along rows
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    iy, jx = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    n00 = (iy * (n + 1) + jx).ravel()
    n10 = n00 + 1
    n01 = n00 + (n + 1)
    n11 = n01 + 1
    lower = np.column_stack([n00, n10, n11])
    upper = np.column_stack([n00, n11, n01])
    triangles = np.empty((2 * n * n, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    gx, gy = np.meshgrid(ix, ix)
    boundary = (gx.ravel() == 0) | (gx.ravel() == n) | (gy.ravel() == 0) | (gy.ravel() == n)
    return TriMesh(nodes, triangles, boundary, 0, domain, n)


def _canonical_grid_index(mesh_domain, cells, points):
    """Map grid-aligned points to row-major indices; raises if misaligned."""
    sx = mesh_domain.width / cells
    sy = mesh_domain.height / cells
    fx = (points[:, 0] - mesh_domain.xmin) / sx
    fy = (points[:, 1] - mesh_domain.ymin) / sy
    ix = np.rint(fx).astype(np.int64)
    iy = np.rint(fy).astype(np.int64)
    if np.abs(fx - ix).max() > _GRID_SNAP_TOL or np.abs(fy - iy).max() > _GRID_SNAP_TOL:
        raise MeshError("refined nodes do not lie on the expected grid")
    return ix, iy


def refine(mesh, times=1):
    """Red-refine ``mesh``: every triangle is replaced by 4 similar children.

    Midpoint nodes are appended per unique edge and the result is then
    renumbered to the canonical row-major grid ordering with coordinates
    snapped to the exact grid, so ``refine(uniform_mesh(d, n), 1)`` equals
    ``uniform_mesh(d, 2n)`` up to triangle ordering.
    """
    times = int(times)
    if times < 1:
        raise MeshError(f"times must be >= 1, got {times}")
    out = mesh
    for _ in range(times):
        out = _refine_once(out)
    return out


def _refine_once(mesh):
    tri = mesh.triangles
    n_old = mesh.n_nodes
    # unique edges as sorted pairs; inverse maps each tri edge to its edge id
    raw = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    raw.setflags(write=True)
    raw = np.sort(raw, axis=1)
    edges, inverse, counts = np.unique(raw, axis=0, return_inverse=True, return_counts=True)
    mid_ids = n_old + np.arange(edges.shape[0])
    midpoints = 0.5 * (mesh.nodes[edges[:, 0]] + mesh.nodes[edges[:, 1]])
    # an edge midpoint is on the boundary iff the edge belongs to one triangle
    mid_boundary = counts == 1

    nodes = np.vstack([mesh.nodes, midpoints])
    boundary = np.concatenate([mesh.boundary_mask, mid_boundary])

    nt = tri.shape[0]
    m01 = mid_ids[inverse[:nt]]
    m12 = mid_ids[inverse[nt : 2 * nt]]
    m20 = mid_ids[inverse[2 * nt :]]
    children = np.empty((4 * nt, 3), dtype=np.int64)
    children[0::4] = np.column_stack([tri[:, 0], m01, m20])
    children[1::4] = np.column_stack([m01, tri[:, 1], m12])
    children[2::4] = np.column_stack([m20, m12, tri[:, 2]])
    children[3::4] = np.column_stack([m01, m12, m20])

    cells = 2 * mesh.cells_per_side
    ix, iy = _canonical_grid_index(mesh.domain, cells, nodes)
    canon = iy * (cells + 1) + ix
    if np.unique(canon).size != nodes.shape[0]:
        raise MeshError("refinement produced coincident nodes")
    perm = np.empty(nodes.shape[0], dtype=np.int64)
    perm[canon] = np.arange(nodes.shape[0])
    # snapped coordinates: exact grid positions, bit-identical to uniform_mesh
    sx = mesh.domain.width / cells
    sy = mesh.domain.height / cells
    snapped = np.empty_like(nodes)
    snapped[canon, 0] = np.where(ix == cells, mesh.domain.xmax, mesh.domain.xmin + ix * sx)
    snapped[canon, 1] = np.where(iy == cells, mesh.domain.ymax, mesh.domain.ymin + iy * sy)
    new_boundary = np.empty_like(boundary)
    new_boundary[canon] = boundary
    return TriMesh(
        snapped, canon[children], new_boundary, mesh.level + 1, mesh.domain, cells
    )


class MeshHierarchy:
    """Coarse/fine mesh pair with fine-node locations in the coarse mesh.

    ``child_tri[i]`` is a coarse triangle containing fine node i and
    ``child_bary[i]`` its barycentric coordinates there (weights within
    1e-12 of 0 or 1 are snapped exactly).
    """

    def __init__(self, coarse, fine, refinements, child_tri, child_bary):
        self.coarse = coarse
        self.fine = fine
        self.refinements = int(refinements)
        self.child_tri = np.ascontiguousarray(child_tri, dtype=np.int64)
        self.child_bary = np.ascontiguousarray(child_bary, dtype=float)
        self.child_tri.setflags(write=False)
        self.child_bary.setflags(write=False)
        self._prolongation = None
        self._fine_tri_to_coarse = None

    def prolongation_full(self):
        """Sparse (n_fine_nodes x n_coarse_nodes) P1 interpolation matrix."""
        if self._prolongation is None:
            from scipy import sparse

            rows = np.repeat(np.arange(self.fine.n_nodes), 3)
            cols = self.coarse.triangles[self.child_tri].ravel()
            vals = self.child_bary.ravel()
            keep = vals != 0.0
            P = sparse.csr_matrix(
                (vals[keep], (rows[keep], cols[keep])),
                shape=(self.fine.n_nodes, self.coarse.n_nodes),
            )
            P.sum_duplicates()
            P.sort_indices()
            self._prolongation = P
        return self._prolongation

    def prolongation_interior(self):
        """Prolongation restricted to interior dofs of both meshes."""
        P = self.prolongation_full()
        return P[self.fine.interior_nodes()][:, self.coarse.interior_nodes()].tocsr()

    def fine_tri_to_coarse(self):
        """Index of the coarse triangle containing each fine triangle."""
        if self._fine_tri_to_coarse is None:
            centroids = self.fine.nodes[self.fine.triangles].mean(axis=1)
            tri, _ = _locate_points(self.coarse, centroids)
            self._fine_tri_to_coarse = tri
        return self._fine_tri_to_coarse

    def coarse_node_in_fine(self):
        """Fine node index of each coarse node (coarse nodes are nested)."""
        step = 2**self.refinements
        nc = self.coarse.cells_per_side
        nf = self.fine.cells_per_side
        iy, ix = np.divmod(np.arange(self.coarse.n_nodes), nc + 1)
        return iy * step * (nf + 1) + ix * step


def _locate_points(mesh, points):
    """Locate points in a structured criss mesh: (triangle index, barycentric).

    Points exactly on cell edges or diagonals are assigned deterministically
    (lower cell index / lower triangle); barycentric weights within 1e-12 of
    0 or 1 are snapped and the triple renormalized to sum exactly to 1.
    """
    n = mesh.cells_per_side
    sx = mesh.domain.width / n
    sy = mesh.domain.height / n
    fx = (points[:, 0] - mesh.domain.xmin) / sx
    fy = (points[:, 1] - mesh.domain.ymin) / sy
    cx = np.clip(np.floor(fx).astype(np.int64), 0, n - 1)
    cy = np.clip(np.floor(fy).astype(np.int64), 0, n - 1)
    xi = fx - cx
    eta = fy - cy
    # lower triangle (n00,n10,n11) holds eta <= xi, upper (n00,n11,n01) the rest
    lower = eta <= xi
    tri_idx = 2 * (cy * n + cx) + np.where(lower, 0, 1)
    # barycentric on (n00,n10,n11): lam = (1-xi, xi-eta, eta)
    # barycentric on (n00,n11,n01): lam = (1-eta, xi, eta-xi)
    lam = np.empty((points.shape[0], 3))
    lam[lower, 0] = 1.0 - xi[lower]
    lam[lower, 1] = xi[lower] - eta[lower]
    lam[lower, 2] = eta[lower]
    up = ~lower
    lam[up, 0] = 1.0 - eta[up]
    lam[up, 1] = xi[up]
    lam[up, 2] = eta[up] - xi[up]
    lam[np.abs(lam) < 1e-12] = 0.0
    lam[np.abs(lam - 1.0) < 1e-12] = 1.0
    # renormalize so each triple sums exactly to 1
    dominant = np.argmax(lam, axis=1)
    idx = np.arange(lam.shape[0])
    lam[idx, dominant] = 0.0
    lam[idx, dominant] = 1.0 - lam.sum(axis=1)
    return tri_idx, lam


def build_hierarchy(domain, coarse_cells, refinements):
    """Build the coarse mesh, red-refine it, and locate fine nodes.

    The fine mesh node numbering equals ``uniform_mesh(domain,
    coarse_cells * 2**refinements)``, so every coarse node is the fine node
    at the same grid position.
    """
    refinements = int(refinements)
    if refinements < 1:
        raise MeshError(f"refinements must be >= 1, got {refinements}")
    coarse = uniform_mesh(domain, coarse_cells)
    fine = refine(coarse, refinements)
    child_tri, child_bary = _locate_points(coarse, fine.nodes)
    return MeshHierarchy(coarse, fine, refinements, child_tri, child_bary)


def same_mesh_hierarchy(mesh):
    """Degenerate hierarchy with coarse == fine (the H = h limit case)."""
    # last triangle containing each node, weight 1 on the matching vertex
    child_tri = np.zeros(mesh.n_nodes, dtype=np.int64)
    child_vertex = np.zeros(mesh.n_nodes, dtype=np.int64)
    tri_ids = np.arange(mesh.n_triangles)
    for local in range(3):
        child_tri[mesh.triangles[:, local]] = tri_ids
        child_vertex[mesh.triangles[:, local]] = local
    child_bary = np.zeros((mesh.n_nodes, 3))
    child_bary[np.arange(mesh.n_nodes), child_vertex] = 1.0
    return MeshHierarchy(mesh, mesh, 0, child_tri, child_bary)


def export_mesh(mesh, path):
    """Write a plain-text dump: node lines "x y flag", triangle lines "i j k"."""
    with open(path, "w") as fh:
        fh.write(f"# nodes {mesh.n_nodes}\n")
        for (x, y), b in zip(mesh.nodes, mesh.boundary_mask):
            fh.write(f"{float(x)!r} {float(y)!r} {int(b)}\n")
        fh.write(f"# triangles {mesh.n_triangles}\n")
        for i, j, k in mesh.triangles:
            fh.write(f"{i} {j} {k}\n")
