"""P1 finite-element assembly: stiffness, mass, weighted masses, energies.

The default quadrature is a symmetric 6-point degree-4 triangle rule.  The
quartic density term of a P1 function is a degree-4 polynomial, as is the
harmonic-potential mass integrand, so both are integrated exactly and
quadrature drops out of the error budget.  Checkerboard potentials are
piecewise constant per triangle (meshes must align with the squares) and
are integrated exactly through the closed-form element mass matrix.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .sparse_linalg import assemble_from_triplets

__all__ = [
    "AssemblyError",
    "QuadRule",
    "quad_degree2",
    "quad_degree4",
    "quad_degree8",
    "Potential",
    "FeOperators",
    "stiffness_matrix",
    "mass_matrix",
    "potential_mass_matrix",
    "density_mass_matrix",
    "assemble_operators",
    "assemble_density_mass",
    "energy",
    "eigenvalue_from_state",
    "norms",
    "l4_norm4",
    "load_p1",
    "load_triangle_constant",
]


class AssemblyError(ValueError):
    """Assembly precondition violated (alignment, sign, dimensions)."""


@dataclass(frozen=True)
class QuadRule:
    """Barycentric points and weights on the reference triangle.

    Weights sum to 1; an integral is area_T * sum(w_q * f(x_q)).  ``degree``
    is the highest polynomial degree integrated exactly.
    """

    points: np.ndarray
    weights: np.ndarray
    degree: int

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=float))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        if abs(self.weights.sum() - 1.0) > 1e-13:
            raise AssemblyError("quadrature weights must sum to 1")


def _orbit(a, b):
    return [(a, b, b), (b, a, b), (b, b, a)]


def quad_degree2():
    """Edge-midpoint rule, exact through degree 2."""
    pts = _orbit(0.0, 0.5)
    return QuadRule(np.array(pts), np.full(3, 1.0 / 3.0), 2)


def quad_degree4():
    """Symmetric 6-point rule, exact through degree 4 (the default)."""
    pts = _orbit(0.108103018168070, 0.445948490915965) + _orbit(
        0.816847572980459, 0.091576213509771
    )
    w = np.concatenate(
        [np.full(3, 0.223381589678011), np.full(3, 0.109951743655322)]
    )
    return QuadRule(np.array(pts), w, 4)


def quad_degree8():
    """16-point rule, exact through degree 8 (over-integration oracle)."""
    pts = [(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)]
    pts += _orbit(0.081414823414554, 0.459292588292723)
    pts += _orbit(0.658861384496480, 0.170569307751760)
    pts += _orbit(0.898905543365938, 0.050547228317031)
    a, b, c = 0.008394777409958, 0.263112829634638, 0.728492392955404
    pts += [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)]
    w = np.concatenate(
        [
            [0.144315607677787],
            np.full(3, 0.095091634267285),
            np.full(3, 0.103217370534718),
            np.full(3, 0.032458497623198),
            np.full(6, 0.027230314174435),
        ]
    )
    return QuadRule(np.array(pts), w, 8)


DEFAULT_QUAD = quad_degree4()


class Potential:
    """Trapping potential V >= 0: constant, harmonic, checkerboard, or callable."""

    def __init__(self, kind, value=None, square_side=None, low=None, high=None, func=None):
        self.kind = kind
        self.value = value
        self.square_side = square_side
        self.low = low
        self.high = high
        self.func = func

    @classmethod
    def constant(cls, value):
        if value < 0:
            raise AssemblyError(f"potential must be non-negative, got {value}")
        return cls("constant", value=float(value))

    @classmethod
    def harmonic(cls):
        """V(x, y) = 0.5 (x^2 + y^2)."""
        return cls("harmonic")

    @classmethod
    def checkerboard(cls, square_side, low=0.0, high=1.0):
        """Alternating squares anchored at the domain corner; low at (0, 0)."""
        if square_side <= 0:
            raise AssemblyError("square_side must be positive")
        if low < 0 or high < 0:
            raise AssemblyError("checkerboard values must be non-negative")
        return cls("checkerboard", square_side=float(square_side), low=float(low), high=float(high))

    @classmethod
    def from_callable(cls, func):
        return cls("callable", func=func)

    @property
    def piecewise_constant(self):
        return self.kind in ("constant", "checkerboard")

    def values(self, x, y, domain=None):
        if self.kind == "constant":
            return np.full(np.shape(x), self.value)
        if self.kind == "harmonic":
            return 0.5 * (np.asarray(x) ** 2 + np.asarray(y) ** 2)
        if self.kind == "callable":
            return np.asarray(self.func(x, y), dtype=float)
        if self.kind == "checkerboard":
            if domain is None:
                raise AssemblyError("checkerboard evaluation needs the domain anchor")
            i = np.floor((np.asarray(x) - domain.xmin) / self.square_side).astype(np.int64)
            j = np.floor((np.asarray(y) - domain.ymin) / self.square_side).astype(np.int64)
            return np.where((i + j) % 2 == 0, self.low, self.high).astype(float)
        raise AssemblyError(f"unknown potential kind {self.kind!r}")

    def triangle_values(self, mesh):
        """Per-triangle constant values (centroid samples)."""
        centroids = mesh.nodes[mesh.triangles].mean(axis=1)
        return self.values(centroids[:, 0], centroids[:, 1], mesh.domain)

    def check_alignment(self, mesh):
        """Checkerboard squares must be unions of mesh cells."""
        if self.kind != "checkerboard":
            return
        ratio = self.square_side / mesh.cell_side
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise AssemblyError(
                f"checkerboard square side {self.square_side} is not an integer "
                f"multiple of the mesh cell side {mesh.cell_side}"
            )
        nsq = mesh.domain.width / self.square_side
        if abs(nsq - round(nsq)) > 1e-9:
            raise AssemblyError(
                f"domain width {mesh.domain.width} is not an integer number of "
                f"checkerboard squares of side {self.square_side}"
            )

    def descriptor(self):
        if self.kind == "constant":
            return f"constant({self.value!r})"
        if self.kind == "harmonic":
            return "harmonic"
        if self.kind == "checkerboard":
            return f"checkerboard(side={self.square_side!r},low={self.low!r},high={self.high!r})"
        return f"callable({getattr(self.func, '__name__', 'anonymous')})"

    def __repr__(self):
        return f"Potential({self.descriptor()})"


def _tri_geometry(mesh):
    """Areas (t,) and P1 basis gradients (t, 3, 2) per triangle."""
    p = mesh.nodes[mesh.triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    if np.any(det <= 0):
        raise AssemblyError("mesh contains non-positive triangle areas")
    areas = 0.5 * det
    grads = np.empty((mesh.n_triangles, 3, 2))
    # grad(lambda_i) = perp(edge opposite i) / (2 area)
    grads[:, 1, 0] = e2[:, 1] / det
    grads[:, 1, 1] = -e2[:, 0] / det
    grads[:, 2, 0] = -e1[:, 1] / det
    grads[:, 2, 1] = e1[:, 0] / det
    grads[:, 0] = -grads[:, 1] - grads[:, 2]
    return areas, grads


def _scatter(mesh, local):
    """Assemble per-triangle 3x3 blocks into a full-node CSR matrix."""
    tri = mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    return assemble_from_triplets(mesh.n_nodes, mesh.n_nodes, rows, cols, local.ravel())


_MASS_REF = (np.full((3, 3), 1.0) + np.eye(3)) / 12.0


def stiffness_matrix(mesh):
    """Full-node stiffness: exact element integrals of grad phi_i . grad phi_j."""
    areas, grads = _tri_geometry(mesh)
    local = np.einsum("tid,tjd->tij", grads, grads) * areas[:, None, None]
    return _scatter(mesh, local)


def mass_matrix(mesh):
    """Full-node mass matrix via the closed-form P1 element matrix."""
    areas, _ = _tri_geometry(mesh)
    local = areas[:, None, None] * _MASS_REF[None, :, :]
    return _scatter(mesh, local)


def quad_points_xy(mesh, quad):
    """Physical quadrature point coordinates, shape (t, q, 2)."""
    p = mesh.nodes[mesh.triangles]
    return np.einsum("qi,tid->tqd", quad.points, p)


def potential_at_quadrature(mesh, potential, quad):
    """Potential values at all quadrature points, shape (t, q)."""
    if potential.piecewise_constant:
        return np.broadcast_to(
            potential.triangle_values(mesh)[:, None],
            (mesh.n_triangles, quad.weights.size),
        )
    xy = quad_points_xy(mesh, quad)
    return potential.values(xy[..., 0], xy[..., 1], mesh.domain)


def _weighted_mass(mesh, weights_tq, quad):
    """Full-node matrix of integrals w(x) phi_i phi_j with w given at quad points."""
    areas, _ = _tri_geometry(mesh)
    lam = quad.points
    local = np.einsum("tq,q,qi,qj->tij", weights_tq, quad.weights, lam, lam)
    return _scatter(mesh, local * areas[:, None, None])


def potential_mass_matrix(mesh, potential, quad=DEFAULT_QUAD):
    """Full-node potential-weighted mass; exact for harmonic and aligned
    checkerboard potentials."""
    potential.check_alignment(mesh)
    if potential.piecewise_constant:
        vt = potential.triangle_values(mesh)
        if vt.min() < 0:
            raise AssemblyError(f"negative potential sample {vt.min()}")
        areas, _ = _tri_geometry(mesh)
        local = (vt * areas)[:, None, None] * _MASS_REF[None, :, :]
        return _scatter(mesh, local)
    vq = potential_at_quadrature(mesh, potential, quad)
    if vq.min() < -1e-12:
        raise AssemblyError(f"negative potential sample {vq.min()}")
    return _weighted_mass(mesh, vq, quad)


def density_mass_matrix(mesh, u_full, quad=DEFAULT_QUAD):
    """Full-node matrix of integrals |u_h|^2 phi_i phi_j, exact for P1 u_h."""
    u_full = np.asarray(u_full)
    if u_full.shape[0] != mesh.n_nodes:
        raise AssemblyError(
            f"state length {u_full.shape[0]} != node count {mesh.n_nodes}"
        )
    uq = u_full[mesh.triangles] @ quad.points.T  # (t, q)
    return _weighted_mass(mesh, uq**2, quad)


@dataclass
class FeOperators:
    """Assembled P1 operators over interior (non-boundary) dofs.

    K, M, MV are the stiffness, mass, and potential-weighted mass restricted
    to interior dofs; the *_full variants keep all nodes (no boundary
    elimination).  ``dof_map`` lists the node index of each interior dof.
    """

    mesh: object
    potential: Potential
    quad: QuadRule
    K: sparse.csr_matrix
    M: sparse.csr_matrix
    MV: sparse.csr_matrix
    K_full: sparse.csr_matrix
    M_full: sparse.csr_matrix
    MV_full: sparse.csr_matrix
    dof_map: np.ndarray
    _A: sparse.csr_matrix = field(default=None, repr=False)

    @property
    def n_dofs(self):
        return self.dof_map.size

    @property
    def A(self):
        """The bilinear form matrix K + MV (gradient and potential terms)."""
        if self._A is None:
            self._A = (self.K + self.MV).tocsr()
        return self._A

    def expand(self, u_interior):
        """Zero-pad interior coefficients to a full nodal vector."""
        u_interior = np.asarray(u_interior)
        full = np.zeros(u_interior.shape[:-1] + (self.mesh.n_nodes,))
        full[..., self.dof_map] = u_interior
        return full

    def restrict(self, u_full):
        return np.asarray(u_full)[..., self.dof_map]


def assemble_operators(mesh, potential, quad=None):
    """Assemble stiffness, mass, and potential mass with Dirichlet elimination."""
    if quad is None:
        quad = DEFAULT_QUAD
    if quad.degree < 2:
        raise AssemblyError("mass assembly needs quadrature exactness >= 2")
    if potential.kind in ("harmonic", "callable") and quad.degree < 4:
        raise AssemblyError("potential mass with a smooth V needs exactness >= 4")
    K_full = stiffness_matrix(mesh)
    M_full = mass_matrix(mesh)
    MV_full = potential_mass_matrix(mesh, potential, quad)
    dof = mesh.interior_nodes()
    K = K_full[dof][:, dof].tocsr()
    M = M_full[dof][:, dof].tocsr()
    MV = MV_full[dof][:, dof].tocsr()
    return FeOperators(mesh, potential, quad, K, M, MV, K_full, M_full, MV_full, dof)


def assemble_density_mass(ops, u_interior):
    """Interior-dof density mass N(u) of a state given in interior coordinates."""
    N_full = density_mass_matrix(ops.mesh, ops.expand(u_interior), ops.quad)
    dof = ops.dof_map
    return N_full[dof][:, dof].tocsr()


def l4_norm4(mesh, u_full, quad=DEFAULT_QUAD):
    """Exact integral of |u_h|^4 for a P1 function given by nodal values."""
    u_full = np.asarray(u_full)
    if u_full.shape[0] != mesh.n_nodes:
        raise AssemblyError(
            f"state length {u_full.shape[0]} != node count {mesh.n_nodes}"
        )
    areas, _ = _tri_geometry(mesh)
    uq = u_full[mesh.triangles] @ quad.points.T
    return float(np.einsum("t,q,tq->", areas, quad.weights, uq**4))


def energy(ops, u_interior, beta):
    """Gross-Pitaevskii energy 1/2 a(u,u) + beta/4 * int |u|^4."""
    u = np.asarray(u_interior)
    quadratic = 0.5 * (u @ (ops.K @ u)) + 0.5 * (u @ (ops.MV @ u))
    if beta == 0.0:
        return float(quadratic)
    return float(quadratic + 0.25 * beta * l4_norm4(ops.mesh, ops.expand(u), ops.quad))


def eigenvalue_from_state(energy_value, l4_norm4_value, beta):
    """Ground-state eigenvalue lambda = 2 E + (beta/2) ||u||_{L4}^4."""
    return 2.0 * energy_value + 0.5 * beta * l4_norm4_value


def norms(ops, e_interior):
    """(L2, H1) norms of an interior-dof coefficient vector.

    The H1 norm is the full norm sqrt(||e||^2 + ||grad e||^2); the potential
    term is excluded.
    """
    e = np.asarray(e_interior)
    l2sq = e @ (ops.M @ e)
    h1sq = l2sq + e @ (ops.K @ e)
    return float(np.sqrt(max(l2sq, 0.0))), float(np.sqrt(max(h1sq, 0.0)))


def load_p1(mesh, f_full):
    """Load vector (f, phi_i) for a P1 density f given by nodal values."""
    return mass_matrix(mesh) @ np.asarray(f_full)


def load_triangle_constant(mesh, f_tri):
    """Load vector (f, phi_i) for a piecewise-constant f given per triangle."""
    areas, _ = _tri_geometry(mesh)
    contrib = (np.asarray(f_tri) * areas / 3.0)[:, None].repeat(3, axis=1)
    out = np.zeros(mesh.n_nodes)
    np.add.at(out, mesh.triangles.ravel(), contrib.ravel())
    return out
