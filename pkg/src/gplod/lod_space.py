"""LOD space construction: L2-projection constraint, correctors, basis.

The fine-scale space is the kernel of the L2 projection onto the coarse P1
space.  Each coarse hat function gets a corrector from a saddle problem

    [A  C^T] [q ]   [A lam]
    [C   0 ] [mu] = [  0  ]

where A is the bilinear-form matrix (stiffness plus potential mass) on the
fine interior dofs and the rows of C are the L2 moments against coarse hat
functions.  The LOD basis function is lam - q.  In ideal (global) mode the
saddle matrix is factored once and reused for every right-hand side; in
localized mode each corrector is solved on a patch of coarse-element
layers with zero Dirichlet truncation and extended by zero.
"""

import hashlib
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as dense_linalg
from scipy import sparse

from .fem_core import mass_matrix
from .sparse_linalg import factor_symmetric

__all__ = [
    "CacheMismatchError",
    "ConstraintOperator",
    "LodSpace",
    "build_constraint",
    "compute_correctors",
    "plod_project",
    "prolong",
    "cache_key",
    "save_basis",
    "load_basis",
    "lod_space_cached",
]

_RHS_CHUNK = 256
_CACHE_FORMAT_VERSION = 1


class CacheMismatchError(RuntimeError):
    """Corrector cache file is corrupted or describes another configuration."""


@dataclass
class ConstraintOperator:
    """L2 moments of fine interior dofs against coarse interior hats.

    C has shape (n_coarse_interior, n_fine_interior) and C v = 0 exactly
    when the fine function v is L2-orthogonal to the coarse space.
    """

    C: sparse.csr_matrix
    coarse_mass: sparse.csr_matrix  # coarse interior mass, for identity checks


def build_constraint(hierarchy, M_full=None):
    """Assemble the constraint operator of a hierarchy.

    Products of nested P1 functions are integrated exactly through the fine
    mass matrix: C = (P^T M_h) restricted to interior dofs on both levels.
    """
    if M_full is None:
        M_full = mass_matrix(hierarchy.fine)
    P = hierarchy.prolongation_full()
    C_full = (P.T @ M_full).tocsr()
    ci = hierarchy.coarse.interior_nodes()
    fi = hierarchy.fine.interior_nodes()
    C = C_full[ci][:, fi].tocsr()
    M_H = (P.T @ M_full @ P).tocsr()[ci][:, ci].tocsr()
    return ConstraintOperator(C, M_H)


@dataclass
class LodSpace:
    """LOD trial space expressed in fine-mesh P1 coordinates.

    ``basis`` column j holds the fine interior coefficients of the j-th LOD
    basis function; A_lod and M_lod are the Galerkin-projected bilinear-form
    and mass matrices B^T A B and B^T M B (dense, since ideal LOD basis
    functions have global support).  ``timings`` records the saddle
    factorization and corrector solve seconds when freshly computed.
    """

    hierarchy: object
    basis: np.ndarray
    A_lod: np.ndarray
    M_lod: np.ndarray
    localization_radius: object  # None for the ideal (global) method
    potential_descriptor: str
    timings: dict = field(default_factory=dict, repr=False)
    _chol_A: object = field(default=None, repr=False)
    _chol_M: object = field(default=None, repr=False)

    @property
    def n_basis(self):
        return self.basis.shape[1]

    def solve_A(self, rhs):
        if self._chol_A is None:
            self._chol_A = dense_linalg.cho_factor(self.A_lod)
        return dense_linalg.cho_solve(self._chol_A, rhs)

    def solve_M(self, rhs):
        if self._chol_M is None:
            self._chol_M = dense_linalg.cho_factor(self.M_lod)
        return dense_linalg.cho_solve(self._chol_M, rhs)


def _galerkin(B, A):
    """Symmetrized dense triple product B^T A B."""
    AB = A @ B
    G = B.T @ AB
    return 0.5 * (G + G.T)


def compute_correctors(hierarchy, ops_fine, constraint, localization_radius=None):
    """Solve the corrector saddle problems and assemble the LOD space.

    ``ops_fine`` must be assembled with the potential that defines the
    bilinear form.  With ``localization_radius=None`` the global saddle
    matrix is factored once and reused for all coarse basis functions;
    with an integer radius each corrector is computed on its patch.
    """
    A = ops_fine.A.tocsr()
    C = constraint.C
    P_int = hierarchy.prolongation_interior().tocsc()
    n = A.shape[0]
    m = C.shape[0]
    if P_int.shape != (n, m):
        raise ValueError("hierarchy and operators disagree on dof counts")

    timings = {}
    if localization_radius is None:
        B = _solve_ideal(A, C, P_int, n, m, timings)
    else:
        radius = int(localization_radius)
        if radius < 1:
            raise ValueError(f"localization radius must be >= 1, got {localization_radius}")
        B = _solve_localized(hierarchy, A, C, P_int, n, m, radius, timings)

    A_lod = _galerkin(B, A)
    M_lod = _galerkin(B, ops_fine.M)
    return LodSpace(
        hierarchy,
        B,
        A_lod,
        M_lod,
        localization_radius,
        ops_fine.potential.descriptor(),
        timings,
    )


def _solve_ideal(A, C, P_int, n, m, timings):
    t0 = time.perf_counter()
    saddle = sparse.bmat([[A, C.T], [C, None]], format="csc")
    fac = factor_symmetric(saddle)
    timings["factor_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    B = np.empty((n, m))
    for lo in range(0, m, _RHS_CHUNK):
        hi = min(lo + _RHS_CHUNK, m)
        lam = np.asarray(P_int[:, lo:hi].todense())
        rhs = np.zeros((n + m, hi - lo))
        rhs[:n] = A @ lam
        sol = fac.solve(rhs)
        B[:, lo:hi] = lam - sol[:n]
    timings["solve_s"] = time.perf_counter() - t0
    return B


def _coarse_element_adjacency(coarse):
    """Element-to-element adjacency through shared nodes (sparse bool)."""
    t = coarse.n_triangles
    rows = np.repeat(np.arange(t), 3)
    cols = coarse.triangles.ravel()
    incidence = sparse.csr_matrix(
        (np.ones(rows.size, dtype=bool), (rows, cols)),
        shape=(t, coarse.n_nodes),
    )
    return (incidence @ incidence.T).astype(bool)


def _solve_localized(hierarchy, A, C, P_int, n, m, radius, timings=None):
    if timings is None:
        timings = {}
    t_start = time.perf_counter()
    coarse = hierarchy.coarse
    fine = hierarchy.fine
    ci = coarse.interior_nodes()
    fi = fine.interior_nodes()
    fine_int_index = -np.ones(fine.n_nodes, dtype=np.int64)
    fine_int_index[fi] = np.arange(fi.size)

    adjacency = _coarse_element_adjacency(coarse)
    tri_of_node = sparse.csr_matrix(
        (
            np.ones(3 * coarse.n_triangles, dtype=bool),
            (coarse.triangles.ravel(), np.repeat(np.arange(coarse.n_triangles), 3)),
        ),
        shape=(coarse.n_nodes, coarse.n_triangles),
    )
    fine_parent = hierarchy.fine_tri_to_coarse()
    # incident fine triangles per fine node, for the Dirichlet truncation test
    fnode_tris = sparse.csr_matrix(
        (
            np.ones(3 * fine.n_triangles, dtype=bool),
            (fine.triangles.ravel(), np.repeat(np.arange(fine.n_triangles), 3)),
        ),
        shape=(fine.n_nodes, fine.n_triangles),
    )

    Ccsc = C.tocsc()
    incident_all = np.asarray(fnode_tris.sum(axis=1)).ravel()
    B = np.empty((n, m))
    for j in range(m):
        node = ci[j]
        patch = tri_of_node[node].toarray().ravel()
        for _ in range(radius):
            patch = patch | np.asarray(adjacency[patch].sum(axis=0)).ravel().astype(bool)
        tri_ok = patch[fine_parent]
        # free dofs: interior fine nodes strictly inside the patch
        incident_in = np.asarray(fnode_tris[:, tri_ok].sum(axis=1)).ravel()
        free_nodes = (incident_all == incident_in) & ~fine.boundary_mask
        free = fine_int_index[free_nodes & (fine_int_index >= 0)]
        lam = np.asarray(P_int[:, j].todense()).ravel()
        if free.size == 0:
            B[:, j] = lam
            continue
        C_loc = Ccsc[:, free]
        keep_rows = np.flatnonzero(np.diff(C_loc.tocsr().indptr) > 0)
        C_loc = C_loc.tocsr()[keep_rows]
        A_loc = A[free][:, free]
        saddle = sparse.bmat([[A_loc, C_loc.T], [C_loc, None]], format="csc")
        rhs = np.zeros(saddle.shape[0])
        rhs[: free.size] = (A @ lam)[free]
        sol = factor_symmetric(saddle).solve(rhs)
        q = np.zeros(n)
        q[free] = sol[: free.size]
        B[:, j] = lam - q
    timings["factor_s"] = 0.0  # per-patch factorizations folded into solve_s
    timings["solve_s"] = time.perf_counter() - t_start
    return B


def plod_project(space, ops_fine, v_fine):
    """a-orthogonal projection onto the LOD space (coarse-dim coefficients).

    Solves A_lod c = B^T A v; the residual v - B c is a-orthogonal to the
    space by construction, which is verified to 1e-9 relative.
    """
    rhs = space.basis.T @ (ops_fine.A @ np.asarray(v_fine))
    c = space.solve_A(rhs)
    defect = rhs - space.A_lod @ c
    scale = np.linalg.norm(rhs)
    if scale > 0 and np.linalg.norm(defect) > 1e-9 * scale:
        raise ArithmeticError(
            f"projection residual {np.linalg.norm(defect) / scale:.3e} exceeds 1e-9"
        )
    return c


def prolong(space, c):
    """Fine-mesh P1 coefficients of the LOD function with coefficients c."""
    c = np.asarray(c)
    if c.shape[0] != space.n_basis:
        raise ValueError(f"coefficient length {c.shape[0]} != {space.n_basis}")
    return space.basis @ c


def cache_key(domain, coarse_cells, refinements, potential_descriptor, localization_radius):
    """Stable hash identifying one corrector configuration."""
    radius = -1 if localization_radius is None else int(localization_radius)
    text = "|".join(
        [
            f"v{_CACHE_FORMAT_VERSION}",
            f"{domain.xmin!r},{domain.xmax!r},{domain.ymin!r},{domain.ymax!r}",
            str(int(coarse_cells)),
            str(int(refinements)),
            potential_descriptor,
            str(radius),
        ]
    )
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def save_basis(space, path):
    """Persist the basis and projected operators with a validating header."""
    h = space.hierarchy
    radius = -1 if space.localization_radius is None else int(space.localization_radius)
    np.savez(
        path,
        format_version=np.int64(_CACHE_FORMAT_VERSION),
        domain=np.array(
            [h.coarse.domain.xmin, h.coarse.domain.xmax, h.coarse.domain.ymin, h.coarse.domain.ymax]
        ),
        coarse_cells=np.int64(h.coarse.cells_per_side),
        refinements=np.int64(h.refinements),
        potential=np.array(space.potential_descriptor),
        localization_radius=np.int64(radius),
        basis=space.basis,
        A_lod=space.A_lod,
        M_lod=space.M_lod,
    )


def load_basis(path, hierarchy, potential_descriptor, localization_radius=None):
    """Load a cached LodSpace, validating the header before reuse."""
    radius = -1 if localization_radius is None else int(localization_radius)
    try:
        with np.load(path) as data:
            if int(data["format_version"]) != _CACHE_FORMAT_VERSION:
                raise CacheMismatchError("cache format version mismatch")
            dom = hierarchy.coarse.domain
            expected = np.array([dom.xmin, dom.xmax, dom.ymin, dom.ymax])
            if (
                not np.array_equal(data["domain"], expected)
                or int(data["coarse_cells"]) != hierarchy.coarse.cells_per_side
                or int(data["refinements"]) != hierarchy.refinements
                or str(data["potential"]) != potential_descriptor
                or int(data["localization_radius"]) != radius
            ):
                raise CacheMismatchError("cache header does not match the configuration")
            basis = data["basis"]
            A_lod = data["A_lod"]
            M_lod = data["M_lod"]
    except CacheMismatchError:
        raise
    except Exception as exc:
        raise CacheMismatchError(f"unreadable corrector cache: {exc}") from exc
    n_fi = hierarchy.fine.n_interior
    n_ci = hierarchy.coarse.n_interior
    if basis.shape != (n_fi, n_ci):
        raise CacheMismatchError(f"cached basis shape {basis.shape} != {(n_fi, n_ci)}")
    return LodSpace(hierarchy, basis, A_lod, M_lod, localization_radius, potential_descriptor)


def lod_space_cached(hierarchy, ops_fine, localization_radius=None, cache_dir=None, rebuild=False):
    """Build the LOD space, reusing a disk cache when available.

    Returns (space, cache_hit).  A corrupted or mismatched cache file is
    ignored and overwritten.
    """
    descriptor = ops_fine.potential.descriptor()
    path = None
    if cache_dir is not None:
        from pathlib import Path

        key = cache_key(
            hierarchy.coarse.domain,
            hierarchy.coarse.cells_per_side,
            hierarchy.refinements,
            descriptor,
            localization_radius,
        )
        path = Path(cache_dir) / f"correctors_{key}.npz"
        if path.exists() and not rebuild:
            try:
                return load_basis(path, hierarchy, descriptor, localization_radius), True
            except CacheMismatchError as exc:
                warnings.warn(f"rebuilding correctors, cache at {path} unusable: {exc}")
    constraint = build_constraint(hierarchy, ops_fine.M_full)
    space = compute_correctors(hierarchy, ops_fine, constraint, localization_radius)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_basis(space, path)
    return space, False
