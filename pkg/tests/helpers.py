"""Shared test utilities: oracles and small study drivers."""

import numpy as np

from gplod.convergence_study import fit_rate
from gplod.fem_core import (
    Potential,
    assemble_operators,
    load_triangle_constant,
    norms,
)
from gplod.lod_space import build_constraint, compute_correctors, plod_project
from gplod.mesh import Rect, build_hierarchy, uniform_mesh
from gplod.sparse_linalg import factor_symmetric


def canonical_triangles(triangles):
    """Rotation-normalized, lexicographically sorted triangle array."""
    t = np.array(triangles)
    roll = np.argmin(t, axis=1)
    out = np.empty_like(t)
    for k in range(3):
        sel = roll == k
        out[sel] = np.roll(t[sel], -k, axis=1)
    order = np.lexsort((out[:, 2], out[:, 1], out[:, 0]))
    return out[order]


def constrained_random(constraint, rng, size=1):
    """Random fine vectors in the kernel of the constraint operator."""
    C = constraint.C
    CCt = (C @ C.T).toarray()
    w = rng.standard_normal((C.shape[1], size))
    w -= C.T @ np.linalg.solve(CCt, C @ w)
    return w[:, 0] if size == 1 else w


_projection_memo = {}


def projection_rate_study(smooth):
    """H1/L2 rates of the a-orthogonal projection for a linear source problem.

    With ``smooth=True`` the source is the P1 interpolant of
    sin(pi x) sin(pi y) (in H2, vanishing on the boundary); otherwise a
    seeded random 0/1 value per fine triangle, a genuinely L2-only source.
    Errors are relative, measured against the fine solution of
    a(v, w) = (f, w); results are memoized for reuse across test modules.
    """
    if smooth in _projection_memo:
        return _projection_memo[smooth]
    fine_cells, coarse_list = (128, (8, 16, 32)) if smooth else (64, (4, 8, 16))
    domain = Rect(0.0, 1.0, 0.0, 1.0)
    mesh = uniform_mesh(domain, fine_cells)
    ops = assemble_operators(mesh, Potential.constant(1.0))
    if smooth:
        f_full = np.sin(np.pi * mesh.nodes[:, 0]) * np.sin(np.pi * mesh.nodes[:, 1])
        rhs_full = ops.M_full @ f_full
    else:
        f_tri = np.random.default_rng(7).choice([0.0, 1.0], size=mesh.n_triangles)
        rhs_full = load_triangle_constant(mesh, f_tri)
    v = factor_symmetric(ops.A.tocsc()).solve(ops.restrict(rhs_full))
    ref_l2, ref_h1 = norms(ops, v)

    Hs, errs_h1, errs_l2 = [], [], []
    for coarse in coarse_list:
        refinements = int(round(np.log2(fine_cells / coarse)))
        hierarchy = build_hierarchy(domain, coarse, refinements)
        constraint = build_constraint(hierarchy, ops.M_full)
        space = compute_correctors(hierarchy, ops, constraint)
        c = plod_project(space, ops, v)
        e_l2, e_h1 = norms(ops, v - space.basis @ c)
        Hs.append(1.0 / coarse)
        errs_h1.append(e_h1 / ref_h1)
        errs_l2.append(e_l2 / ref_l2)
    result = {
        "h1": fit_rate(Hs, errs_h1),
        "l2": fit_rate(Hs, errs_l2),
        "errors_h1": errs_h1,
        "errors_l2": errs_l2,
    }
    _projection_memo[smooth] = result
    return result
