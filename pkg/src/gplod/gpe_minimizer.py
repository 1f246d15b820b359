"""Constrained energy minimization by a normalized gradient flow.

One flow step is the semi-implicit backward Euler solve

    (M / tau + A + beta N(u^n)) u~ = (1/tau) M u^n,   u^{n+1} = u~ / ||u~||_L2

where N(u) is the density-weighted mass matrix, reassembled every step on
the space's nonlinear-assembly mesh (the fine mesh for LOD states) and
Galerkin-projected into space coordinates.  The iteration stops when the
energy decrease per unit pseudo-time falls below the tolerance.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg as dense_linalg

from .fem_core import (
    assemble_density_mass,
    eigenvalue_from_state,
    energy,
    l4_norm4,
    potential_at_quadrature,
    _tri_geometry,
)
from .sparse_linalg import factor_symmetric

__all__ = [
    "FlowParams",
    "GroundState",
    "DiscreteSpace",
    "fine_space",
    "coarse_fem_space",
    "lod_discrete_space",
    "minimize",
    "sign_align",
    "stationarity_residual",
    "thomas_fermi_values",
    "hat_blob_values",
]


@dataclass
class FlowParams:
    """Pseudo-time step, stopping tolerance on |dE|/tau, and initial guess."""

    tau: float = 0.5
    tol_energy: float = 1e-10
    max_steps: int = 10000
    initial_guess: object = "thomas_fermi"  # or "coarse_hat_blob" or a vector

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.tol_energy <= 0:
            raise ValueError("tol_energy must be positive")


@dataclass
class GroundState:
    """Converged (or diagnosed) state of one minimization.

    ``coeffs`` lives in the space's own coordinates, ``fine_coeffs`` is its
    fine-mesh interior representation.  ``energy_history`` starts with the
    energy of the initial guess.
    """

    coeffs: np.ndarray
    fine_coeffs: np.ndarray
    energy: float
    eigenvalue: float
    steps_taken: int
    energy_history: np.ndarray
    converged: bool
    message: str = ""


class DiscreteSpace:
    """A trial space for the minimization: coarse P1, LOD, or fine P1.

    Carries the space-coordinate operators A (stiffness plus potential
    mass) and M, the map onto the nonlinear-assembly mesh (identity for
    both P1 spaces, the basis matrix for LOD), and the map onto the fine
    mesh (the prolongation for coarse P1).
    """

    def __init__(self, tag, ops, A, M, rep_assembly=None, rep_fine=None, lod=None):
        self.tag = tag
        self.ops = ops  # operators of the nonlinear-assembly mesh
        self.A = A
        self.M = M
        self.rep_assembly = rep_assembly
        self.rep_fine = rep_fine
        self.lod = lod

    @property
    def n_dofs(self):
        return self.A.shape[0]

    def to_assembly(self, c):
        """Coefficients on the nonlinear-assembly mesh (interior dofs)."""
        return c if self.rep_assembly is None else self.rep_assembly @ c

    def to_fine(self, c):
        """Fine-mesh interior representation (prolongation for coarse P1)."""
        return c if self.rep_fine is None else self.rep_fine @ c

    def nonlinear_matrix(self, c):
        """Density mass N(u) Galerkin-projected into space coordinates."""
        N = assemble_density_mass(self.ops, self.to_assembly(c))
        if self.rep_assembly is None:
            return N
        NB = N @ self.rep_assembly
        G = self.rep_assembly.T @ NB
        return 0.5 * (G + G.T)

    def mass_norm(self, c):
        return float(np.sqrt(c @ (self.M @ c)))

    def energy_of(self, c, beta):
        if self.tag == "lod":
            quadratic = 0.5 * float(c @ (self.A @ c))
            if beta == 0.0:
                return quadratic
            return quadratic + 0.25 * beta * self.l4_of(c)
        return energy(self.ops, c, beta)

    def l4_of(self, c):
        return l4_norm4(self.ops.mesh, self.ops.expand(self.to_assembly(c)), self.ops.quad)

    def solve_shifted(self, N, beta, tau, rhs):
        """Solve (M/tau + A + beta N) x = rhs in space coordinates."""
        if self.tag == "lod":
            H = self.M / tau + self.A + beta * N
            return dense_linalg.solve(H, rhs, assume_a="pos")
        H = (self.M / tau + self.A + beta * N).tocsc()
        return factor_symmetric(H).solve(rhs)


def fine_space(ops_fine):
    """Fine-mesh P1 space (the reference space of a study)."""
    return DiscreteSpace("fine_fem", ops_fine, ops_fine.A, ops_fine.M)


def coarse_fem_space(hierarchy, ops_coarse):
    """Plain coarse P1 space; the fine representation is the prolongation."""
    return DiscreteSpace(
        "coarse_fem",
        ops_coarse,
        ops_coarse.A,
        ops_coarse.M,
        rep_fine=hierarchy.prolongation_interior(),
    )


def lod_discrete_space(lod, ops_fine):
    """LOD space; space coordinates are coefficients of the LOD basis."""
    return DiscreteSpace(
        "lod", ops_fine, lod.A_lod, lod.M_lod, rep_assembly=lod.basis,
        rep_fine=lod.basis, lod=lod,
    )


def thomas_fermi_values(mesh, potential, beta, quad):
    """Nodal Thomas-Fermi profile sqrt(max(0, (mu - V)/beta)), unit-mass mu.

    For beta = 0 the profile degenerates to the constant-interior vector.
    The chemical potential mu is found by bisection on the exactly
    integrated mass of the P0/P2 profile max(0, (mu - V)/beta).
    """
    out = np.zeros(mesh.n_nodes)
    interior = ~mesh.boundary_mask
    if beta <= 0.0:
        out[interior] = 1.0
        return out
    vq = potential_at_quadrature(mesh, potential, quad)
    areas, _ = _tri_geometry(mesh)
    wq = quad.weights

    def mass(mu):
        dens = np.maximum(0.0, (mu - vq) / beta)
        return float(np.einsum("t,q,tq->", areas, wq, dens))

    lo = float(vq.min())
    hi = float(vq.max()) + beta / mesh.domain.area + 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mass(mid) < 1.0:
            lo = mid
        else:
            hi = mid
    mu = 0.5 * (lo + hi)
    vn = potential.values(mesh.nodes[:, 0], mesh.nodes[:, 1], mesh.domain)
    out[interior] = np.sqrt(np.maximum(0.0, (mu - vn[interior]) / beta))
    return out


def hat_blob_values(mesh):
    """Nodal tent bump centered in the domain (a crude generic start)."""
    d = mesh.domain
    cx, cy = 0.5 * (d.xmin + d.xmax), 0.5 * (d.ymin + d.ymax)
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    out = np.maximum(0.0, 1.0 - np.abs(2.0 * (x - cx) / d.width)) * np.maximum(
        0.0, 1.0 - np.abs(2.0 * (y - cy) / d.height)
    )
    out[mesh.boundary_mask] = 0.0
    return out


def _initial_coefficients(space, potential, beta, params):
    guess = params.initial_guess
    if isinstance(guess, np.ndarray):
        c = np.array(guess, dtype=float)
        if c.shape[0] != space.n_dofs:
            raise ValueError(f"initial guess length {c.shape[0]} != {space.n_dofs}")
        return c
    if guess == "thomas_fermi":
        nodal = thomas_fermi_values(space.ops.mesh, potential, beta, space.ops.quad)
    elif guess == "coarse_hat_blob":
        nodal = hat_blob_values(space.ops.mesh)
    else:
        raise ValueError(f"unknown initial guess {guess!r}")
    u = space.ops.restrict(nodal)
    if space.tag == "lod":
        # L2 projection of the fine-mesh profile into the LOD space
        return space.lod.solve_M(space.rep_assembly.T @ (space.ops.M @ u))
    return u


def minimize(space, potential, beta, params=None):
    """Normalized gradient flow on the unit L2 sphere of the space.

    Returns a GroundState; non-convergence within max_steps is reported via
    ``converged=False`` rather than an exception.
    """
    if params is None:
        params = FlowParams()
    if beta < 0:
        raise ValueError("beta must be non-negative")
    tau = params.tau
    u = _initial_coefficients(space, potential, beta, params)
    nrm = space.mass_norm(u)
    if nrm == 0.0:
        raise ValueError("initial guess is zero")
    u = u / nrm
    E = space.energy_of(u, beta)
    history = [E]
    converged = False
    steps = 0
    for steps in range(1, params.max_steps + 1):
        N = space.nonlinear_matrix(u)
        rhs = (space.M @ u) / tau
        u_tilde = space.solve_shifted(N, beta, tau, rhs)
        u = u_tilde / space.mass_norm(u_tilde)
        E_new = space.energy_of(u, beta)
        history.append(E_new)
        if abs(E_new - E) / tau < params.tol_energy:
            E = E_new
            converged = True
            break
        E = E_new
    lam = eigenvalue_from_state(E, space.l4_of(u) if beta != 0.0 else 0.0, beta)
    message = "" if converged else f"no convergence in {params.max_steps} steps"
    return GroundState(
        coeffs=u,
        fine_coeffs=space.to_fine(u),
        energy=E,
        eigenvalue=lam,
        steps_taken=steps,
        energy_history=np.asarray(history),
        converged=converged,
        message=message,
    )


def sign_align(state, reference_fine, M_fine):
    """Flip the state's sign if its fine M-inner product with the reference
    is negative; energy and eigenvalue are unchanged."""
    inner = state.fine_coeffs @ (M_fine @ np.asarray(reference_fine))
    if inner >= 0:
        return state
    return replace(state, coeffs=-state.coeffs, fine_coeffs=-state.fine_coeffs)


def stationarity_residual(space, state, beta):
    """Euclidean norm of (A + beta N(u)) u - lambda M u and its scale."""
    u = state.coeffs
    N = space.nonlinear_matrix(u)
    lhs = space.A @ u + beta * (N @ u)
    residual = lhs - state.eigenvalue * (space.M @ u)
    return float(np.linalg.norm(residual)), float(np.linalg.norm(lhs))
