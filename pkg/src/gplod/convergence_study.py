"""Convergence-rate studies against a fine-mesh reference ground state.

A study minimizes once on the fine reference mesh, then for each coarse
resolution H builds the (ideal) LOD space over the same fine mesh,
minimizes there, and tabulates H1, L2, energy, and eigenvalue errors with
least-squares convergence rates.  An optional plain-P1 baseline runs the
same pipeline on the coarse spaces themselves.
"""

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .fem_core import assemble_operators, norms
from .gpe_minimizer import (
    FlowParams,
    coarse_fem_space,
    fine_space,
    lod_discrete_space,
    minimize,
    sign_align,
    stationarity_residual,
)
from .lod_space import lod_space_cached
from .mesh import build_hierarchy, uniform_mesh

__all__ = [
    "StudyConfig",
    "StudyRow",
    "StudyResult",
    "run_study",
    "fit_rate",
    "coarse_fem_baseline",
    "write_csv",
    "write_gnuplot",
]

ERROR_COLUMNS = ("h1", "l2", "energy", "eigenvalue")

# a converged reference must satisfy the discrete eigenproblem this tightly
_REFERENCE_RESIDUAL_RTOL = 1e-6
# rows whose error is within this factor of the reference's own estimated
# discretization error get a saturation warning
_SATURATION_FACTOR = 10.0


@dataclass
class StudyConfig:
    """Everything needed to reproduce one study run."""

    domain: object
    potential: object
    beta: float
    reference_cells: int
    H_sequence: list
    flow: FlowParams = field(default_factory=FlowParams)
    baseline_coarse_fem: bool = False
    relative_errors: bool = True
    localization_radius: object = None
    cache_dir: object = None
    use_cache: bool = True
    saturation_check: bool = True
    warm_start: bool = True
    reference_tol_energy: object = None

    def coarse_cells(self, H):
        cells = self.domain.width / H
        if abs(cells - round(cells)) > 1e-9 or round(cells) < 1:
            raise ValueError(f"H={H} does not divide the domain width {self.domain.width}")
        return int(round(cells))

    def refinements(self, H):
        ratio = self.reference_cells / self.coarse_cells(H)
        r = round(np.log2(ratio))
        if abs(ratio - 2**r) > 1e-9 or r < 1:
            raise ValueError(
                f"reference mesh ({self.reference_cells} cells) is not an integer "
                f">=1 number of red refinements away from H={H}"
            )
        return int(r)

    def validate(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not self.H_sequence:
            raise ValueError("H_sequence is empty")
        for H in self.H_sequence:
            self.refinements(H)


@dataclass
class StudyRow:
    H: float
    err_h1: float = np.nan
    err_l2: float = np.nan
    err_energy: float = np.nan
    err_eigenvalue: float = np.nan
    iterations: int = 0
    wall_time_s: float = 0.0
    energy: float = np.nan
    eigenvalue: float = np.nan
    cache_hit: bool = False
    warnings: list = field(default_factory=list)
    failed: bool = False
    message: str = ""

    def errors(self):
        return {
            "h1": self.err_h1,
            "l2": self.err_l2,
            "energy": self.err_energy,
            "eigenvalue": self.err_eigenvalue,
        }


@dataclass
class StudyResult:
    config: StudyConfig
    rows: list
    fitted_rates: dict
    reference: dict
    baseline_rows: list = field(default_factory=list)
    baseline_rates: dict = field(default_factory=dict)
    invalid: bool = False
    message: str = ""
    cache_hits: int = 0
    cache_misses: int = 0


def fit_rate(hs, errs):
    """Least-squares slope of log(err) against log(h).

    Nonpositive errors are excluded with a warning; fewer than two valid
    pairs is an error.
    """
    hs = np.asarray(hs, dtype=float)
    errs = np.asarray(errs, dtype=float)
    valid = np.isfinite(errs) & (errs > 0) & (hs > 0)
    if np.count_nonzero(~valid & np.isfinite(errs)):
        warnings.warn("nonpositive error values excluded from the rate fit")
    if np.count_nonzero(valid) < 2:
        raise ValueError("rate fit needs at least 2 positive (h, err) pairs")
    return float(np.polyfit(np.log(hs[valid]), np.log(errs[valid]), 1)[0])


def _fit_all(rows):
    rates = {}
    ok = [r for r in rows if not r.failed]
    for col in ERROR_COLUMNS:
        try:
            rates[col] = fit_rate([r.H for r in ok], [r.errors()[col] for r in ok])
        except ValueError:
            rates[col] = None
    return rates


def _error_row(row, state, u_ref, ref, ops_fine, relative):
    e = u_ref - state.fine_coeffs
    err_l2, err_h1 = norms(ops_fine, e)
    err_energy = state.energy - ref["energy"]
    if err_energy < -1e-12:
        row.warnings.append(
            f"subspace energy {state.energy!r} below reference {ref['energy']!r}"
        )
    err_energy = max(err_energy, 0.0)
    err_eig = abs(state.eigenvalue - ref["eigenvalue"])
    if relative:
        err_h1 /= ref["h1_norm"]
        err_l2 /= ref["l2_norm"]
        err_energy /= abs(ref["energy"])
        err_eig /= abs(ref["eigenvalue"])
    row.err_h1, row.err_l2 = err_h1, err_l2
    row.err_energy, row.err_eigenvalue = err_energy, err_eig
    row.energy, row.eigenvalue = state.energy, state.eigenvalue
    row.iterations = state.steps_taken
    if not state.converged:
        # errors stay available for inspection, but the row is untrusted
        row.failed = True
        row.message = state.message


def _reference_flow(config):
    tol = config.reference_tol_energy
    if tol is None:
        tol = min(config.flow.tol_energy, 1e-12)
    return FlowParams(
        tau=config.flow.tau,
        tol_energy=tol,
        max_steps=config.flow.max_steps,
        initial_guess=config.flow.initial_guess,
    )


def _compute_reference(config, log):
    mesh = uniform_mesh(config.domain, config.reference_cells)
    ops = assemble_operators(mesh, config.potential)
    space = fine_space(ops)
    t0 = time.perf_counter()
    state = minimize(space, config.potential, config.beta, _reference_flow(config))
    wall = time.perf_counter() - t0
    residual, scale = stationarity_residual(space, state, config.beta)
    l2, h1 = norms(ops, state.fine_coeffs)
    log(
        f"reference: {ops.n_dofs} dofs, E={state.energy:.12g}, "
        f"lambda={state.eigenvalue:.12g}, {state.steps_taken} steps, {wall:.1f}s, "
        f"residual {residual / scale:.2e}"
    )
    ref = {
        "energy": state.energy,
        "eigenvalue": state.eigenvalue,
        "n_dofs": ops.n_dofs,
        "steps": state.steps_taken,
        "residual": residual,
        "residual_scale": scale,
        "l2_norm": l2,
        "h1_norm": h1,
        "wall_time_s": wall,
        "converged": state.converged,
    }
    return mesh, ops, space, state, ref


def _saturation_estimate(config, ops_fine, ref_state, ref, log):
    """Crude reference-discretization-error estimate from a half-resolution
    solve (rate-1 H1 difference; rate-2 Richardson for L2, energy, lambda)."""
    half_cells = config.reference_cells // 2
    if config.reference_cells % 2 or half_cells < 2:
        return None
    try:
        hierarchy = build_hierarchy(config.domain, half_cells, 1)
        ops_half = assemble_operators(hierarchy.coarse, config.potential)
        state = minimize(
            fine_space(ops_half), config.potential, config.beta, _reference_flow(config)
        )
        diff = ref_state.fine_coeffs - hierarchy.prolongation_interior() @ state.coeffs
        l2, h1 = norms(ops_fine, diff)
        est = {
            "h1": h1,
            "l2": l2 / 3.0,
            "energy": abs(state.energy - ref["energy"]) / 3.0,
            "eigenvalue": abs(state.eigenvalue - ref["eigenvalue"]) / 3.0,
        }
        if config.relative_errors:
            est["h1"] /= ref["h1_norm"]
            est["l2"] /= ref["l2_norm"]
            est["energy"] /= abs(ref["energy"])
            est["eigenvalue"] /= abs(ref["eigenvalue"])
        return est
    except Exception as exc:  # estimation is advisory, never fatal
        log(f"saturation estimate skipped: {exc}")
        return None


def _apply_saturation_warnings(rows, estimate):
    if estimate is None:
        return
    for row in rows:
        if row.failed:
            continue
        for col in ERROR_COLUMNS:
            if row.errors()[col] < _SATURATION_FACTOR * estimate[col]:
                row.warnings.append(
                    f"{col} error within {_SATURATION_FACTOR:g}x of the estimated "
                    f"reference discretization error {estimate[col]:.3e}"
                )


def run_study(config, log=None):
    """Run the full study: reference, per-H LOD rows, rate fits, baseline."""
    log = log or (lambda msg: None)
    config.validate()
    mesh_fine, ops_fine, ref_space, ref_state, ref = _compute_reference(config, log)

    invalid = False
    message = ""
    if ref["residual"] > _REFERENCE_RESIDUAL_RTOL * ref["residual_scale"]:
        invalid = True
        message = (
            f"reference stationarity residual {ref['residual'] / ref['residual_scale']:.3e} "
            f"exceeds {_REFERENCE_RESIDUAL_RTOL:g}"
        )
        log(f"WARNING: {message}")

    rows = []
    cache_hits = cache_misses = 0
    for H in config.H_sequence:
        row = StudyRow(H=H)
        t0 = time.perf_counter()
        try:
            hierarchy = build_hierarchy(
                config.domain, config.coarse_cells(H), config.refinements(H)
            )
            space, hit = lod_space_cached(
                hierarchy,
                ops_fine,
                localization_radius=config.localization_radius,
                cache_dir=config.cache_dir if config.use_cache else None,
                rebuild=not config.use_cache,
            )
            row.cache_hit = hit
            cache_hits += hit
            cache_misses += not hit
            dspace = lod_discrete_space(space, ops_fine)
            params = config.flow
            if config.warm_start:
                c0 = space.solve_M(space.basis.T @ (ops_fine.M @ ref_state.fine_coeffs))
                params = FlowParams(
                    tau=params.tau,
                    tol_energy=params.tol_energy,
                    max_steps=params.max_steps,
                    initial_guess=c0,
                )
            state = minimize(dspace, config.potential, config.beta, params)
            state = sign_align(state, ref_state.fine_coeffs, ops_fine.M)
            _error_row(row, state, ref_state.fine_coeffs, ref, ops_fine, config.relative_errors)
        except Exception as exc:
            row.failed = True
            row.message = f"{type(exc).__name__}: {exc}"
        row.wall_time_s = time.perf_counter() - t0
        if row.failed:
            log(f"H={H}: FAILED ({row.message})")
        else:
            log(
                f"H={H}: err_h1={row.err_h1:.3e} err_l2={row.err_l2:.3e} "
                f"err_E={row.err_energy:.3e} err_lam={row.err_eigenvalue:.3e} "
                f"({row.iterations} steps, {row.wall_time_s:.1f}s"
                + (", cached correctors)" if row.cache_hit else ")")
            )
        rows.append(row)

    if config.saturation_check:
        estimate = _saturation_estimate(config, ops_fine, ref_state, ref, log)
        _apply_saturation_warnings(rows, estimate)

    rates = _fit_all(rows)

    baseline_rows = []
    baseline_rates = {}
    if config.baseline_coarse_fem:
        baseline_rows = coarse_fem_baseline(
            config, ops_fine=ops_fine, ref_state=ref_state, ref=ref, log=log
        )
        baseline_rates = _fit_all(baseline_rows)

    return StudyResult(
        config=config,
        rows=rows,
        fitted_rates=rates,
        reference=ref,
        baseline_rows=baseline_rows,
        baseline_rates=baseline_rates,
        invalid=invalid,
        message=message,
        cache_hits=cache_hits,
        cache_misses=cache_misses,
    )


def coarse_fem_baseline(config, ops_fine=None, ref_state=None, ref=None, log=None):
    """Per-H error rows of the plain coarse P1 spaces (same pipeline)."""
    log = log or (lambda msg: None)
    if ops_fine is None:
        _, ops_fine, _, ref_state, ref = _compute_reference(config, log)
    rows = []
    for H in config.H_sequence:
        row = StudyRow(H=H)
        t0 = time.perf_counter()
        try:
            hierarchy = build_hierarchy(
                config.domain, config.coarse_cells(H), config.refinements(H)
            )
            ops_coarse = assemble_operators(hierarchy.coarse, config.potential)
            dspace = coarse_fem_space(hierarchy, ops_coarse)
            params = config.flow
            if config.warm_start:
                P = hierarchy.prolongation_interior()
                from .sparse_linalg import factor_symmetric

                c0 = factor_symmetric(ops_coarse.M.tocsc()).solve(
                    P.T @ (ops_fine.M @ ref_state.fine_coeffs)
                )
                params = FlowParams(
                    tau=params.tau,
                    tol_energy=params.tol_energy,
                    max_steps=params.max_steps,
                    initial_guess=c0,
                )
            state = minimize(dspace, config.potential, config.beta, params)
            state = sign_align(state, ref_state.fine_coeffs, ops_fine.M)
            _error_row(row, state, ref_state.fine_coeffs, ref, ops_fine, config.relative_errors)
        except Exception as exc:
            row.failed = True
            row.message = f"{type(exc).__name__}: {exc}"
        row.wall_time_s = time.perf_counter() - t0
        rows.append(row)
        if row.failed:
            log(f"baseline H={H}: FAILED ({row.message})")
        else:
            log(
                f"baseline H={H}: err_h1={row.err_h1:.3e} err_l2={row.err_l2:.3e} "
                f"err_E={row.err_energy:.3e} err_lam={row.err_eigenvalue:.3e}"
            )
    return rows


def _fmt(value):
    return f"{value:.11e}"


def write_csv(rows, rates, path):
    """CSV with one row per H and trailing comment lines with fitted rates."""
    lines = ["H,err_h1,err_l2,err_energy,err_eigenvalue,iters,wall_time_s"]
    for r in rows:
        lines.append(
            ",".join(
                [
                    _fmt(r.H),
                    _fmt(r.err_h1),
                    _fmt(r.err_l2),
                    _fmt(r.err_energy),
                    _fmt(r.err_eigenvalue),
                    str(r.iterations),
                    f"{r.wall_time_s:.3f}",
                ]
            )
        )
    rate_text = ", ".join(
        f"rate_{col}=" + ("nan" if rates.get(col) is None else _fmt(rates[col]))
        for col in ERROR_COLUMNS
    )
    lines.append(f"# {rate_text}")
    for r in rows:
        for w in r.warnings:
            lines.append(f"# warning H={r.H:g}: {w}")
        if r.failed:
            lines.append(f"# failed H={r.H:g}: {r.message}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_gnuplot(csv_path, path, title="convergence"):
    """Gnuplot script drawing the log-log error curves with order guide lines
    of slopes 3, 4, and 6 anchored at the coarsest H."""
    c = str(csv_path)
    script = f"""# log-log convergence curves with order guide lines
set datafile separator ','
set logscale xy
set key bottom right
set xlabel 'H'
set ylabel 'error'
set title '{title}'
set style data linespoints
stats '{c}' using 1:2 nooutput
H0 = STATS_max_x
E0 = STATS_max_y
plot '{c}' using 1:2 title 'H1 error', \\
     '{c}' using 1:3 title 'L2 error', \\
     '{c}' using 1:4 title 'energy error', \\
     '{c}' using 1:5 title 'eigenvalue error', \\
     E0*(x/H0)**3 title 'order 3' dashtype 2, \\
     E0*(x/H0)**4 title 'order 4' dashtype 3, \\
     E0*(x/H0)**6 title 'order 6' dashtype 4
"""
    with open(path, "w") as fh:
        fh.write(script)
