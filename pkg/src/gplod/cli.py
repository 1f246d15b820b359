"""Command-line interface: solve, study, and correctors commands.

Configuration files are INI text with [domain], [potential], [flow],
[study], and [solve] sections (see the presets shipped in
``gplod/presets``).  Every run writes a JSON manifest next to its outputs
recording the fully resolved configuration, so any CSV can be reproduced
from its manifest alone.

Plain-text dump formats: ``--dump-solution`` writes one line "x y value"
per fine-mesh node; ``--dump-mesh`` writes a "# nodes N" header, one line
"x y boundary_flag" per node, a "# triangles T" header, and one line
"i j k" of node indices per triangle.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""

import argparse
import configparser
import json
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .convergence_study import StudyConfig, run_study, write_csv, write_gnuplot
from .fem_core import Potential, assemble_operators
from .gpe_minimizer import (
    FlowParams,
    coarse_fem_space,
    fine_space,
    lod_discrete_space,
    minimize,
)
from .lod_space import lod_space_cached
from .mesh import Rect, build_hierarchy, export_mesh, uniform_mesh

USAGE_ERROR = 1
NUMERICAL_ERROR = 2

_PRESETS = ("harmonic", "checkerboard", "checkerboard_reduced", "smoke")


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


def _resolve_config_path(name_or_path):
    """A literal path, or the name of a shipped preset."""
    p = Path(name_or_path)
    if p.exists():
        return p
    if name_or_path in _PRESETS:
        return resources.files("gplod.presets") / f"{name_or_path}.cfg"
    raise ConfigError(f"config file not found: {name_or_path}")


def parse_config(text, overrides=()):
    """Parse INI text plus ``section.key=value`` overrides into a dict."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse failure: {exc}") from exc
    resolved = {s: dict(parser[s]) for s in parser.sections()}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        if "." not in key:
            raise ConfigError(f"override key {key!r} must be section.key")
        section, name = key.split(".", 1)
        resolved.setdefault(section.strip(), {})[name.strip()] = value.strip()
    return resolved


def serialize_config(resolved):
    """Canonical INI text for a resolved configuration."""
    lines = []
    for section in sorted(resolved):
        lines.append(f"[{section}]")
        for key in sorted(resolved[section]):
            lines.append(f"{key} = {resolved[section][key]}")
        lines.append("")
    return "\n".join(lines)


def _get(resolved, section, key, default=None, cast=str):
    try:
        raw = resolved[section][key]
    except KeyError:
        if default is not None or key in ("localization_radius", "reference_tol_energy", "cache_dir"):
            return default
        raise ConfigError(f"missing config key [{section}] {key}")
    if cast is bool:
        lowered = raw.strip().lower()
        if lowered in ("true", "yes", "1", "on"):
            return True
        if lowered in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"[{section}] {key}: expected a boolean, got {raw!r}")
    try:
        return cast(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc


def _domain_from(resolved):
    return Rect(
        _get(resolved, "domain", "xmin", cast=float),
        _get(resolved, "domain", "xmax", cast=float),
        _get(resolved, "domain", "ymin", cast=float),
        _get(resolved, "domain", "ymax", cast=float),
    )


def _potential_from(resolved):
    kind = _get(resolved, "potential", "kind")
    if kind == "constant":
        return Potential.constant(_get(resolved, "potential", "value", cast=float))
    if kind == "harmonic":
        return Potential.harmonic()
    if kind == "checkerboard":
        return Potential.checkerboard(
            _get(resolved, "potential", "square_side", cast=float),
            low=_get(resolved, "potential", "low", default=0.0, cast=float),
            high=_get(resolved, "potential", "high", default=1.0, cast=float),
        )
    raise ConfigError(f"unknown potential kind {kind!r}")


def _flow_from(resolved):
    return FlowParams(
        tau=_get(resolved, "flow", "tau", default=0.5, cast=float),
        tol_energy=_get(resolved, "flow", "tol_energy", default=1e-10, cast=float),
        max_steps=_get(resolved, "flow", "max_steps", default=10000, cast=int),
        initial_guess=_get(resolved, "flow", "initial_guess", default="thomas_fermi"),
    )


def study_config_from(resolved, out_dir=None, use_cache=True, relative=None):
    """Build a StudyConfig from a resolved configuration dict."""
    H_text = _get(resolved, "study", "h_sequence")
    H_sequence = [float(tok) for tok in H_text.replace(",", " ").split()]
    radius = resolved.get("study", {}).get("localization_radius", "").strip()
    cache_dir = resolved.get("study", {}).get("cache_dir", "").strip()
    if not cache_dir and out_dir is not None:
        cache_dir = str(Path(out_dir) / "correctors")
    ref_tol = resolved.get("study", {}).get("reference_tol_energy", "").strip()
    cfg = StudyConfig(
        domain=_domain_from(resolved),
        potential=_potential_from(resolved),
        beta=_get(resolved, "study", "beta", cast=float),
        reference_cells=_get(resolved, "study", "reference_cells", cast=int),
        H_sequence=H_sequence,
        flow=_flow_from(resolved),
        baseline_coarse_fem=_get(resolved, "study", "baseline_coarse_fem", default=False, cast=bool),
        relative_errors=_get(resolved, "study", "relative_errors", default=True, cast=bool),
        localization_radius=int(radius) if radius else None,
        cache_dir=cache_dir or None,
        use_cache=use_cache,
        saturation_check=_get(resolved, "study", "saturation_check", default=True, cast=bool),
        warm_start=_get(resolved, "study", "warm_start", default=True, cast=bool),
        reference_tol_energy=float(ref_tol) if ref_tol else None,
    )
    if relative is not None:
        cfg.relative_errors = relative
    cfg.validate()
    return cfg


def _write_manifest(path, command, config_path, resolved, overrides, outputs, extra=None):
    manifest = {
        "tool": "gplod",
        "version": __version__,
        "command": command,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "config_path": str(config_path),
        "overrides": list(overrides),
        "resolved_config": resolved,
        "outputs": [str(o) for o in outputs],
    }
    if extra:
        manifest.update(extra)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fmt12(value):
    return f"{value:.12g}"


def cmd_solve(args):
    config_path = _resolve_config_path(args.config)
    resolved = parse_config(config_path.read_text(), args.overrides)
    domain = _domain_from(resolved)
    potential = _potential_from(resolved)
    flow = _flow_from(resolved)
    space_kind = _get(resolved, "solve", "space", default="fine_fem")
    cells = _get(resolved, "solve", "cells", cast=int)
    beta = _get(resolved, "solve", "beta", cast=float)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    mesh = uniform_mesh(domain, cells)
    cache = {"hits": 0, "misses": 0}
    if space_kind == "fine_fem":
        ops = assemble_operators(mesh, potential)
        space = fine_space(ops)
        fine_ops = ops
    elif space_kind in ("lod", "coarse_fem"):
        coarse_cells = _get(resolved, "solve", "coarse_cells", cast=int)
        ratio = cells / coarse_cells
        r = round(np.log2(ratio)) if ratio > 1 else 0
        if coarse_cells * 2**r != cells or r < 1:
            raise ConfigError(
                f"cells={cells} must be coarse_cells={coarse_cells} times a power of two >= 2"
            )
        hierarchy = build_hierarchy(domain, coarse_cells, r)
        fine_ops = assemble_operators(hierarchy.fine, potential)
        if space_kind == "lod":
            cache_dir = None if args.no_cache else out_dir / "correctors"
            radius_text = resolved.get("solve", {}).get("localization_radius", "").strip()
            lod, hit = lod_space_cached(
                hierarchy,
                fine_ops,
                localization_radius=int(radius_text) if radius_text else None,
                cache_dir=cache_dir,
            )
            cache["hits" if hit else "misses"] += 1
            space = lod_discrete_space(lod, fine_ops)
        else:
            ops_coarse = assemble_operators(hierarchy.coarse, potential)
            space = coarse_fem_space(hierarchy, ops_coarse)
    else:
        raise ConfigError(f"unknown space {space_kind!r}")

    t0 = time.perf_counter()
    state = minimize(space, potential, beta, flow)
    wall = time.perf_counter() - t0
    print(f"space: {space_kind}, dofs: {space.n_dofs}")
    print(f"energy:     {_fmt12(state.energy)}")
    print(f"eigenvalue: {_fmt12(state.eigenvalue)}")
    print(f"iterations: {state.steps_taken} ({wall:.2f}s), converged: {state.converged}")

    outputs = []
    if args.dump_solution:
        sol_path = Path(args.dump_solution)
        full = fine_ops.expand(space.to_fine(state.coeffs))
        with open(sol_path, "w") as fh:
            for (x, y), v in zip(fine_ops.mesh.nodes, full):
                fh.write(f"{float(x)!r} {float(y)!r} {float(v)!r}\n")
        outputs.append(sol_path)
    if args.dump_mesh:
        export_mesh(fine_ops.mesh, args.dump_mesh)
        outputs.append(Path(args.dump_mesh))

    manifest_path = out_dir / "solve_manifest.json"
    _write_manifest(
        manifest_path,
        "solve",
        config_path,
        resolved,
        args.overrides,
        outputs,
        extra={
            "cache": cache,
            "results": {
                "energy": state.energy,
                "eigenvalue": state.eigenvalue,
                "iterations": state.steps_taken,
                "converged": state.converged,
            },
        },
    )
    if not state.converged:
        print(f"error: {state.message}", file=sys.stderr)
        return NUMERICAL_ERROR
    return 0


def cmd_study(args):
    config_path = _resolve_config_path(args.config)
    resolved = parse_config(config_path.read_text(), args.overrides)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    relative = None
    if args.relative:
        relative = True
    if args.absolute:
        relative = False
    cfg = study_config_from(resolved, out_dir, use_cache=not args.no_cache, relative=relative)

    result = run_study(cfg, log=print)

    csv_path = out_dir / "study.csv"
    write_csv(result.rows, result.fitted_rates, csv_path)
    outputs = [csv_path]
    if result.baseline_rows:
        baseline_path = out_dir / "study_baseline.csv"
        write_csv(result.baseline_rows, result.baseline_rates, baseline_path)
        outputs.append(baseline_path)
    if _get(resolved, "study", "plot_script", default=True, cast=bool):
        plot_path = out_dir / "study.gp"
        write_gnuplot(csv_path, plot_path, title=cfg.potential.descriptor())
        outputs.append(plot_path)

    rate_text = ", ".join(
        f"{col}={result.fitted_rates[col]:.3f}"
        if result.fitted_rates[col] is not None
        else f"{col}=n/a"
        for col in ("h1", "l2", "energy", "eigenvalue")
    )
    print(f"fitted rates: {rate_text}")

    manifest_path = out_dir / "study_manifest.json"
    _write_manifest(
        manifest_path,
        "study",
        config_path,
        resolved,
        args.overrides,
        outputs,
        extra={
            "cache": {"hits": result.cache_hits, "misses": result.cache_misses},
            "reference": {
                k: result.reference[k]
                for k in ("energy", "eigenvalue", "n_dofs", "steps")
            },
            "invalid": result.invalid,
        },
    )
    if result.invalid:
        print(f"error: {result.message}", file=sys.stderr)
        return NUMERICAL_ERROR
    failures = [r for r in result.rows if r.failed]
    for row in failures:
        print(f"warning: row H={row.H:g} failed: {row.message}", file=sys.stderr)
    if len(failures) == len(result.rows):
        return NUMERICAL_ERROR
    return 0


def cmd_correctors(args):
    config_path = _resolve_config_path(args.config)
    resolved = parse_config(config_path.read_text(), args.overrides)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = study_config_from(resolved, out_dir, use_cache=not args.no_cache)

    mesh = uniform_mesh(cfg.domain, cfg.reference_cells)
    ops = assemble_operators(mesh, cfg.potential)
    hits = misses = 0
    outputs = []
    for H in cfg.H_sequence:
        hierarchy = build_hierarchy(cfg.domain, cfg.coarse_cells(H), cfg.refinements(H))
        t0 = time.perf_counter()
        space, hit = lod_space_cached(
            hierarchy,
            ops,
            localization_radius=cfg.localization_radius,
            cache_dir=cfg.cache_dir if cfg.use_cache else None,
        )
        wall = time.perf_counter() - t0
        hits += hit
        misses += not hit
        if hit:
            detail = "cache hit"
        else:
            detail = (
                f"factor {space.timings.get('factor_s', 0.0):.2f}s, "
                f"solves {space.timings.get('solve_s', 0.0):.2f}s"
            )
        print(f"H={H:g}: {hierarchy.coarse.n_interior} correctors, {detail}, {wall:.2f}s total")
    if cfg.cache_dir and cfg.use_cache:
        outputs = sorted(Path(cfg.cache_dir).glob("correctors_*.npz"))
        print(f"cache dir: {cfg.cache_dir} ({hits} hits, {misses} misses)")

    manifest_path = out_dir / "correctors_manifest.json"
    _write_manifest(
        manifest_path,
        "correctors",
        config_path,
        resolved,
        args.overrides,
        outputs,
        extra={"cache": {"hits": hits, "misses": misses}},
    )
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gplod",
        description="Gross-Pitaevskii ground states in LOD spaces",
    )
    parser.add_argument("--version", action="version", version=f"gplod {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="config file path or preset name")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--threads", type=int, default=None, help="cap BLAS thread count")
        p.add_argument("--no-cache", action="store_true", help="disable the corrector cache")
        p.add_argument(
            "overrides",
            nargs="*",
            metavar="section.key=value",
            help="configuration overrides",
        )

    p_solve = sub.add_parser("solve", help="single ground-state computation")
    common(p_solve)
    p_solve.add_argument("--dump-solution", help="write fine-mesh nodal values 'x y value'")
    p_solve.add_argument("--dump-mesh", help="write the mesh as plain text")
    p_solve.set_defaults(func=cmd_solve)

    p_study = sub.add_parser("study", help="convergence-rate study")
    common(p_study)
    p_study.add_argument("--relative", action="store_true", help="report relative errors")
    p_study.add_argument("--absolute", action="store_true", help="report absolute errors")
    p_study.set_defaults(func=cmd_study)

    p_corr = sub.add_parser("correctors", help="build and cache LOD correctors")
    common(p_corr)
    p_corr.set_defaults(func=cmd_correctors)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", None):
        try:
            import threadpoolctl

            threadpoolctl.threadpool_limits(args.threads)
        except ImportError:
            print("warning: threadpoolctl unavailable, --threads ignored", file=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (ArithmeticError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return NUMERICAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
