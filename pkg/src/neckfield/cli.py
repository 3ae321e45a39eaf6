"""Command-line entry point: geometry preview, meshing, solving, sweeping,
fitting, and reporting, driven by one JSON config file.

Precedence: command-line flags > config file > documented defaults.
Exit codes: 0 ok, 2 config error, 3 solver error, 4 check failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .asymptotics import ParameterError
from .geometry import BoundaryData, GeometryError, build_geometry, export_polylines_csv
from .harness import (CSV_FIELDS, FitError, SweepConfig, SweepError, SweepRecord,
                      capacity_check, config_hash, fit_exponent, lower_bound_check,
                      records_csv, report, sweep, verify_envelope, _atomic_write)
from .mesh import MeshError, check_quality, generate_mesh, save_mesh
from .solver import (AssemblyError, SolverError, assemble_system, capacity_matrix,
                     gradient_stats, reconstruct_u, solve_constants, solve_subproblems)


class ConfigError(ValueError):
    """Bad configuration file or flag values."""


EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_CHECK = 0, 2, 3, 4

_PROFILE_KEYS = {
    "holder": {"kind", "alpha", "kappa"},
    "power": {"kind", "m", "lambda"},
    "flat": {"kind", "r0", "kappa", "collar"},
}
_GEOMETRY_KEYS = {"profile", "eps", "r1", "inclusion_radius", "outer_radius", "mode"}
_MESH_KEYS = {"layers", "grading_exponent", "target_outer_h", "neck_density"}
_SOLVE_KEYS = {"phi", "phi_c", "phi_coeffs", "tol", "backend"}
_SWEEP_KEYS = {"eps_values", "eps_min", "eps_max", "eps_count", "checks", "drift_limit"}
_OUTPUT_KEYS = {"directory", "plot"}
_SECTION_KEYS = {"geometry", "mesh", "solve", "sweep", "output"}
_CHECK_NAMES = {"fit", "envelope", "lower", "capacity"}
_PHI_KINDS = {"one": "constant", "constant": "constant", "xn": "linear_xn",
              "linear_xn": "linear_xn", "x1": "linear_x1", "linear_x1": "linear_x1",
              "poly": "polynomial", "polynomial": "polynomial"}


def _reject_unknown(section: dict, allowed: set, where: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {where} "
                              f"(allowed: {', '.join(sorted(allowed))})")


def _check_eps(value: float, where: str) -> float:
    value = float(value)
    if not 0.0 < value < 0.5:
        raise ConfigError(f"{where}={value} violates the admissible separation "
                          f"range (0, 1/2)")
    return value


@dataclass
class RunConfig:
    """Validated configuration with defaults filled."""

    profile_kind: str
    profile_params: dict
    eps: float | None
    r1: float
    inclusion_radius: float | None
    outer_radius: float
    mode: str
    layers: int
    grading_exponent: float | None
    target_outer_h: float | None
    neck_density: float
    phi_kind: str
    phi_c: float
    phi_coeffs: tuple
    tol: float
    backend: str
    eps_values: tuple
    checks: tuple
    drift_limit: float
    out_dir: str
    plot: bool

    def sweep_config(self, eps_values=None) -> SweepConfig:
        p = self.profile_params
        return SweepConfig(
            profile_kind=self.profile_kind,
            eps_values=tuple(eps_values if eps_values is not None else self.eps_values),
            alpha=p.get("alpha"), kappa=p.get("kappa"), m=p.get("m"),
            lam=p.get("lambda"), r0=p.get("r0"), collar=p.get("collar", 0.0),
            r1=self.r1, outer_radius=self.outer_radius,
            inclusion_radius=self.inclusion_radius, mode=self.mode,
            layers=self.layers, grading_exponent=self.grading_exponent,
            target_outer_h=self.target_outer_h, neck_density=self.neck_density,
            phi_kind=self.phi_kind, phi_c=self.phi_c, phi_coeffs=self.phi_coeffs,
            backend=self.backend, tol=self.tol, drift_limit=self.drift_limit)

    def geometry(self):
        eps = self.eps if self.eps is not None else self.eps_values[0]
        return self.sweep_config(eps_values=(eps,)).geometry(float(eps))

    def boundary_data(self) -> BoundaryData:
        return BoundaryData(self.phi_kind, c=self.phi_c, coeffs=self.phi_coeffs)


def load_config(path) -> RunConfig:
    """Parse and validate the JSON config; unknown keys are hard errors."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config parse error at line {exc.lineno}, column {exc.colno}: "
                          f"{exc.msg}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    _reject_unknown(raw, _SECTION_KEYS, "config root")

    geo = raw.get("geometry")
    if not isinstance(geo, dict):
        raise ConfigError("config needs a 'geometry' section")
    _reject_unknown(geo, _GEOMETRY_KEYS, "geometry")
    prof = geo.get("profile")
    if not isinstance(prof, dict) or "kind" not in prof:
        raise ConfigError("geometry.profile with a 'kind' is required")
    kind_aliases = {"holder": "holder", "holderpower": "holder", "power": "power",
                    "powerm": "power", "flat": "flat", "flatplateau": "flat"}
    kind = kind_aliases.get(str(prof["kind"]).lower())
    if kind is None:
        raise ConfigError(f"unknown geometry.profile.kind {prof['kind']!r} "
                          f"(use holder, power, or flat)")
    _reject_unknown(prof, _PROFILE_KEYS[kind], f"geometry.profile ({kind})")
    params = {k: float(v) for k, v in prof.items() if k != "kind"}
    required = {"holder": ("alpha",), "power": ("m",), "flat": ("r0",)}[kind]
    for req in required:
        if req not in params:
            raise ConfigError(f"geometry.profile ({kind}) requires {req!r}")

    eps = geo.get("eps")
    if eps is not None:
        eps = _check_eps(eps, "geometry.eps")

    mesh_sec = raw.get("mesh", {})
    _reject_unknown(mesh_sec, _MESH_KEYS, "mesh")
    solve_sec = raw.get("solve", {})
    _reject_unknown(solve_sec, _SOLVE_KEYS, "solve")
    sweep_sec = raw.get("sweep", {})
    _reject_unknown(sweep_sec, _SWEEP_KEYS, "sweep")
    out_sec = raw.get("output", {})
    _reject_unknown(out_sec, _OUTPUT_KEYS, "output")

    phi_raw = str(solve_sec.get("phi", "linear_xn")).lower()
    if phi_raw not in _PHI_KINDS:
        raise ConfigError(f"unknown solve.phi {solve_sec.get('phi')!r} "
                          f"(use one, xn, x1, or poly)")
    backend = str(solve_sec.get("backend", "direct"))
    if backend not in ("direct", "cg"):
        raise ConfigError(f"unknown solve.backend {backend!r}")

    if "eps_values" in sweep_sec:
        eps_values = tuple(_check_eps(e, "sweep.eps_values") for e in sweep_sec["eps_values"])
    else:
        lo = _check_eps(sweep_sec.get("eps_min", 1e-4), "sweep.eps_min")
        hi = _check_eps(sweep_sec.get("eps_max", 1e-2), "sweep.eps_max")
        count = int(sweep_sec.get("eps_count", 8))
        if count < 1 or lo >= hi:
            raise ConfigError("sweep range needs eps_min < eps_max and eps_count >= 1")
        eps_values = tuple(float(v) for v in np.geomspace(lo, hi, count))

    checks = tuple(sweep_sec.get("checks", sorted(_CHECK_NAMES)))
    for c in checks:
        if c not in _CHECK_NAMES:
            raise ConfigError(f"unknown sweep.checks entry {c!r} "
                              f"(allowed: {', '.join(sorted(_CHECK_NAMES))})")

    mode = str(geo.get("mode", "planar"))
    if mode not in ("planar", "axisymmetric"):
        raise ConfigError(f"unknown geometry.mode {mode!r}")

    return RunConfig(
        profile_kind=kind, profile_params=params, eps=eps,
        r1=float(geo.get("r1", 0.5)),
        inclusion_radius=(None if geo.get("inclusion_radius") is None
                          else float(geo["inclusion_radius"])),
        outer_radius=float(geo.get("outer_radius", 2.0)), mode=mode,
        layers=int(mesh_sec.get("layers", 8)),
        grading_exponent=(None if mesh_sec.get("grading_exponent", 0.5) is None
                          else float(mesh_sec.get("grading_exponent", 0.5))),
        target_outer_h=(None if mesh_sec.get("target_outer_h") is None
                        else float(mesh_sec["target_outer_h"])),
        neck_density=float(mesh_sec.get("neck_density", 8.0)),
        phi_kind=_PHI_KINDS[phi_raw], phi_c=float(solve_sec.get("phi_c", 1.0)),
        phi_coeffs=tuple(float(c) for c in solve_sec.get("phi_coeffs", ())),
        tol=float(solve_sec.get("tol", 1e-12)), backend=backend,
        eps_values=eps_values, checks=checks,
        drift_limit=float(sweep_sec.get("drift_limit", 5.0)),
        out_dir=str(out_sec.get("directory", "neckfield_out")),
        plot=bool(out_sec.get("plot", False)))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _provenance(cfg: RunConfig) -> dict:
    return {"version": __version__, "config_hash": config_hash(cfg.sweep_config())}


def _geometry_svg(curves, path, cfg) -> None:
    pts = np.vstack([curves.d1, curves.d2, curves.outer])
    lo, hi = pts.min(), pts.max()
    size = 640
    pad = 20

    def s(p):
        return (pad + (p[:, 0] - lo) / (hi - lo) * (size - 2 * pad),
                size - pad - (p[:, 1] - lo) / (hi - lo) * (size - 2 * pad))

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
             f"<!-- neckfield {__version__} config={config_hash(cfg.sweep_config())} -->",
             f'<rect width="{size}" height="{size}" fill="white"/>']
    for poly, color in ((curves.d1, "#d62728"), (curves.d2, "#1f77b4"), (curves.outer, "#2ca02c")):
        xs, ys = s(poly)
        path_d = "M " + " L ".join(f"{x:.2f} {y:.2f}" for x, y in zip(xs, ys)) + " Z"
        parts.append(f'<path d="{path_d}" fill="none" stroke="{color}" stroke-width="1"/>')
    parts.append("</svg>")
    _atomic_write(path, "\n".join(parts) + "\n")


def _cmd_geom(cfg: RunConfig, args) -> int:
    geom = cfg.geometry()
    curves = build_geometry(geom)
    os.makedirs(cfg.out_dir, exist_ok=True)
    csv_path = os.path.join(cfg.out_dir, "geometry.csv")
    export_polylines_csv(curves, csv_path + ".tmp")
    os.replace(csv_path + ".tmp", csv_path)
    _geometry_svg(curves, os.path.join(cfg.out_dir, "geometry.svg"), cfg)
    print(f"wrote {csv_path} and geometry.svg "
          f"(min gap distance {curves.min_gap_distance()!r})")
    return EXIT_OK


def _build_mesh(cfg: RunConfig):
    sc = cfg.sweep_config()
    geom = cfg.geometry()
    return geom, generate_mesh(geom, layers=cfg.layers, grading_exponent=sc.grading(),
                               target_outer_h=cfg.target_outer_h,
                               neck_density=cfg.neck_density)


def _cmd_mesh(cfg: RunConfig, args) -> int:
    geom, mesh = _build_mesh(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    mesh_path = args.mesh_out or os.path.join(cfg.out_dir, "mesh.txt")
    save_mesh(mesh, mesh_path)
    q = check_quality(mesh)
    doc = {**_provenance(cfg), "min_angle": q.min_angle, "max_aspect": q.max_aspect,
           "layer_min": int(q.layer_histogram.min()) if len(q.layer_histogram) else None,
           "node_count": q.node_count, "tri_count": q.tri_count}
    _atomic_write(os.path.join(cfg.out_dir, "mesh_quality.json"),
                  json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"wrote {mesh_path} ({mesh.node_count} nodes, {mesh.tri_count} triangles, "
          f"min angle {q.min_angle:.2f} deg)")
    return EXIT_OK


def _cmd_solve(cfg: RunConfig, args) -> int:
    geom, mesh = _build_mesh(cfg)
    system = assemble_system(mesh, backend=cfg.backend, tol=cfg.tol)
    phi = cfg.boundary_data()
    v0, v1, v2 = solve_subproblems(system, phi)
    cap = solve_constants(capacity_matrix(system, v0, v1, v2))
    u = reconstruct_u(v0, v1, v2, cap.C1, cap.C2)
    stats = gradient_stats(u, geom, system=system)

    os.makedirs(cfg.out_dir, exist_ok=True)
    head = f"# neckfield {__version__} config={config_hash(cfg.sweep_config())}"
    rows = [head, "node,x,y,u"]
    for i, ((x, y), v) in enumerate(zip(mesh.nodes, u.values)):
        rows.append(f"{i},{x!r},{y!r},{v!r}")
    _atomic_write(os.path.join(cfg.out_dir, "solution.csv"), "\n".join(rows) + "\n")

    grads = system.tri_gradient(u.values)
    cents = mesh.centroids()
    rows = [head, "tri,xc,yc,gx,gy,norm,neck"]
    for t, ((xc, yc), (gx, gy), nf) in enumerate(zip(cents, grads, mesh.neck_flags)):
        rows.append(f"{t},{xc!r},{yc!r},{gx!r},{gy!r},{math.hypot(gx, gy)!r},{bool(nf)}")
    _atomic_write(os.path.join(cfg.out_dir, "gradient.csv"), "\n".join(rows) + "\n")

    doc = {**_provenance(cfg), **cap.as_dict(),
           "max_grad_neck": stats.max_grad_neck, "max_grad_global": stats.max_grad_global,
           "energy": stats.energy}
    _atomic_write(os.path.join(cfg.out_dir, "capacity.json"),
                  json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"solved: C1={cap.C1!r} C2={cap.C2!r} max|grad u| in neck={stats.max_grad_neck!r}")
    return EXIT_OK


def _run_checks(cfg: RunConfig, records) -> tuple[dict, bool]:
    sc = cfg.sweep_config()
    checks, ok = {}, True
    if "fit" in cfg.checks:
        checks["fit"] = fit_exponent(records, y_field="max_grad_neck")
    if "envelope" in cfg.checks:
        env_report = verify_envelope(records, sc.envelope())
        checks["envelope"] = env_report
        ok &= env_report.passed
    if "lower" in cfg.checks:
        low = lower_bound_check(records, sc)
        checks["lower"] = low
        ok &= low.passed
    if "capacity" in cfg.checks:
        capr = capacity_check(records, sc)
        checks["capacity"] = capr
        ok &= capr.passed
    return checks, ok


def _cmd_sweep(cfg: RunConfig, args) -> int:
    records = sweep(cfg.sweep_config())
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "records.csv")
    _atomic_write(path, records_csv(records, cfg.sweep_config()))
    print(f"wrote {path} ({len(records)} records, "
          f"{sum(r.flagged for r in records)} flagged)")
    return EXIT_OK


def load_records(path) -> list[SweepRecord]:
    """Re-load a records CSV written by the sweep command."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln and not ln.startswith("#")]
    header = lines[0].split(",")
    if tuple(header) != CSV_FIELDS:
        raise ConfigError(f"{path} does not match the records schema")
    out = []
    for ln in lines[1:]:
        cells = ln.split(",")
        kw = {}
        for name, cell in zip(CSV_FIELDS, cells):
            kw[name] = (cell == "True") if name == "flagged" else float(cell)
        out.append(SweepRecord(**kw))
    return out


def _cmd_fit(cfg: RunConfig, args) -> int:
    path = args.records or os.path.join(cfg.out_dir, "records.csv")
    if not os.path.exists(path):
        raise ConfigError(f"fit needs an existing records CSV (looked at {path})")
    records = load_records(path)
    fit = fit_exponent(records, y_field=args.field)
    doc = {**_provenance(cfg), "y_field": args.field, **fit.as_dict()}
    os.makedirs(cfg.out_dir, exist_ok=True)
    _atomic_write(os.path.join(cfg.out_dir, "fit.json"),
                  json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"fit {args.field}: slope={fit.slope!r} r2={fit.r_squared!r}")
    return EXIT_OK


def _cmd_report(cfg: RunConfig, args) -> int:
    path = args.records or os.path.join(cfg.out_dir, "records.csv")
    if os.path.exists(path) and not args.resweep:
        records = load_records(path)
    else:
        records = sweep(cfg.sweep_config())
    checks, ok = _run_checks(cfg, records)
    report(cfg.out_dir, records, checks, cfg.sweep_config(), plot=cfg.plot)
    for name, chk in checks.items():
        verdict = getattr(chk, "passed", None)
        line = f"{name}: " + ("n/a" if verdict is None else ("PASS" if verdict else "FAIL"))
        if hasattr(chk, "slope"):
            line += f" slope={chk.slope!r}"
        print(line)
    print(f"wrote {os.path.join(cfg.out_dir, 'report.json')}")
    return EXIT_OK if ok else EXIT_CHECK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neckfield",
                                description="Gradient blow-up laboratory for two "
                                            "nearly touching perfect conductors")
    p.add_argument("--version", action="version", version=f"neckfield {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON config file")
    common.add_argument("-o", "--out-dir", help="output directory (overrides config)")
    common.add_argument("--eps", type=float, help="override geometry.eps")
    common.add_argument("--phi", help="override solve.phi (one, xn, x1, poly)")
    common.add_argument("--tol", type=float, help="override solve.tol")
    common.add_argument("--layers", type=int, help="override mesh.layers")
    common.add_argument("--plot", action="store_true", help="emit SVG plots")

    sub.add_parser("geom", parents=[common], help="boundary polylines CSV + SVG")
    pm = sub.add_parser("mesh", parents=[common], help="mesh file + quality JSON")
    pm.add_argument("--mesh-out", help="mesh output path")
    sub.add_parser("solve", parents=[common], help="solution/gradient CSVs + capacity JSON")
    sub.add_parser("sweep", parents=[common], help="separation sweep -> records CSV")
    pf = sub.add_parser("fit", parents=[common], help="power-law fit from records CSV")
    pf.add_argument("--records", help="records CSV path")
    pf.add_argument("--field", default="max_grad_neck", help="record field to fit")
    pr = sub.add_parser("report", parents=[common], help="consolidated checks report")
    pr.add_argument("--records", help="records CSV path (else sweeps fresh)")
    pr.add_argument("--resweep", action="store_true", help="ignore existing records CSV")
    return p


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    from dataclasses import replace as dc_replace

    kw = {}
    if args.out_dir:
        kw["out_dir"] = args.out_dir
    if args.eps is not None:
        kw["eps"] = _check_eps(args.eps, "--eps")
    if args.phi is not None:
        phi = str(args.phi).lower()
        if phi not in _PHI_KINDS:
            raise ConfigError(f"unknown --phi {args.phi!r}")
        kw["phi_kind"] = _PHI_KINDS[phi]
    if args.tol is not None:
        kw["tol"] = args.tol
    if args.layers is not None:
        kw["layers"] = args.layers
    if args.plot:
        kw["plot"] = True
    return dc_replace(cfg, **kw) if kw else cfg


_COMMANDS = {"geom": _cmd_geom, "mesh": _cmd_mesh, "solve": _cmd_solve,
             "sweep": _cmd_sweep, "fit": _cmd_fit, "report": _cmd_report}


def run_command(command: str, cfg: RunConfig, args=None) -> int:
    """Dispatch one subcommand with a validated config; returns the exit code."""
    if command not in _COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    ns = args if args is not None else argparse.Namespace(
        mesh_out=None, records=None, field="max_grad_neck", resweep=False)
    return _COMMANDS[command](cfg, ns)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        return run_command(args.command, cfg, args)
    except (ConfigError, GeometryError, ParameterError, FitError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, AssemblyError, MeshError, SweepError) as exc:
        print(f"error: solver: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
