"""Separation sweeps, exponent fits, and verification checks.

A sweep runs the full mesh -> solve -> statistics pipeline at each
separation, twice per point (once on the generated mesh, once uniformly
refined) so every recorded figure carries a one-level Richardson drift.
Records with drift above the gate are flagged and excluded from fits.
"Constant independent of separation" claims are tested as stability of the
fitted constant within a fixed factor across the sweep, since the
underlying constants are nonconstructive.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .asymptotics import (Envelope, capacity_asymptote, envelope_for, rate_classic,
                          rate_holder, rate_mconvex)
from .geometry import BoundaryData, FlatPlateau, GapGeometry, HolderPower, PowerM
from .mesh import generate_mesh, refine
from .solver import (assemble_system, capacity_matrix, gradient_stats,
                     reconstruct_u, residual_w, solve_constants, solve_subproblems)


class SweepError(RuntimeError):
    """A sweep point failed; the message carries the offending separation."""


class FitError(ValueError):
    """Exponent fit preconditions violated."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepConfig:
    """Everything needed to reproduce one sweep, picklable for worker pools."""

    profile_kind: str                    # holder | power | flat
    eps_values: tuple
    alpha: float | None = None
    kappa: float | None = None
    m: float | None = None
    lam: float | None = None
    r0: float | None = None
    collar: float = 0.0
    r1: float = 0.5
    outer_radius: float = 2.0
    inclusion_radius: float | None = None
    mode: str = "planar"
    layers: int = 8
    grading_exponent: float | None = None
    target_outer_h: float | None = None
    neck_density: float = 8.0
    phi_kind: str = "linear_xn"
    phi_c: float = 1.0
    phi_coeffs: tuple = ()
    backend: str = "direct"
    tol: float = 1e-12
    drift_limit: float = 5.0
    segment_points: int = 33

    def profile(self):
        if self.profile_kind == "holder":
            return HolderPower(alpha=self.alpha, kappa=self.kappa or 1.0, r1=self.r1)
        if self.profile_kind == "power":
            return PowerM(m=self.m, lam=self.lam or 1.0, r1=self.r1)
        if self.profile_kind == "flat":
            return FlatPlateau(r0=self.r0, kappa=self.kappa or 1.0, r1=self.r1, collar=self.collar)
        raise SweepError(f"unknown profile kind {self.profile_kind!r}")

    def geometry(self, eps: float) -> GapGeometry:
        p = self.profile()
        return GapGeometry(upper=p, lower=p, eps=eps, outer_radius=self.outer_radius,
                           inclusion_radius=self.inclusion_radius, mode=self.mode)

    def boundary_data(self) -> BoundaryData:
        return BoundaryData(self.phi_kind, c=self.phi_c, coeffs=self.phi_coeffs)

    def grading(self) -> float:
        if self.grading_exponent is not None:
            return self.grading_exponent
        # resolve the matching zone width ~ eps^(1/order): step ~ gap^(1/order)
        if self.profile_kind == "holder":
            return 1.0 / (1.0 + self.alpha)
        if self.profile_kind == "power":
            return 1.0 / float(self.m)
        return 0.5

    def envelope(self) -> Envelope:
        return envelope_for(self.geometry(float(self.eps_values[0])))

    def rate(self, eps: float) -> float:
        n = 2 if self.mode == "planar" else 3
        if self.profile_kind == "holder":
            return rate_holder(n, self.alpha, eps)
        if self.profile_kind == "power":
            return rate_mconvex(n, self.m, eps)
        return rate_classic(n, eps)

    def canonical_dict(self) -> dict:
        return asdict(self)


@dataclass
class SweepRecord:
    """Measured quantities at one separation (values from the refined mesh)."""

    eps: float
    max_grad_neck: float
    grad_segment_min: float
    a11: float
    a12: float
    b1: float
    C1: float
    C2: float
    cdiff: float
    energy_u: float
    energy_w: float
    envelope_C: float
    refinement_drift: float
    flagged: bool
    btilde1: float = 0.0
    max_grad_w: float = 0.0
    max_grad_w_weighted: float | None = None
    max_grad_v1v2: float = 0.0
    neck_x: np.ndarray = field(default=None, repr=False)
    neck_grad: np.ndarray = field(default=None, repr=False)


CSV_FIELDS = ("eps", "max_grad_neck", "grad_segment_min", "a11", "a12", "b1",
              "C1", "C2", "cdiff", "energy_u", "energy_w", "envelope_C",
              "refinement_drift", "flagged")


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def _pipeline(config: SweepConfig, geom: GapGeometry, mesh):
    system = assemble_system(mesh, backend=config.backend, tol=config.tol)
    phi = config.boundary_data()
    v0, v1, v2 = solve_subproblems(system, phi)
    cap = solve_constants(capacity_matrix(system, v0, v1, v2))
    u = reconstruct_u(v0, v1, v2, cap.C1, cap.C2)
    stats = gradient_stats(u, geom, system=system, n_segment=config.segment_points)
    resid = residual_w(v1, geom, system=system)
    neck = mesh.neck_flags
    gnorm = np.linalg.norm(system.tri_gradient(u.values), axis=1)[neck]
    xc = mesh.centroids()[neck][:, 0]
    g12 = float(np.linalg.norm(system.tri_gradient(v1.values + v2.values), axis=1).max())
    return cap, stats, resid, xc, gnorm, g12


def run_point(config: SweepConfig, eps: float) -> SweepRecord:
    """Full pipeline at one separation, with the Richardson refinement pass."""
    geom = config.geometry(eps)
    mesh = generate_mesh(geom, layers=config.layers, grading_exponent=config.grading(),
                         target_outer_h=config.target_outer_h, neck_density=config.neck_density)
    _, stats0, _, _, _, _ = _pipeline(config, geom, mesh)
    cap, stats, resid, xc, gnorm, g12 = _pipeline(config, geom, refine(mesh))

    base, fine = stats0.max_grad_neck, stats.max_grad_neck
    if max(abs(base), abs(fine)) < 1e-12:
        drift = 0.0
    else:
        drift = 100.0 * abs(fine - base) / max(abs(fine), 1e-300)

    envelope_c = _envelope_constant(config.envelope(), xc, gnorm, eps)

    seg_min = float(stats.grad_on_segment.min()) if len(stats.grad_on_segment) else 0.0
    return SweepRecord(
        eps=eps, max_grad_neck=stats.max_grad_neck, grad_segment_min=seg_min,
        a11=cap.a11, a12=cap.a12, b1=cap.b1, C1=cap.C1, C2=cap.C2,
        cdiff=abs(cap.C1 - cap.C2), energy_u=stats.energy, energy_w=resid.energy_w,
        envelope_C=envelope_c, refinement_drift=drift,
        flagged=bool(drift > config.drift_limit), btilde1=cap.btilde1,
        max_grad_w=resid.max_grad_w, max_grad_w_weighted=resid.max_grad_w_weighted,
        max_grad_v1v2=g12, neck_x=xc, neck_grad=gnorm)


def _worker(args):
    config, eps = args
    return run_point(config, eps)


def sweep(config: SweepConfig) -> list[SweepRecord]:
    """One record per separation, sorted ascending; failures abort with the
    offending separation in the message."""
    eps_list = [float(e) for e in config.eps_values]
    workers = int(os.environ.get("NECKFIELD_THREADS", "1"))
    records = []
    try:
        if workers > 1 and len(eps_list) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                records = list(pool.map(_worker, [(config, e) for e in eps_list]))
        else:
            for e in eps_list:
                records.append(run_point(config, e))
    except Exception as exc:
        done = {r.eps for r in records}
        pending = [e for e in eps_list if e not in done]
        bad = pending[0] if pending else eps_list[-1]
        raise SweepError(f"sweep failed at eps={bad:.6g}: {exc}") from exc
    return sorted(records, key=lambda r: r.eps)


# ---------------------------------------------------------------------------
# fits and checks
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    slope: float
    intercept: float
    r_squared: float
    n_points: int
    eps_range: tuple

    def as_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept,
                "r_squared": self.r_squared, "n_points": self.n_points,
                "eps_range": list(self.eps_range)}


def _unflagged(records):
    return [r for r in records if not r.flagged]


def fit_exponent(records, x_field: str = "eps", y_field: str = "max_grad_neck") -> FitResult:
    """Ordinary least squares on the log-log data of unflagged records."""
    recs = _unflagged(records)
    if len(recs) < 4:
        raise FitError(f"need at least 4 unflagged records, have {len(recs)}")
    x = np.array([abs(getattr(r, x_field)) for r in recs])
    y = np.array([getattr(r, y_field) for r in recs], dtype=float)
    y = np.abs(y)
    if np.any(y <= 0.0):
        raise FitError(f"nonpositive values in {y_field!r}; cannot fit a power law")
    lx, ly = np.log(x), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    pred = slope * lx + intercept
    ss_res = float(np.sum((ly - pred) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if ss_tot < 1e-30 else 1.0 - ss_res / ss_tot
    return FitResult(slope=float(slope), intercept=float(intercept), r_squared=r2,
                     n_points=len(recs), eps_range=(float(x.min()), float(x.max())))


@dataclass
class EnvelopeReport:
    c_values: list
    c_max: float
    c_min: float
    ratio: float
    passed: bool
    vacuous: bool

    def as_dict(self) -> dict:
        return {"c_values": self.c_values, "Cmax": self.c_max, "Cmin": self.c_min,
                "Cmax_over_Cmin": self.ratio, "passed": self.passed, "vacuous": self.vacuous}


ENVELOPE_FRINGE_MARGIN = 0.8


def _envelope_constant(envelope: Envelope, xc: np.ndarray, gnorm: np.ndarray,
                       eps: float, margin: float = ENVELOPE_FRINGE_MARGIN) -> float:
    """Fitted envelope constant: max of |grad u| over the profile.

    The max runs over the inner fraction of the neck.  At the neck opening
    the bounded non-singular field parts meet an envelope that has decayed
    by a factor ~ eps/dist^2, so including the outermost columns would
    contaminate the constant with an O(dist^2/eps) term that no choice of
    constant absorbs; the inner region covers the whole blow-up zone.
    """
    if len(xc) == 0:
        return 0.0
    keep = np.abs(xc) <= margin * float(np.max(np.abs(xc)))
    c_vals = gnorm[keep] / envelope.profile(xc[keep], eps)
    return float(c_vals.max()) if len(c_vals) else 0.0


def verify_envelope(records, envelope: Envelope, stability_factor: float = 3.0) -> EnvelopeReport:
    """Fit C(eps) = max |grad u| / envelope_profile per record and test that
    the fitted constant is stable across the sweep."""
    c_values = []
    for r in _unflagged(records):
        if r.neck_x is None:
            c = r.envelope_C
        else:
            c = _envelope_constant(envelope, r.neck_x, r.neck_grad, r.eps)
        c_values.append((r.eps, c))
    cs = np.array([c for _, c in c_values])
    if len(cs) == 0 or np.max(cs) < 1e-12:
        return EnvelopeReport(c_values=c_values, c_max=0.0, c_min=0.0, ratio=1.0,
                              passed=True, vacuous=True)
    ratio = float(cs.max() / max(cs.min(), 1e-300))
    return EnvelopeReport(c_values=c_values, c_max=float(cs.max()), c_min=float(cs.min()),
                          ratio=ratio, passed=bool(ratio <= stability_factor), vacuous=False)


@dataclass
class LowerBoundReport:
    q_values: list
    q_min: float
    q_at_eps_max: float
    btilde_values: list
    btilde_min: float
    btilde_at_eps_max: float
    passed_q: bool
    passed_btilde: bool
    passed: bool
    vacuous: bool
    note: str = ""

    def as_dict(self) -> dict:
        return {"q_values": self.q_values, "qmin": self.q_min,
                "q_at_eps_max": self.q_at_eps_max, "btilde_values": self.btilde_values,
                "btilde_min": self.btilde_min, "btilde_at_eps_max": self.btilde_at_eps_max,
                "passed_q": self.passed_q, "passed_btilde": self.passed_btilde,
                "passed": self.passed, "vacuous": self.vacuous, "note": self.note}


def lower_bound_check(records, config: SweepConfig, stability_factor: float = 3.0) -> LowerBoundReport:
    """Test the segment lower bound: q(eps) = min_segment |grad u| * eps / rate
    stays bounded below (stable within the factor), and the driving flux
    functional stays away from zero."""
    recs = _unflagged(records)
    qs = [(r.eps, r.grad_segment_min * r.eps / config.rate(r.eps)) for r in recs]
    bts = [(r.eps, abs(r.btilde1)) for r in recs]
    if not recs:
        raise FitError("no unflagged records for the lower bound check")
    bt_scale = max(b for _, b in bts)
    if bt_scale < 1e-10:
        return LowerBoundReport(q_values=qs, q_min=0.0, q_at_eps_max=0.0,
                                btilde_values=bts, btilde_min=0.0, btilde_at_eps_max=0.0,
                                passed_q=True, passed_btilde=True, passed=True,
                                vacuous=True, note="vacuous: btilde1[phi]=0")
    q_arr = np.array([q for _, q in qs])
    q_end = qs[-1][1]
    bt_arr = np.array([b for _, b in bts])
    bt_end = bts[-1][1]
    passed_q = bool(q_arr.min() >= q_end / stability_factor)
    passed_bt = bool(bt_arr.min() >= 0.5 * bt_end)
    return LowerBoundReport(q_values=qs, q_min=float(q_arr.min()), q_at_eps_max=float(q_end),
                            btilde_values=bts, btilde_min=float(bt_arr.min()),
                            btilde_at_eps_max=float(bt_end), passed_q=passed_q,
                            passed_btilde=passed_bt, passed=passed_q and passed_bt,
                            vacuous=False)


@dataclass
class CapacityReport:
    slope: float
    predicted_slope: float
    deviation: float
    tolerance: float
    passed: bool
    fit: FitResult

    def as_dict(self) -> dict:
        return {"slope": self.slope, "predicted_slope": self.predicted_slope,
                "deviation": self.deviation, "tolerance": self.tolerance,
                "passed": self.passed, "fit": self.fit.as_dict()}


def capacity_check(records, config: SweepConfig, tolerance: float = 0.07) -> CapacityReport:
    """Compare the fitted slope of |a11| against the slope of the predicted
    asymptote over the same separations."""
    fit = fit_exponent(records, y_field="a11")
    recs = _unflagged(records)
    n = 2 if config.mode == "planar" else 3
    sigma = config.geometry(float(recs[0].eps)).plateau_measure()
    kind = {"holder": "holder", "power": "mconvex", "flat": "flat"}[config.profile_kind]
    eps = np.array([r.eps for r in recs])
    pred = np.array([capacity_asymptote(kind, n, float(e), sigma_measure=sigma,
                                        alpha=config.alpha, m=config.m) for e in eps])
    slope_pred = float(np.polyfit(np.log(eps), np.log(pred), 1)[0])
    dev = abs(fit.slope - slope_pred)
    return CapacityReport(slope=fit.slope, predicted_slope=slope_pred, deviation=dev,
                          tolerance=tolerance, passed=bool(dev <= tolerance), fit=fit)


# ---------------------------------------------------------------------------
# consolidated report
# ---------------------------------------------------------------------------


def config_hash(config: SweepConfig) -> str:
    blob = json.dumps(config.canonical_dict(), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def records_csv(records, config: SweepConfig) -> str:
    """Deterministic CSV with full round-trip float formatting."""
    lines = [f"# neckfield {__version__} config={config_hash(config)}",
             ",".join(CSV_FIELDS)]
    for r in records:
        cells = []
        for f in CSV_FIELDS:
            v = getattr(r, f)
            cells.append(str(v) if isinstance(v, bool) else repr(float(v)))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def _atomic_write(path, text: str) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def report(outdir, records, checks: dict, config: SweepConfig, plot: bool = False) -> dict:
    """Write records.csv and report.json (and SVG plots behind the flag);
    returns the consolidated report dictionary."""
    if not records:
        raise SweepError("no records")
    os.makedirs(outdir, exist_ok=True)
    _atomic_write(os.path.join(outdir, "records.csv"), records_csv(records, config))

    doc = {"version": __version__, "config_hash": config_hash(config),
           "config": config.canonical_dict(),
           "records": [{f: getattr(r, f) for f in CSV_FIELDS} for r in records]}
    for name, chk in checks.items():
        doc[name] = chk.as_dict() if hasattr(chk, "as_dict") else chk
    _atomic_write(os.path.join(outdir, "report.json"),
                  json.dumps(doc, indent=2, sort_keys=True) + "\n")

    if plot:
        for name, yf in (("max_grad_neck", "max_grad_neck"), ("a11", "a11"), ("cdiff", "cdiff")):
            xs = [r.eps for r in records]
            ys = [abs(getattr(r, yf)) for r in records]
            if min(ys) <= 0:
                continue
            try:
                fit = fit_exponent(records, y_field=yf)
                sl, ic = fit.slope, fit.intercept
            except FitError:
                sl, ic = 0.0, math.log(max(ys))
            _atomic_write(os.path.join(outdir, f"plot_{name}.svg"),
                          _svg_loglog(f"{yf} vs eps", xs, ys, sl, ic))
    return doc


def _svg_loglog(title: str, xs, ys, slope: float, intercept: float,
                width: int = 640, height: int = 480) -> str:
    """Minimal deterministic log-log scatter with the fitted line."""
    lx = [math.log10(x) for x in xs]
    ly = [math.log10(y) for y in ys]
    pad = 60
    x0, x1 = min(lx), max(lx)
    y0, y1 = min(ly), max(ly)
    x1 += 1e-9; y1 += 1e-9

    def sx(v):
        return pad + (v - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(v):
        return height - pad - (v - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width // 2}" y="24" text-anchor="middle" font-size="14">{title}</text>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>']
    ln = math.log(10.0)
    fy0 = (slope * (x0 * ln) + intercept) / ln
    fy1 = (slope * (x1 * ln) + intercept) / ln
    parts.append(f'<line x1="{sx(x0):.2f}" y1="{sy(fy0):.2f}" x2="{sx(x1):.2f}" '
                 f'y2="{sy(fy1):.2f}" stroke="#1f77b4" stroke-width="1.5"/>')
    for x, y in zip(lx, ly):
        parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="4" fill="#d62728"/>')
    parts.append(f'<text x="{width - pad}" y="{height - pad + 30}" text-anchor="end" '
                 f'font-size="12">log10 eps</text>')
    parts.append(f'<text x="{pad}" y="{pad - 10}" font-size="12">slope {slope:.4f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
