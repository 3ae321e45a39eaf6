"""Two-inclusion gap geometries: profiles, closures, and validation.

The near-gap boundaries of the two inclusions are graphs over the gap
midplane,

    upper:  x_n = +eps/2 + h_upper(x')
    lower:  x_n = -eps/2 - h_lower(x')

with both profile functions stored as nonnegative, even functions of the
transverse coordinate (the lower one is negated at evaluation).  Away from
the gap each graph is closed into a bounded inclusion by a circular cap
joined with a matched tangent, and everything sits inside a disk of radius
``outer_radius`` centered at the origin.

Supported profile kinds:

* ``HolderPower``  h(t) = kappa * |t|^(1+alpha),  0 < alpha < 1
* ``PowerM``       h(t) = lam * |t|^m,            m >= 2
* ``FlatPlateau``  h(t) = 0 for |t| <= r0, quadratic growth beyond,
  optionally smoothed over a collar so the second derivative ramps up
  continuously.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Union

import numpy as np


class GeometryError(ValueError):
    """Invalid geometry input or an impossible construction."""


# ---------------------------------------------------------------------------
# profiles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HolderPower:
    """Graph h(t) = kappa*|t|^(1+alpha); gradient grows like |t|^alpha."""

    alpha: float
    kappa: float
    r1: float

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise GeometryError(f"alpha must lie in (0,1), got {self.alpha}")
        if self.kappa <= 0.0 or self.r1 <= 0.0:
            raise GeometryError("kappa and r1 must be positive")

    def value(self, t):
        return self.kappa * np.abs(t) ** (1.0 + self.alpha)

    def slope(self, t):
        t = np.asarray(t, dtype=float)
        return (1.0 + self.alpha) * self.kappa * np.sign(t) * np.abs(t) ** self.alpha

    @property
    def convexity_order(self) -> float:
        return 1.0 + self.alpha


@dataclass(frozen=True)
class PowerM:
    """Graph h(t) = lam*|t|^m for integer or real order m >= 2."""

    m: float
    lam: float
    r1: float

    def __post_init__(self):
        if self.m < 2.0:
            raise GeometryError(f"m must be >= 2, got {self.m}")
        if self.lam <= 0.0 or self.r1 <= 0.0:
            raise GeometryError("lam and r1 must be positive")

    def value(self, t):
        return self.lam * np.abs(t) ** self.m

    def slope(self, t):
        t = np.asarray(t, dtype=float)
        return self.m * self.lam * np.sign(t) * np.abs(t) ** (self.m - 1.0)

    @property
    def convexity_order(self) -> float:
        return float(self.m)


@dataclass(frozen=True)
class FlatPlateau:
    """Flat plateau of half-width r0 with quadratic growth rate kappa.

    For ``collar == 0`` the profile is h(t) = kappa*(|t|-r0)^2 past the
    plateau, which is C^{1,1} with one-sided second derivative 2*kappa.
    A positive ``collar`` width w replaces the transition by a C^2 ramp:
    the second derivative climbs from 0 to 2*kappa over [r0, r0+w]
    following a cubic smoothstep, integrated twice in closed form.
    """

    r0: float
    kappa: float
    r1: float
    collar: float = 0.0

    def __post_init__(self):
        if self.r0 <= 0.0 or self.kappa <= 0.0 or self.r1 <= 0.0:
            raise GeometryError("r0, kappa, r1 must be positive")
        if self.collar < 0.0:
            raise GeometryError("collar must be nonnegative")
        if self.r0 + self.collar >= 2.0 * self.r1:
            raise GeometryError("plateau plus collar must end before 2*r1")

    def value(self, t):
        s = np.abs(np.asarray(t, dtype=float)) - self.r0
        if self.collar == 0.0:
            return self.kappa * np.square(np.clip(s, 0.0, None))
        w = self.collar
        xi = np.clip(s / w, 0.0, 1.0)
        # twice-integrated smoothstep: h'' = 2k(3 xi^2 - 2 xi^3) on the collar
        ramp = 2.0 * self.kappa * w * w * (xi**4 / 4.0 - xi**5 / 10.0)
        h_w = 0.3 * self.kappa * w * w
        hp_w = self.kappa * w
        tail = s - w
        quad = h_w + hp_w * np.clip(tail, 0.0, None) + self.kappa * np.square(np.clip(tail, 0.0, None))
        return np.where(s <= 0.0, 0.0, np.where(s <= w, ramp, quad))

    def slope(self, t):
        t = np.asarray(t, dtype=float)
        s = np.abs(t) - self.r0
        if self.collar == 0.0:
            mag = 2.0 * self.kappa * np.clip(s, 0.0, None)
        else:
            w = self.collar
            xi = np.clip(s / w, 0.0, 1.0)
            ramp = 2.0 * self.kappa * w * (xi**3 - xi**4 / 2.0)
            tail = np.clip(s - w, 0.0, None)
            quad = self.kappa * w + 2.0 * self.kappa * tail
            mag = np.where(s <= 0.0, 0.0, np.where(s <= w, ramp, quad))
        return np.sign(t) * mag

    @property
    def convexity_order(self) -> float:
        return math.inf


Profile = Union[HolderPower, PowerM, FlatPlateau]


def eval_h(profile: Profile, xprime):
    """Evaluate the profile graph at transverse coordinate(s) xprime.

    Valid for |xprime| <= 2*r1; outside that the graph representation does
    not apply and a GeometryError is raised.
    """
    x = np.asarray(xprime, dtype=float)
    if np.any(np.abs(x) > 2.0 * profile.r1 * (1.0 + 1e-12)):
        raise GeometryError(f"xprime outside the graph domain |x'| <= {2.0 * profile.r1}")
    out = profile.value(x)
    return float(out) if np.isscalar(xprime) else out


# ---------------------------------------------------------------------------
# assembled gap geometry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GapGeometry:
    """Two nearly touching inclusions inside a disk.

    ``lower`` is stored as a nonnegative profile; the physical lower
    boundary is x_n = -eps/2 - lower(x').  ``inclusion_radius`` requests a
    cap radius for the circular closure; ``None`` lets the tangent-matched
    cap at the junction |x'| = r1 determine it.  ``mode`` selects the
    planar problem or the axisymmetric meridian problem (x' >= 0 becomes
    the cylindrical radius).
    """

    upper: Profile
    lower: Profile
    eps: float
    outer_radius: float
    inclusion_radius: float | None = None
    symmetry: bool = True
    mode: str = "planar"

    def __post_init__(self):
        if self.eps <= 0.0:
            raise GeometryError(f"eps must be positive, got {self.eps}")
        if self.upper.r1 != self.lower.r1:
            raise GeometryError("upper and lower profiles must share the neck half-width r1")
        if self.outer_radius <= self.upper.r1:
            raise GeometryError("outer_radius must exceed the neck half-width")
        if self.mode not in ("planar", "axisymmetric"):
            raise GeometryError(f"mode must be 'planar' or 'axisymmetric', got {self.mode!r}")
        if self.symmetry and type(self.upper) is not type(self.lower):
            raise GeometryError("symmetry flag requires identical profile kinds")

    @property
    def r1(self) -> float:
        return self.upper.r1

    @property
    def dimension(self) -> int:
        return 2 if self.mode == "planar" else 3

    def upper_boundary(self, x):
        return 0.5 * self.eps + self.upper.value(x)

    def lower_boundary(self, x):
        return -0.5 * self.eps - self.lower.value(x)

    def plateau_measure(self) -> float:
        """Measure of the flat contact set in the solver's effective dimension.

        Planar mode: the plateau length 2*r0.  Axisymmetric mode: the disk
        area pi*r0^2.  Zero for profile kinds without a plateau.
        """
        r0 = 0.0
        if isinstance(self.upper, FlatPlateau) and isinstance(self.lower, FlatPlateau):
            r0 = min(self.upper.r0, self.lower.r0)
        if r0 == 0.0:
            return 0.0
        return 2.0 * r0 if self.mode == "planar" else math.pi * r0 * r0


def gap_width(geometry: GapGeometry, xprime):
    """Vertical distance between the two boundaries above xprime.

    Equals eps + h_upper(x') + h_lower(x') with the stored nonnegative
    lower profile, so it is eps exactly where both graphs vanish.
    """
    hu = eval_h(geometry.upper, xprime)
    hl = eval_h(geometry.lower, xprime)
    w = geometry.eps + hu + hl
    if np.any(np.asarray(w) <= 0.0):
        raise GeometryError("nonpositive gap width: inclusions overlap")
    return w


# ---------------------------------------------------------------------------
# boundary data on the outer disk
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundaryData:
    """Dirichlet datum on the outer disk boundary.

    kind: 'constant' (value c), 'linear_xn' (x_n), 'linear_x1' (x_1), or
    'polynomial' (sum_k coeffs[k] * x_n^k).  Axisymmetric solves only admit
    data depending on x_n alone, which excludes 'linear_x1'.
    """

    kind: str
    c: float = 1.0
    coeffs: tuple = ()

    _KINDS = ("constant", "linear_xn", "linear_x1", "polynomial")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise GeometryError(f"unknown boundary data kind {self.kind!r}")
        if self.kind == "polynomial" and len(self.coeffs) == 0:
            raise GeometryError("polynomial boundary data needs coefficients")

    def admissible_for(self, mode: str) -> bool:
        return not (mode == "axisymmetric" and self.kind == "linear_x1")

    def __call__(self, x, xn):
        x = np.asarray(x, dtype=float)
        xn = np.asarray(xn, dtype=float)
        if self.kind == "constant":
            return np.full(np.broadcast(x, xn).shape, self.c)
        if self.kind == "linear_xn":
            return xn + 0.0 * x
        if self.kind == "linear_x1":
            return x + 0.0 * xn
        out = np.zeros(np.broadcast(x, xn).shape)
        for k, ck in enumerate(self.coeffs):
            out = out + ck * xn**k
        return out


# ---------------------------------------------------------------------------
# closure caps and boundary curves
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CapParams:
    """Tangent-matched circular cap closing one inclusion graph."""

    junction_x: float      # junction abscissa x_j (graph used for |x'| <= x_j)
    junction_y: float      # graph height at the junction, cap side (positive up)
    center_y: float        # cap circle center on the symmetry axis
    radius: float          # cap circle radius
    phi_junction: float    # angle of the right junction seen from the center


def _cap_at(profile: Profile, eps: float, xj: float) -> CapParams:
    hp = float(profile.slope(xj))
    if hp <= 0.0:
        raise GeometryError(f"no tangent-matched cap: profile slope {hp} at x'={xj}")
    yj = 0.5 * eps + float(profile.value(xj))
    cy = yj + xj / hp
    r = math.hypot(xj, xj / hp)
    phi = math.atan2(yj - cy, xj)
    return CapParams(junction_x=xj, junction_y=yj, center_y=cy, radius=r, phi_junction=phi)


def solve_cap(profile: Profile, eps: float, inclusion_radius: float | None) -> CapParams:
    """Find the circular closure cap for one inclusion graph.

    With no requested radius the junction sits at |x'| = r1 and the tangent
    condition fixes the cap.  A requested ``inclusion_radius`` moves the
    junction within [r1, 2*r1] to hit that radius; if no junction in that
    range realizes it, the blending fails.
    """
    if inclusion_radius is None:
        return _cap_at(profile, eps, profile.r1)
    xs = np.linspace(profile.r1, 2.0 * profile.r1, 513)
    radii = np.array([_cap_at(profile, eps, float(x)).radius for x in xs])
    diff = radii - inclusion_radius
    sign_change = np.nonzero(np.diff(np.sign(diff)) != 0)[0]
    if diff[0] == 0.0:
        return _cap_at(profile, eps, float(xs[0]))
    if len(sign_change) == 0:
        raise GeometryError(
            f"no tangent-matched cap of radius {inclusion_radius} "
            f"(achievable range [{radii.min():.6g}, {radii.max():.6g}])"
        )
    lo, hi = float(xs[sign_change[0]]), float(xs[sign_change[0] + 1])
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if (_cap_at(profile, eps, mid).radius - inclusion_radius) * (_cap_at(profile, eps, lo).radius - inclusion_radius) <= 0.0:
            hi = mid
        else:
            lo = mid
    return _cap_at(profile, eps, 0.5 * (lo + hi))


def _graph_samples(profile: Profile, eps: float, cap: CapParams, chord_tol: float) -> np.ndarray:
    """March sample abscissae 0 -> junction with curvature-adaptive steps.

    Step bound: min(0.05 * local gap width from this side, 0.02 * cap
    radius, chord-error control against the local second difference).
    """
    xj = cap.junction_x
    xs = [0.0]
    x = 0.0
    while x < xj:
        delta_here = eps + 2.0 * float(profile.value(x))
        step = min(0.05 * delta_here, 0.02 * cap.radius)
        # second-difference estimate of curvature for the chord error bound
        d = max(1e-9 * profile.r1, 1e-3 * max(x, step))
        h2 = abs(float(profile.value(x + 2 * d)) - 2 * float(profile.value(x + d)) + float(profile.value(x))) / (d * d)
        if h2 > 0.0:
            step = min(step, math.sqrt(8.0 * chord_tol / h2))
        step = max(step, 1e-6 * profile.r1)
        x = min(x + step, xj)
        xs.append(x)
    return np.asarray(xs)


def _upper_curve(profile: Profile, eps: float, cap: CapParams, chord_tol: float) -> np.ndarray:
    """Closed CCW polyline for an upper-style inclusion (gap side down)."""
    xs = _graph_samples(profile, eps, cap, chord_tol)
    ys = 0.5 * eps + profile.value(xs)
    right = np.column_stack([xs, ys])
    left = np.column_stack([-xs[::-1], ys[::-1]])
    graph = np.vstack([left[:-1], right])  # -xj .. +xj, apex (0, eps/2) included once
    # cap arc from the right junction CCW over the top to the left junction,
    # which sits at pi - phi0 by mirror symmetry about the vertical axis
    phi0 = cap.phi_junction
    phi1 = math.pi - phi0
    span = phi1 - phi0
    arc_step = min(0.02 * cap.radius, math.sqrt(8.0 * chord_tol * cap.radius))
    n_arc = max(16, int(math.ceil(span * cap.radius / arc_step)))
    phis = np.linspace(phi0, phi1, n_arc + 1)[1:-1]
    arc = np.column_stack([cap.radius * np.cos(phis), cap.center_y + cap.radius * np.sin(phis)])
    return np.vstack([graph, arc])


def _polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _self_intersection_free(poly: np.ndarray) -> bool:
    # adjacent-sample sanity only: consecutive points strictly distinct
    d = np.linalg.norm(np.diff(np.vstack([poly, poly[:1]]), axis=0), axis=1)
    return bool(np.all(d > 0.0))


@dataclass(frozen=True)
class BoundaryCurves:
    """Sampled closed boundary polylines and their cap parameters."""

    d1: np.ndarray
    d2: np.ndarray
    outer: np.ndarray
    cap_upper: CapParams
    cap_lower: CapParams
    geometry: GapGeometry = field(repr=False, default=None)

    def min_gap_distance(self) -> float:
        """Brute-force min distance between the two inclusion polylines near the gap."""
        a = self.d1[np.abs(self.d1[:, 0]) <= self.geometry.r1]
        b = self.d2[np.abs(self.d2[:, 0]) <= self.geometry.r1]
        d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
        return float(np.sqrt(d2.min()))


def build_geometry(geometry: GapGeometry, chord_tol: float = 1e-5) -> BoundaryCurves:
    """Construct closed boundary polylines for both inclusions and the outer disk.

    The gap-facing portions are the exact graphs sampled with steps bounded
    by the local gap width, so the two nearest polyline points are the gap
    apexes (0, +-eps/2) themselves.
    """
    cap_u = solve_cap(geometry.upper, geometry.eps, geometry.inclusion_radius)
    cap_l = solve_cap(geometry.lower, geometry.eps, geometry.inclusion_radius)
    d1 = _upper_curve(geometry.upper, geometry.eps, cap_u, chord_tol)
    d2_mirror = _upper_curve(geometry.lower, geometry.eps, cap_l, chord_tol)
    d2 = np.column_stack([d2_mirror[::-1, 0], -d2_mirror[::-1, 1]])

    top = cap_u.center_y + cap_u.radius
    bottom = -(cap_l.center_y + cap_l.radius)
    extent = max(top, -bottom, 2.0 * geometry.r1)
    if extent >= geometry.outer_radius:
        raise GeometryError(
            f"containment violated: inclusion extent {extent:.6g} >= outer radius {geometry.outer_radius}"
        )

    n_outer = max(128, int(math.ceil(2 * math.pi / math.sqrt(8.0 * chord_tol / geometry.outer_radius))))
    th = np.linspace(-math.pi, math.pi, n_outer + 1)[:-1]
    outer = geometry.outer_radius * np.column_stack([np.cos(th), np.sin(th)])

    for name, poly in (("D1", d1), ("D2", d2), ("outer", outer)):
        if _polygon_area(poly) <= 0.0:
            raise GeometryError(f"polyline {name} is not positively oriented")
        if not _self_intersection_free(poly):
            raise GeometryError(f"polyline {name} has coincident consecutive samples")

    return BoundaryCurves(d1=d1, d2=d2, outer=outer, cap_upper=cap_u, cap_lower=cap_l, geometry=geometry)


def export_polylines_csv(curves: BoundaryCurves, path) -> None:
    """Write all three boundary polylines as CSV rows (x, y, tag)."""
    rows = ["x,y,tag"]
    for tag, poly in (("InclusionD1", curves.d1), ("InclusionD2", curves.d2), ("OuterD", curves.outer)):
        for x, y in poly:
            rows.append(f"{x!r},{y!r},{tag}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")


# ---------------------------------------------------------------------------
# profile validation against the admissibility conditions
# ---------------------------------------------------------------------------


@dataclass
class ProfileValidation:
    """Numerically sampled admissibility report for one profile."""

    kind: str
    passed: bool
    measured: dict
    violations: list

    def __bool__(self):
        return self.passed


def _fd_slope(profile: Profile, xs: np.ndarray, step: float) -> np.ndarray:
    return (profile.value(xs + step) - profile.value(xs - step)) / (2.0 * step)


def validate_profile(profile: Profile, against: str | None = None,
                     holder_alpha: float | None = None,
                     grid_n: int = 257) -> ProfileValidation:
    """Sample h and its gradient over |x'| <= 2*r1 and check the applicable conditions.

    ``against`` overrides the condition family ('holder', 'power', 'flat');
    by default the profile is checked against its own kind.  Constants are
    measured as extremal ratios on the grid; a family passes when its
    two-sided constants stay within one decade of each other, which is the
    operational reading of "uniform constants" on a finite sample.
    """
    kind = against or {"HolderPower": "holder", "PowerM": "power", "FlatPlateau": "flat"}[type(profile).__name__]
    r1 = profile.r1
    step = 1e-6 * r1
    lin = np.linspace(step * 4, 2.0 * r1 - step * 4, grid_n)
    logs = np.geomspace(1e-5 * r1, 0.5 * r1, 65)
    xs = np.unique(np.concatenate([lin, logs]))
    h = profile.value(xs)
    slope_fd = _fd_slope(profile, xs, step)
    slope_an = profile.slope(xs)
    fd_gap = float(np.max(np.abs(slope_an - slope_fd) / (1.0 + np.abs(slope_an))))

    measured: dict = {"fd_vs_analytic_slope": fd_gap}
    violations: list = []
    passed = True

    h0 = float(profile.value(0.0))
    s0 = float(_fd_slope(profile, np.array([0.0]), step)[0])
    measured["h_at_0"] = h0
    measured["slope_at_0"] = s0
    if abs(h0) > 1e-12 or abs(s0) > 1e-6:
        passed = False
        violations.append((0.0, "h(0') or grad h(0') does not vanish"))

    grad = np.abs(slope_an)
    if kind == "holder":
        alpha = holder_alpha
        if alpha is None:
            alpha = profile.alpha if isinstance(profile, HolderPower) else 0.5
        ratio = grad / np.power(xs, alpha)
        k0, k1 = float(ratio.min()), float(ratio.max())
        measured.update(kappa0=k0, kappa1=k1, alpha=alpha)
        if k0 <= 0.0 or k1 / max(k0, 1e-300) > 10.0:
            passed = False
            i = int(np.argmin(ratio))
            violations.append((float(xs[i]), "grad h is not comparable to |x'|^alpha with uniform constants"))
    elif kind == "power":
        m = profile.m if isinstance(profile, PowerM) else profile.convexity_order
        ratio = h / np.power(xs, m)
        l0, l1 = float(ratio.min()), float(ratio.max())
        grad_ratio = grad / np.power(xs, m - 1.0)
        measured.update(lambda0=l0, lambda1=l1, m=m, grad_const=float(grad_ratio.max()))
        if l0 <= 0.0 or l1 / max(l0, 1e-300) > 10.0:
            passed = False
            i = int(np.argmin(ratio))
            violations.append((float(xs[i]), "h is not comparable to |x'|^m with uniform constants"))
    elif kind == "flat":
        if not isinstance(profile, FlatPlateau):
            r0 = 0.0
            passed = False
            violations.append((0.0, "profile has no plateau"))
        else:
            r0 = profile.r0
            on_plateau = xs <= r0
            if np.any(np.abs(h[on_plateau]) > 1e-14):
                passed = False
                violations.append((float(xs[on_plateau][np.argmax(np.abs(h[on_plateau]))]), "h does not vanish on the plateau"))
            edge_slope = float(_fd_slope(profile, np.array([r0]), step)[0])
            measured["slope_at_plateau_edge"] = edge_slope
            if abs(edge_slope) > 1e-6:
                passed = False
                violations.append((r0, "grad h does not vanish at the plateau edge"))
            start = r0 + profile.collar + 16.0 * step
            out = xs[(xs >= start) & (xs <= 2.0 * r1 - 16.0 * step)]
            hess = (profile.value(out + step) - 2.0 * profile.value(out) + profile.value(out - step)) / (step * step)
            kappa2 = float(hess.min()) if len(out) else 0.0
            measured["kappa2"] = kappa2
            if kappa2 <= 0.0:
                passed = False
                violations.append((float(out[np.argmin(hess)]) if len(out) else r0, "Hessian lower bound fails off the plateau"))
    else:
        raise GeometryError(f"unknown condition family {kind!r}")

    even_gap = float(np.max(np.abs(profile.value(-xs) - h)))
    measured["evenness_gap"] = even_gap
    if even_gap > 1e-12 * (1.0 + float(np.max(np.abs(h)))):
        passed = False
        violations.append((float(xs[np.argmax(np.abs(profile.value(-xs) - h))]), "profile is not even"))

    return ProfileValidation(kind=kind, passed=passed, measured=measured, violations=violations)


def mirrored(geometry: GapGeometry) -> GapGeometry:
    """Geometry with upper and lower roles swapped (reflection across x_n = 0)."""
    return replace(geometry, upper=geometry.lower, lower=geometry.upper)
