"""Closed-form blow-up rates, gap auxiliary field, envelopes, and asymptote scales.

These are the verification targets the numerical harness measures against.
All rate functions are pure and stateless.  Branch selection on the
convexity order uses exact rational comparison so that an order sitting on
a branch boundary (for example order 2 in dimension 3) is never
misclassified by floating-point noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .geometry import FlatPlateau, GapGeometry, GeometryError


class ParameterError(ValueError):
    """Rate or envelope parameters outside their domain."""


def _check_rate_args(n: int, eps: float, log_branch: bool) -> None:
    if int(n) != n or n < 2:
        raise ParameterError(f"dimension n must be an integer >= 2, got {n}")
    upper_ok = eps < 1.0 if log_branch else eps <= 1.0
    if not (0.0 < eps and upper_ok):
        raise ParameterError(f"eps={eps} outside the admissible separation range")


def rate_holder(n: int, alpha: float, eps: float) -> float:
    """Blow-up rate for Holder-graph inclusions: eps^(alpha/(1+alpha)) in the
    plane, 1 in dimension three and higher."""
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must lie in (0,1), got {alpha}")
    _check_rate_args(n, eps, log_branch=False)
    if n == 2:
        return eps ** (alpha / (1.0 + alpha))
    return 1.0


def rate_classic(n: int, eps: float) -> float:
    """Strictly convex (order 2) rate: sqrt(eps), 1/|ln eps|, then 1 for n >= 4."""
    _check_rate_args(n, eps, log_branch=(n == 3))
    if n == 2:
        return math.sqrt(eps)
    if n == 3:
        return 1.0 / abs(math.log(eps))
    return 1.0


def rate_mconvex(n: int, m, eps: float) -> float:
    """Rate for contact of convexity order m (m >= 2).

    Branches: eps^(1-(n-1)/m) when m > n-1, 1/|ln eps| when m == n-1,
    and 1 when m < n-1.  ``m`` may be an int, Fraction, or a float that
    represents its value exactly; the comparison against n-1 is exact.
    """
    m_exact = Fraction(m)
    if m_exact < 2:
        raise ParameterError(f"convexity order m must be >= 2, got {m}")
    nm1 = Fraction(int(n) - 1)
    _check_rate_args(n, eps, log_branch=(m_exact == nm1))
    if m_exact > nm1:
        exponent = 1.0 - float(nm1 / m_exact)
        return eps**exponent
    if m_exact == nm1:
        return 1.0 / abs(math.log(eps))
    return 1.0


# ---------------------------------------------------------------------------
# gap auxiliary field
# ---------------------------------------------------------------------------


def _require_in_neck(geometry: GapGeometry, x, xn, tol: float = 1e-12):
    x = np.asarray(x, dtype=float)
    xn = np.asarray(xn, dtype=float)
    r1 = geometry.r1
    if np.any(np.abs(x) > r1 * (1.0 + tol) + tol):
        raise GeometryError("point outside the neck region |x'| <= r1")
    top = geometry.upper_boundary(x)
    bot = geometry.lower_boundary(x)
    pad = tol * (1.0 + np.abs(top) + np.abs(bot))
    if np.any(xn > top + pad) or np.any(xn < bot - pad):
        raise GeometryError("point outside the gap between the inclusion graphs")
    return x, xn


def aux_ubar(geometry: GapGeometry, x, xn):
    """Linear-in-x_n gap profile: 0 on the lower graph, 1 on the upper graph.

    This is the explicit field whose vertical derivative 1/delta(x')
    carries the leading gradient singularity of the unit-potential
    subproblem.
    """
    x, xn = _require_in_neck(geometry, x, xn)
    hu = geometry.upper.value(x)
    hl = geometry.lower.value(x)
    delta = geometry.eps + hu + hl
    val = (xn + hl + 0.5 * geometry.eps) / delta
    return float(val) if val.ndim == 0 else val


def aux_ubar_grad(geometry: GapGeometry, x, xn):
    """Exact gradient of aux_ubar using the profiles' analytic derivatives.

    Returns an array with last axis (d/dx', d/dx_n); the vertical component
    is 1/delta(x') identically.
    """
    x, xn = _require_in_neck(geometry, x, xn)
    hu = geometry.upper.value(x)
    hl = geometry.lower.value(x)
    su = geometry.upper.slope(x)
    sl = geometry.lower.slope(x)
    delta = geometry.eps + hu + hl
    num = xn + hl + 0.5 * geometry.eps
    gx = (sl * delta - num * (su + sl)) / (delta * delta)
    gn = 1.0 / delta
    out = np.stack(np.broadcast_arrays(gx, gn), axis=-1)
    return out


def gap_delta(geometry: GapGeometry, x):
    """Gap width eps + h_upper + h_lower as an array-friendly helper."""
    x = np.asarray(x, dtype=float)
    return geometry.eps + geometry.upper.value(x) + geometry.lower.value(x)


# ---------------------------------------------------------------------------
# pointwise envelopes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Envelope:
    """A pointwise gradient bound profile with a fitted constant slot.

    kind 'holder':  C * rho_{n,alpha}(eps) / (eps + |x'|^(1+alpha))
    kind 'mconvex': C * rho_{n,m}(eps)     / (eps + |x'|^m)
    kind 'flat':    C * eps / ((|S| + eps/rho_n(eps)) * (eps + dist^2))
    where |S| is the plateau measure and dist = max(0, |x'| - r0).
    """

    kind: str
    n: int
    alpha: float | None = None
    m: float | None = None
    r0: float | None = None
    sigma_measure: float | None = None

    def __post_init__(self):
        if self.kind not in ("holder", "mconvex", "flat"):
            raise ParameterError(f"unknown envelope kind {self.kind!r}")
        if self.kind == "holder" and self.alpha is None:
            raise ParameterError("holder envelope needs alpha")
        if self.kind == "mconvex" and self.m is None:
            raise ParameterError("mconvex envelope needs the order m")
        if self.kind == "flat" and (self.r0 is None or self.sigma_measure is None):
            raise ParameterError("flat envelope needs r0 and the plateau measure")

    def profile(self, x, eps: float):
        """Spatial profile (the envelope with C = 1) at transverse position x."""
        ax = np.abs(np.asarray(x, dtype=float))
        if self.kind == "holder":
            return rate_holder(self.n, self.alpha, eps) / (eps + ax ** (1.0 + self.alpha))
        if self.kind == "mconvex":
            return rate_mconvex(self.n, self.m, eps) / (eps + ax ** float(self.m))
        dist = np.clip(ax - self.r0, 0.0, None)
        scale = eps / (self.sigma_measure + eps / rate_classic(self.n, eps))
        return scale / (eps + dist * dist)


def envelope_for(geometry: GapGeometry) -> Envelope:
    """The envelope family matching a geometry's profile kind."""
    n = geometry.dimension
    up = geometry.upper
    if isinstance(up, FlatPlateau):
        return Envelope(kind="flat", n=n, r0=up.r0, sigma_measure=geometry.plateau_measure())
    if hasattr(up, "alpha"):
        return Envelope(kind="holder", n=n, alpha=up.alpha)
    return Envelope(kind="mconvex", n=n, m=up.m)


def envelope_value(envelope: Envelope, geometry: GapGeometry, x, eps: float, fitted_C: float):
    """Predicted bound on |grad u| at transverse position x with the supplied constant."""
    if envelope.n != geometry.dimension:
        raise ParameterError("envelope dimension does not match the geometry mode")
    ax = np.abs(np.asarray(x, dtype=float))
    if np.any(ax > geometry.r1 * (1.0 + 1e-12)):
        raise GeometryError("envelope evaluated outside the neck")
    return fitted_C * envelope.profile(x, eps)


# ---------------------------------------------------------------------------
# capacity-coefficient and constant-difference scales
# ---------------------------------------------------------------------------


def capacity_asymptote(kind: str, n: int, eps: float, sigma_measure: float = 0.0,
                       alpha: float | None = None, m=None) -> float:
    """Predicted scale of |a11| for the given geometry family.

    Flat plateaus: |S|/eps + 1/rho_n(eps), reducing to the classical rate
    inverse when the plateau degenerates to a point.  Holder graphs:
    1/rho_{n,alpha}(eps).  Order-m contact: 1/rho_{n,m}(eps).
    """
    if kind == "flat":
        return sigma_measure / eps + 1.0 / rate_classic(n, eps)
    if kind == "holder":
        if alpha is None:
            raise ParameterError("holder capacity asymptote needs alpha")
        return 1.0 / rate_holder(n, alpha, eps)
    if kind == "mconvex":
        if m is None:
            raise ParameterError("mconvex capacity asymptote needs m")
        return 1.0 / rate_mconvex(n, m, eps)
    raise ParameterError(f"unknown capacity family {kind!r}")


def cdiff_bound(kind: str, n: int, eps: float, alpha: float | None = None,
                m=None, sigma_measure: float | None = None) -> float:
    """Predicted scale of the floating-potential difference |C1 - C2|.

    Holder graphs scale like rho_{n,alpha}(eps); order-m contact like
    rho_{n,m}(eps); flat plateaus like eps / (|S| + eps/rho_n(eps)).
    """
    if kind == "holder":
        if alpha is None:
            raise ParameterError("holder constant-difference bound needs alpha")
        return rate_holder(n, alpha, eps)
    if kind == "mconvex":
        if m is None:
            raise ParameterError("mconvex constant-difference bound needs m")
        return rate_mconvex(n, m, eps)
    if kind == "flat":
        if sigma_measure is None:
            raise ParameterError("flat constant-difference bound needs the plateau measure")
        return eps / (sigma_measure + eps / rate_classic(n, eps))
    raise ParameterError(f"unknown constant-difference family {kind!r}")
