"""neckfield: numerical laboratory for the two-inclusion perfect conductivity problem."""

__version__ = "0.1.0"

from .geometry import (
    BoundaryData,
    FlatPlateau,
    GapGeometry,
    GeometryError,
    HolderPower,
    PowerM,
    build_geometry,
    eval_h,
    gap_width,
    validate_profile,
)
from .asymptotics import (
    Envelope,
    aux_ubar,
    aux_ubar_grad,
    capacity_asymptote,
    cdiff_bound,
    envelope_for,
    envelope_value,
    rate_classic,
    rate_holder,
    rate_mconvex,
)

__all__ = [
    "BoundaryData",
    "FlatPlateau",
    "GapGeometry",
    "GeometryError",
    "HolderPower",
    "PowerM",
    "build_geometry",
    "eval_h",
    "gap_width",
    "validate_profile",
    "Envelope",
    "aux_ubar",
    "aux_ubar_grad",
    "capacity_asymptote",
    "cdiff_bound",
    "envelope_for",
    "envelope_value",
    "rate_classic",
    "rate_holder",
    "rate_mconvex",
    "__version__",
]
