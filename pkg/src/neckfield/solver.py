"""P1 finite element solver for the floating-potential conductivity problem.

The potential is piecewise linear on the triangulation.  Inclusion
boundaries carry either fixed data (the decomposition subproblems) or a
single floating unknown each (the constrained solve), realized by
condensing all nodes of one tagged boundary onto one degree of freedom.
The axisymmetric mode assembles the weighted form with weight 2*pi*r
evaluated at triangle centroids, which integrates the linear weight
exactly against the constant P1 gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import BoundaryData, GapGeometry, HolderPower
from .mesh import Mesh, TAG_AXIS, TAG_D1, TAG_D2, TAG_OUTER


class AssemblyError(RuntimeError):
    """The discrete system cannot be formed (e.g. no Dirichlet boundary)."""


class SolverError(RuntimeError):
    """A linear solve failed or did not converge."""


@dataclass
class HarmonicField:
    """Nodal P1 field on a mesh, produced by one of the solve paths."""

    mesh: Mesh
    values: np.ndarray
    weight_mode: str
    name: str = ""

    def __sub__(self, other: "HarmonicField") -> "HarmonicField":
        return HarmonicField(self.mesh, self.values - other.values, self.weight_mode,
                             name=f"{self.name}-{other.name}")


@dataclass
class CapacitySystem:
    """Capacity coefficients, boundary-data fluxes, and resolved constants."""

    a11: float
    a12: float
    a21: float
    a22: float
    b1: float
    b2: float
    C1: float | None = None
    C2: float | None = None
    btilde1: float | None = None
    btilde1_flux: float | None = None
    flux_mismatch: float = 0.0
    flux_warning: bool = False
    residual: float | None = None

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("a11", "a12", "a21", "a22", "b1", "b2", "C1", "C2",
                 "btilde1", "btilde1_flux", "flux_mismatch", "flux_warning")}


@dataclass
class GradientStats:
    max_grad_neck: float
    max_grad_global: float
    grad_on_segment: np.ndarray
    energy: float


@dataclass
class ResidualStats:
    """Neck-restricted statistics of the field minus the gap auxiliary profile."""

    max_grad_w: float
    max_grad_w_weighted: float | None
    energy_w: float


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------


class FemSystem:
    """Assembled stiffness operator plus boundary bookkeeping and factorizations."""

    def __init__(self, mesh: Mesh, weight_mode: str | None = None,
                 backend: str = "direct", tol: float = 1e-12):
        self.mesh = mesh
        self.weight_mode = weight_mode or mesh.mode
        if self.weight_mode not in ("planar", "axisymmetric"):
            raise AssemblyError(f"unknown weight mode {self.weight_mode!r}")
        if backend not in ("direct", "cg"):
            raise AssemblyError(f"unknown backend {backend!r}")
        self.backend = backend
        self.tol = tol

        pts = mesh.nodes[mesh.triangles]
        x, y = pts[:, :, 0], pts[:, :, 1]
        b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
        c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
        self.areas = 0.5 * (b[:, 0] * c[:, 1] - b[:, 1] * c[:, 0])
        if np.any(self.areas <= 0.0):
            raise AssemblyError("mesh contains non-positive triangles")
        inv2a = 1.0 / (2.0 * self.areas)
        self.hat_grads = np.stack([b * inv2a[:, None], c * inv2a[:, None]], axis=2)  # (T,3,2)
        if self.weight_mode == "axisymmetric":
            self.weights = 2.0 * math.pi * x.mean(axis=1)
            if np.any(self.weights < 0.0):
                raise AssemblyError("axisymmetric mesh has triangles at negative radius")
        else:
            self.weights = np.ones(len(self.areas))

        w = (self.weights * self.areas)
        ke = np.einsum("tid,tjd->tij", self.hat_grads, self.hat_grads) * w[:, None, None]
        rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
        cols = np.tile(mesh.triangles, (1, 3)).ravel()
        n = mesh.node_count
        self.A = sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()

        def tag_nodes(tag):
            sel = mesh.boundary_tags == tag
            return np.unique(mesh.boundary_edges[sel])

        self.outer_nodes = tag_nodes(TAG_OUTER)
        self.d1_nodes = tag_nodes(TAG_D1)
        self.d2_nodes = tag_nodes(TAG_D2)
        if len(self.outer_nodes) == 0:
            raise AssemblyError("singular system: no Dirichlet boundary on the outer disk")

        dir_all = np.zeros(n, dtype=bool)
        for ids in (self.outer_nodes, self.d1_nodes, self.d2_nodes):
            dir_all[ids] = True
        self.full_dirichlet = dir_all
        self.free_nodes = np.nonzero(~dir_all)[0]
        self._lu_ff = None
        self._lu_cond = None
        self._prolong = None

    # -- fixed-boundary path -------------------------------------------------

    def _factor_ff(self):
        if self._lu_ff is None:
            F = self.free_nodes
            self._K_ff = self.A[F][:, F].tocsc()
            if self.backend == "direct":
                self._lu_ff = spla.factorized(self._K_ff)
            else:
                self._lu_ff = None
        return self._K_ff

    def _solve_spd(self, K, rhs, label: str) -> np.ndarray:
        if self.backend == "direct":
            if K is self._K_ff:
                return self._lu_ff(rhs)
            return spla.spsolve(K.tocsc(), rhs)
        d = K.diagonal()
        M = sp.diags(1.0 / np.where(d > 0, d, 1.0))
        history = []
        sol, info = spla.cg(K, rhs, rtol=self.tol, atol=0.0, maxiter=20000, M=M,
                            callback=lambda xk: history.append(float(np.linalg.norm(K @ xk - rhs))))
        if info != 0:
            raise SolverError(f"cg did not converge for {label}; residual history tail "
                              f"{[f'{h:.3e}' for h in history[-5:]]}")
        return sol

    def solve_dirichlet(self, boundary_values: np.ndarray, name: str = "") -> HarmonicField:
        """Solve with fixed values on all tagged boundaries (vector indexed by node)."""
        K = self._factor_ff()
        F = self.free_nodes
        g = np.zeros(self.mesh.node_count)
        g[self.full_dirichlet] = boundary_values[self.full_dirichlet]
        rhs = -(self.A @ g)[F]
        sol = self._solve_spd(K, rhs, name or "dirichlet solve")
        out = g.copy()
        out[F] = sol
        res = np.linalg.norm((self.A @ out)[F])
        scale = max(1.0, float(np.linalg.norm(out)))
        if res > 1e-7 * scale * max(1.0, abs(self.A.max())):
            raise SolverError(f"interior residual {res:.3e} too large for {name!r}")
        return HarmonicField(self.mesh, out, self.weight_mode, name=name)

    # -- floating-potential path ----------------------------------------------

    def _condensed(self):
        if self._lu_cond is None:
            n = self.mesh.node_count
            free_mask = np.ones(n, dtype=bool)
            free_mask[self.outer_nodes] = False
            free_mask[self.d1_nodes] = False
            free_mask[self.d2_nodes] = False
            F = np.nonzero(free_mask)[0]
            nf = len(F)
            groups = [ids for ids in (self.d1_nodes, self.d2_nodes) if len(ids)]
            ncond = nf + len(groups)
            rows = list(F)
            cols = list(range(nf))
            for gi, ids in enumerate(groups):
                rows.extend(ids.tolist())
                cols.extend([nf + gi] * len(ids))
            P = sp.coo_matrix((np.ones(len(rows)), (rows, cols)),
                              shape=(n, ncond)).tocsr()
            self._prolong = P
            self._cond_groups = groups
            self._K_cond = (P.T @ self.A @ P).tocsc()
            self._lu_cond = spla.factorized(self._K_cond) if self.backend == "direct" else None
        return self._K_cond

    def solve_floating(self, phi: BoundaryData, name: str = "u") -> tuple[HarmonicField, list[float]]:
        """Energy-minimizing solve with phi on the outer disk and one floating
        constant per inclusion boundary."""
        if not phi.admissible_for(self.weight_mode):
            raise SolverError(f"boundary data {phi.kind!r} not admissible in {self.weight_mode} mode")
        K = self._condensed()
        P = self._prolong
        g = np.zeros(self.mesh.node_count)
        xy = self.mesh.nodes[self.outer_nodes]
        g[self.outer_nodes] = phi(xy[:, 0], xy[:, 1])
        rhs = -(P.T @ (self.A @ g))
        if self.backend == "direct":
            sol = self._lu_cond(rhs)
        else:
            sol = self._solve_spd(K, rhs, name)
        out = g + P @ sol
        nf = P.shape[1] - len(self._cond_groups)
        consts = [float(sol[nf + i]) for i in range(len(self._cond_groups))]
        return HarmonicField(self.mesh, out, self.weight_mode, name=name), consts

    @property
    def condensed_dimension(self) -> int:
        self._condensed()
        return self._prolong.shape[1]

    # -- derived quantities ----------------------------------------------------

    def tri_gradient(self, values: np.ndarray) -> np.ndarray:
        return np.einsum("tid,ti->td", self.hat_grads, values[self.mesh.triangles])

    def energy(self, values: np.ndarray) -> float:
        return float(values @ (self.A @ values))

    def inner_energy(self, u: np.ndarray, v: np.ndarray) -> float:
        return float(u @ (self.A @ v))

    def nodal_flux(self, values: np.ndarray, tag: int) -> float:
        """Variational flux of the field through one tagged boundary.

        Sum of stiffness residual rows over the boundary's nodes; exact for
        the discrete solution, with the domain-outward normal orientation.
        """
        ids = {TAG_OUTER: self.outer_nodes, TAG_D1: self.d1_nodes, TAG_D2: self.d2_nodes}[tag]
        return float(np.sum((self.A @ values)[ids]))

    def boundary_flux_quadrature(self, values: np.ndarray, tag: int) -> float:
        """Direct flux quadrature over the tagged edges (consistency diagnostic)."""
        sel = np.nonzero(self.mesh.boundary_tags == tag)[0]
        edges = self.mesh.boundary_edges[sel]
        edge_tri = _edge_to_triangle(self.mesh)
        grads = self.tri_gradient(values)
        total = 0.0
        cents = self.mesh.centroids()
        for a, b in edges:
            t = edge_tri[(min(a, b), max(a, b))]
            pa, pb = self.mesh.nodes[a], self.mesh.nodes[b]
            ev = pb - pa
            ln = math.hypot(ev[0], ev[1])
            nrm = np.array([ev[1], -ev[0]]) / ln
            mid = 0.5 * (pa + pb)
            if np.dot(nrm, cents[t] - mid) > 0:
                nrm = -nrm
            w = 2.0 * math.pi * mid[0] if self.weight_mode == "axisymmetric" else 1.0
            total += ln * w * float(grads[t] @ nrm)
        return total


def _edge_to_triangle(mesh: Mesh) -> dict:
    out: dict[tuple[int, int], int] = {}
    for t, (a, b, c) in enumerate(mesh.triangles):
        for u, v in ((a, b), (b, c), (c, a)):
            key = (u, v) if u < v else (v, u)
            if key not in out:
                out[key] = t
    return out


def assemble_system(mesh: Mesh, weight_mode: str | None = None,
                    backend: str = "direct", tol: float = 1e-12) -> FemSystem:
    """Assemble the stiffness operator with floating-potential condensation support."""
    return FemSystem(mesh, weight_mode=weight_mode, backend=backend, tol=tol)


# ---------------------------------------------------------------------------
# decomposition path
# ---------------------------------------------------------------------------


def solve_subproblems(system: FemSystem, boundary_data: BoundaryData):
    """Solve the three fixed-boundary subproblems.

    v1 is 1 on the first inclusion and 0 elsewhere, v2 the mirror datum,
    v0 carries the outer data and vanishes on both inclusions.
    """
    mesh = system.mesh
    n = mesh.node_count
    g1 = np.zeros(n)
    g1[system.d1_nodes] = 1.0
    v1 = system.solve_dirichlet(g1, name="v1")
    g2 = np.zeros(n)
    g2[system.d2_nodes] = 1.0
    v2 = system.solve_dirichlet(g2, name="v2")
    g0 = np.zeros(n)
    xy = mesh.nodes[system.outer_nodes]
    if not boundary_data.admissible_for(system.weight_mode):
        raise SolverError(f"boundary data {boundary_data.kind!r} not admissible in "
                          f"{system.weight_mode} mode")
    g0[system.outer_nodes] = boundary_data(xy[:, 0], xy[:, 1])
    v0 = system.solve_dirichlet(g0, name="v0")
    return v0, v1, v2


def capacity_matrix(system: FemSystem, v0: HarmonicField, v1: HarmonicField,
                    v2: HarmonicField) -> CapacitySystem:
    """Capacity coefficients from the volume bilinear form.

    a_ij = -integral grad v_i . grad v_j dmu and b_i = -integral
    grad v_i . grad v_0 dmu; the direct boundary-flux quadrature is kept as
    a consistency diagnostic and sets a warning flag past 5 percent
    mismatch.
    """
    a11 = -system.inner_energy(v1.values, v1.values)
    a12 = -system.inner_energy(v1.values, v2.values)
    a21 = -system.inner_energy(v2.values, v1.values)
    a22 = -system.inner_energy(v2.values, v2.values)
    b1 = -system.inner_energy(v1.values, v0.values)
    b2 = -system.inner_energy(v2.values, v0.values)

    mismatch = 0.0
    if len(system.d1_nodes):
        bd = -system.boundary_flux_quadrature(v1.values, TAG_D1)
        mismatch = abs(bd - a11) / max(abs(a11), 1e-300)
    return CapacitySystem(a11=a11, a12=a12, a21=a21, a22=a22, b1=b1, b2=b2,
                          flux_mismatch=mismatch, flux_warning=mismatch > 0.05)


def solve_constants(capacity: CapacitySystem) -> CapacitySystem:
    """Resolve the floating constants from the two zero-flux conditions."""
    M = np.array([[capacity.a11, capacity.a12], [capacity.a21, capacity.a22]])
    rhs = -np.array([capacity.b1, capacity.b2])
    det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
    if abs(det) <= 1e-14 * max(abs(capacity.a11), abs(capacity.a22)) ** 2:
        raise SolverError("degenerate capacity matrix: flux system is singular")
    C = np.linalg.solve(M, rhs)
    res = float(np.linalg.norm(M @ C - rhs) / max(np.linalg.norm(rhs), 1e-300))
    capacity.C1, capacity.C2 = float(C[0]), float(C[1])
    capacity.btilde1 = -(capacity.C1 - capacity.C2) * capacity.a11
    capacity.btilde1_flux = capacity.C2 * (capacity.a11 + capacity.a12) + capacity.b1
    capacity.residual = res
    return capacity


def reconstruct_u(v0: HarmonicField, v1: HarmonicField, v2: HarmonicField,
                  C1: float, C2: float) -> HarmonicField:
    """Nodal combination C1*v1 + C2*v2 + v0."""
    vals = C1 * v1.values + C2 * v2.values + v0.values
    return HarmonicField(v0.mesh, vals, v0.weight_mode, name="u")


def direct_solve(system: FemSystem, boundary_data: BoundaryData):
    """One constrained solve with floating inclusion potentials.

    Returns (field, C1, C2); C2 is None for single-inclusion debug meshes.
    """
    u, consts = system.solve_floating(boundary_data, name="u")
    c1 = consts[0] if len(consts) > 0 else None
    c2 = consts[1] if len(consts) > 1 else None
    scale = max(system.energy(u.values), 1.0)
    for tag, have in ((TAG_D1, len(system.d1_nodes)), (TAG_D2, len(system.d2_nodes))):
        if have:
            flux = system.nodal_flux(u.values, tag)
            if abs(flux) > 1e-9 * scale:
                raise SolverError(f"floating boundary flux {flux:.3e} not zero")
    return u, c1, c2


# ---------------------------------------------------------------------------
# gradient statistics
# ---------------------------------------------------------------------------


def _locate_in_neck(mesh: Mesh, pts: np.ndarray) -> np.ndarray:
    """First neck triangle containing each point (barycentric test)."""
    neck_ids = np.nonzero(mesh.neck_flags)[0]
    tri = mesh.triangles[neck_ids]
    p = mesh.nodes[tri]
    out = np.full(len(pts), -1, dtype=np.int64)
    v0 = p[:, 1] - p[:, 0]
    v1 = p[:, 2] - p[:, 0]
    den = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
    for i, q in enumerate(pts):
        d = q[None, :] - p[:, 0]
        l1 = (d[:, 0] * v1[:, 1] - d[:, 1] * v1[:, 0]) / den
        l2 = (v0[:, 0] * d[:, 1] - v0[:, 1] * d[:, 0]) / den
        ok = (l1 >= -1e-10) & (l2 >= -1e-10) & (l1 + l2 <= 1.0 + 1e-10)
        hit = np.nonzero(ok)[0]
        if len(hit):
            out[i] = neck_ids[hit[0]]
    return out


def segment_points(geometry: GapGeometry, n: int = 33, inset_frac: float = 1e-3) -> np.ndarray:
    """Equispaced points on the closest-approach segment between the inclusions,
    endpoints pulled inward to avoid boundary-node gradient ambiguity."""
    half = 0.5 * geometry.eps
    inset = inset_frac * geometry.eps
    z = np.linspace(-half + inset, half - inset, n)
    return np.column_stack([np.zeros(n), z])


def gradient_stats(field: HarmonicField, geometry: GapGeometry | None = None,
                   system: FemSystem | None = None, n_segment: int = 33) -> GradientStats:
    """Per-triangle gradient statistics and the closest-segment profile."""
    sys_ = system or assemble_system(field.mesh, weight_mode=field.weight_mode)
    grads = sys_.tri_gradient(field.values)
    gnorm = np.hypot(grads[:, 0], grads[:, 1])
    max_global = float(gnorm.max())
    max_neck = float(gnorm[field.mesh.neck_flags].max()) if np.any(field.mesh.neck_flags) else 0.0

    seg = np.zeros(0)
    if geometry is not None and np.any(field.mesh.neck_flags):
        pts = segment_points(geometry, n=n_segment)
        tri_idx = _locate_in_neck(field.mesh, pts)
        if np.any(tri_idx < 0):
            bad = pts[np.nonzero(tri_idx < 0)[0][0]]
            raise SolverError(f"segment point ({bad[0]:.3g}, {bad[1]:.3g}) outside the mesh")
        seg = gnorm[tri_idx]

    return GradientStats(max_grad_neck=max_neck, max_grad_global=max_global,
                         grad_on_segment=seg, energy=sys_.energy(field.values))


def interp_ubar(geometry: GapGeometry, mesh: Mesh) -> np.ndarray:
    """Nodal values of the gap auxiliary profile, clipped onto the closed neck.

    Boundary nodes sit on the graphs so the interpolant is exactly 0 and 1
    there; nodes outside the neck get the clipped continuation (only neck
    triangles ever consume these values).
    """
    x = np.clip(mesh.nodes[:, 0], -geometry.r1, geometry.r1)
    top = geometry.upper_boundary(x)
    bot = geometry.lower_boundary(x)
    z = np.clip(mesh.nodes[:, 1], bot, top)
    hu = geometry.upper.value(x)
    hl = geometry.lower.value(x)
    return (z + hl + 0.5 * geometry.eps) / (geometry.eps + hu + hl)


def residual_w(v1: HarmonicField, geometry: GapGeometry,
               system: FemSystem | None = None) -> ResidualStats:
    """Gradient statistics of the unit-potential field minus the gap profile.

    The comparison subtracts the nodal interpolant of the auxiliary profile
    before taking per-triangle gradients, so that both terms live in the
    same discrete space; comparing the discrete gradient against the
    analytic profile gradient point by point would instead be dominated by
    the interpolation mismatch of the 1/gap factor, which grows like 1/eps
    on any fixed grading.

    For Holder-graph geometries the product with (eps + |x'|^(1+alpha))
    raised to 1/(1+alpha) is also reported, since that is the combination
    expected to stay bounded as the gap closes.
    """
    sys_ = system or assemble_system(v1.mesh, weight_mode=v1.weight_mode)
    mesh = v1.mesh
    neck = mesh.neck_flags
    w_vals = v1.values - interp_ubar(geometry, mesh)
    dw = sys_.tri_gradient(w_vals)[neck]
    wnorm = np.hypot(dw[:, 0], dw[:, 1])
    max_w = float(wnorm.max())

    weighted = None
    if isinstance(geometry.upper, HolderPower):
        a = geometry.upper.alpha
        cents = mesh.centroids()[neck]
        wgt = (geometry.eps + np.abs(cents[:, 0]) ** (1.0 + a)) ** (1.0 / (1.0 + a))
        weighted = float((wnorm * wgt).max())

    wa = sys_.weights[neck] * sys_.areas[neck]
    energy_w = float(np.sum(wa * wnorm**2))
    return ResidualStats(max_grad_w=max_w, max_grad_w_weighted=weighted, energy_w=energy_w)
