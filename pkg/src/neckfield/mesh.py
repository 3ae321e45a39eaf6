"""Conforming graded triangulations that resolve the eps-gap.

The neck (|x'| <= r1, between the two graphs) is a mapped tensor grid with
a fixed number of vertical layers and horizontal columns equidistributed
against a power of the local gap width.  The rest of the domain is covered
by a boundary-layer blend: the dumbbell formed by the two inclusions plus
the filled neck is star-shaped about the origin, so rays from its boundary
chain to the outer circle carry geometrically graded rings of quads.  The
two constructions share the stitch columns node for node, and every quad is
split along its shorter diagonal, which keeps the triangulation locally
Delaunay on the near-rectangular cells.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import BoundaryCurves, GapGeometry, GeometryError, build_geometry, solve_cap

TAG_OUTER = 1
TAG_D1 = 2
TAG_D2 = 3
TAG_AXIS = 4
TAG_NAMES = {TAG_OUTER: "OuterD", TAG_D1: "InclusionD1", TAG_D2: "InclusionD2", TAG_AXIS: "Axis"}
TAG_CODES = {v: k for k, v in TAG_NAMES.items()}


class MeshError(RuntimeError):
    """Mesh generation or validity failure."""


@dataclass
class Mesh:
    """Immutable conforming triangulation with boundary tags and gap metadata."""

    nodes: np.ndarray            # (N, 2) float64
    triangles: np.ndarray        # (T, 3) int32, positively oriented
    boundary_edges: np.ndarray   # (B, 2) int32
    boundary_tags: np.ndarray    # (B,) int8 codes from TAG_NAMES
    neck_flags: np.ndarray       # (T,) bool
    axis_flags: np.ndarray       # (N,) bool
    mode: str = "planar"
    projectors: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for arr in (self.nodes, self.triangles, self.boundary_edges,
                    self.boundary_tags, self.neck_flags, self.axis_flags):
            arr.setflags(write=False)

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    @property
    def tri_count(self) -> int:
        return len(self.triangles)

    def tri_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        return 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                      - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))

    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    def assert_valid(self) -> None:
        """Check orientation, conformity, and the boundary tag partition."""
        areas = self.tri_areas()
        if np.any(areas <= 0.0):
            i = int(np.argmin(areas))
            c = self.centroids()[i]
            raise MeshError(f"non-positive triangle {i} near ({c[0]:.6g}, {c[1]:.6g})")
        edges = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        uniq, counts = np.unique(edges, axis=0, return_counts=True)
        if np.any(counts > 2):
            bad = uniq[np.argmax(counts)]
            raise MeshError(f"edge {tuple(bad)} shared by more than two triangles")
        topo = {tuple(e) for e in uniq[counts == 1]}
        tagged = {tuple(sorted(e)) for e in self.boundary_edges}
        if topo != tagged:
            missing = topo - tagged
            extra = tagged - topo
            raise MeshError(f"boundary tags do not partition the boundary "
                            f"(missing {len(missing)}, extra {len(extra)})")


# ---------------------------------------------------------------------------
# quad splitting
# ---------------------------------------------------------------------------


def _split_quads(nodes: np.ndarray, bl, br, tr, tl) -> np.ndarray:
    """Split quads along the shorter diagonal.

    Ties (rectangles) break by quadrant so that a mirror image of the quad
    receives the mirror-image split; this keeps symmetric geometries
    symmetric to the last bit.
    """
    bl = np.asarray(bl); br = np.asarray(br); tr = np.asarray(tr); tl = np.asarray(tl)
    d_a = np.sum((nodes[tr] - nodes[bl]) ** 2, axis=1)
    d_b = np.sum((nodes[tl] - nodes[br]) ** 2, axis=1)
    scale = np.maximum(d_a, d_b)
    tie = np.abs(d_a - d_b) <= 1e-24 * (1.0 + scale)
    xc = 0.25 * (nodes[bl, 0] + nodes[br, 0] + nodes[tr, 0] + nodes[tl, 0])
    zc = 0.25 * (nodes[bl, 1] + nodes[br, 1] + nodes[tr, 1] + nodes[tl, 1])
    tie_a = (xc > 0.0) == (zc > 0.0)
    use_a = np.where(tie, tie_a, d_a < d_b)
    t1 = np.where(use_a[:, None], np.stack([bl, br, tr], axis=1), np.stack([bl, br, tl], axis=1))
    t2 = np.where(use_a[:, None], np.stack([bl, tr, tl], axis=1), np.stack([br, tr, tl], axis=1))
    return np.concatenate([t1, t2], axis=0)


def _orient_positive(nodes: np.ndarray, tris: np.ndarray) -> np.ndarray:
    p = nodes[tris]
    areas = 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                   - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))
    flip = areas < 0.0
    tris = tris.copy()
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return tris


# ---------------------------------------------------------------------------
# neck tensor grid
# ---------------------------------------------------------------------------


def _bisect_gap(geometry: GapGeometry, target: float, lo: float, hi: float) -> float:
    from .asymptotics import gap_delta

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if gap_delta(geometry, mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _matching_scale(geometry: GapGeometry) -> tuple[float, float]:
    """(plateau edge, width over which the gap doubles past it).

    For strictly convex contact the plateau edge is 0 and the width is the
    transverse scale the grading must resolve; for flat plateaus the scale
    is the shoulder width just past the contact set.
    """
    from .asymptotics import gap_delta

    r1, eps = geometry.r1, geometry.eps
    edge = 0.0
    if gap_delta(geometry, r1) <= eps * (1.0 + 1e-12):
        return r1, r1  # gap essentially flat across the whole neck
    if gap_delta(geometry, 0.5 * r1) <= eps * (1.0 + 1e-12) or geometry.plateau_measure() > 0.0:
        edge = _bisect_gap(geometry, eps * (1.0 + 1e-9), 0.0, r1)
    if gap_delta(geometry, 2.0 * r1) < 2.0 * eps:
        return edge, max(r1 - edge, 1e-3 * r1)
    x2 = _bisect_gap(geometry, 2.0 * eps, edge, 2.0 * r1)
    return edge, max(x2 - edge, 1e-14 * r1)


def _neck_columns(geometry: GapGeometry, grading_exponent: float, neck_density: float) -> np.ndarray:
    """Column abscissae marching with step ~ (gap/2*eps)^g times the matching scale.

    On a flat plateau the gap carries no horizontal variation, so the step
    there is floored at a fixed fraction of the plateau width instead of
    the (much finer) shoulder scale.
    """
    from .asymptotics import gap_delta

    r1, eps, g = geometry.r1, geometry.eps, grading_exponent
    edge, scale = _matching_scale(geometry)
    step0 = scale / neck_density
    plateau_floor = edge / 24.0 if edge > 0.0 else 0.0
    xs = [0.0]
    x = 0.0
    while True:
        d = float(gap_delta(geometry, x))
        step = step0 * (d / (2.0 * eps)) ** g
        if d <= 1.25 * eps and plateau_floor > 0.0:
            step = max(step, plateau_floor)
        step = min(step, r1 / 6.0)
        if x + step >= r1 - 1e-12 * r1:
            break
        x += step
        xs.append(x)
    if len(xs) >= 2 and (r1 - xs[-1]) < 0.25 * (xs[-1] - xs[-2]):
        xs.pop()
    xs.append(r1)
    if len(xs) < 5:
        xs = list(np.linspace(0.0, r1, 5))
    half = np.asarray(xs)
    if geometry.mode == "axisymmetric":
        return half
    return np.concatenate([-half[:0:-1], half])


def _neck_grid(geometry: GapGeometry, layers: int, grading_exponent: float, neck_density: float):
    xs = _neck_columns(geometry, grading_exponent, neck_density)
    ncol = len(xs)
    top = geometry.upper_boundary(xs)
    bot = geometry.lower_boundary(xs)
    fractions = np.arange(layers + 1) / layers
    zz = bot[:, None] + (top - bot)[:, None] * fractions[None, :]
    nodes = np.column_stack([np.repeat(xs, layers + 1), zz.ravel()])

    def nid(k, j):
        return k * (layers + 1) + j

    k = np.repeat(np.arange(ncol - 1), layers)
    j = np.tile(np.arange(layers), ncol - 1)
    tris = _split_quads(nodes, nid(k, j), nid(k + 1, j), nid(k + 1, j + 1), nid(k, j + 1))

    edges, tags = [], []
    for kk in range(ncol - 1):
        edges.append((nid(kk, 0), nid(kk + 1, 0)))
        tags.append(TAG_D2)
        edges.append((nid(kk, layers), nid(kk + 1, layers)))
        tags.append(TAG_D1)
    return xs, nodes, tris, edges, tags


# ---------------------------------------------------------------------------
# boundary-layer blend from the dumbbell chain to the outer circle
# ---------------------------------------------------------------------------


def _arc_points(cap, phi_a: float, phi_b: float, step: float, lower: bool) -> np.ndarray:
    """Cap-circle points strictly between the angles, even count so the apex is hit."""
    span = phi_b - phi_a
    n = max(8, int(math.ceil(abs(span) * cap.radius / step)))
    if n % 2 == 1:
        n += 1
    phis = np.linspace(phi_a, phi_b, n + 1)[1:-1]
    x = cap.radius * np.cos(phis)
    z = cap.center_y + cap.radius * np.sin(phis)
    if lower:
        z = -z
    return np.column_stack([x, z])


def _graph_points(profile, eps: float, x_a: float, x_b: float, step: float, lower: bool) -> np.ndarray:
    """Graph points strictly after x_a up to and including x_b."""
    if abs(x_b - x_a) < 1e-15:
        return np.zeros((0, 2))
    n = max(1, int(math.ceil(abs(x_b - x_a) / step)))
    xs = np.linspace(x_a, x_b, n + 1)[1:]
    z = 0.5 * eps + profile.value(xs)
    if lower:
        z = -z
    return np.column_stack([xs, z])


def _solve_growth(h: np.ndarray, t: np.ndarray, J: int, gmax: float) -> np.ndarray:
    """Per-ray growth factors so that J geometric steps of first size ~h sum to t."""
    def total(gamma):
        gamma = np.where(np.abs(gamma - 1.0) < 1e-12, 1.0 + 1e-12, gamma)
        return h * (gamma**J - 1.0) / (gamma - 1.0)

    lo = np.full_like(h, 1.0 + 1e-9)
    hi = np.full_like(h, 4.0)
    uniform = h * J >= t  # local spacing already covers the distance
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        too_small = total(mid) < t
        lo = np.where(too_small, mid, lo)
        hi = np.where(too_small, hi, mid)
    gamma = 0.5 * (lo + hi)
    return np.where(uniform, 1.0, np.minimum(gamma, gmax * 1.5))


def _ring_fractions(h: np.ndarray, t: np.ndarray, J: int, growth: float) -> np.ndarray:
    """Cumulative fractions (M, J) of each ray covered after ring j."""
    gamma = _solve_growth(h, t, J, growth)
    steps = h[:, None] * gamma[:, None] ** np.arange(J)[None, :]
    cum = np.cumsum(steps, axis=1)
    frac = cum / cum[:, -1:]
    frac[:, -1] = 1.0
    return frac


def _smooth_spacing(h: np.ndarray, cyclic: bool, ratio: float = 1.2, sweeps: int = 12) -> np.ndarray:
    h = h.copy()
    for _ in range(sweeps):
        if cyclic:
            nb = np.minimum(np.roll(h, 1), np.roll(h, -1))
        else:
            nb = np.minimum(np.concatenate([[h[1]], h[:-1]]), np.concatenate([h[1:], [h[-2]]]))
        h = np.minimum(h, ratio * nb)
    return h


def _rings_needed(h: np.ndarray, t: np.ndarray, growth: float, h_cap: float) -> int:
    J = 0
    for hi, ti in zip(h, t):
        c, s, n = 0.0, hi, 0
        while c < ti and n < 500:
            c += min(s, h_cap)
            s *= growth
            n += 1
        J = max(J, n)
    return max(J, 3)


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------


def generate_mesh(geometry: GapGeometry, layers: int = 8, grading_exponent: float = 0.5,
                  target_outer_h: float | None = None, neck_density: float = 8.0,
                  growth: float = 1.3, cap_step_frac: float = 0.05) -> Mesh:
    """Build the graded two-inclusion mesh.

    layers            vertical layers across the gap (>= 4)
    grading_exponent  g in (0, 1]; horizontal neck step follows gap_width^g
    target_outer_h    size ceiling for the outer region (default 0.08 * outer_radius)
    neck_density      columns across the gap-doubling half-width
    growth            geometric ring growth away from the dumbbell
    """
    if layers < 4:
        raise MeshError(f"layers must be >= 4, got {layers}")
    if not 0.0 < grading_exponent <= 1.0:
        raise MeshError(f"grading_exponent must lie in (0, 1], got {grading_exponent}")
    if target_outer_h is None:
        target_outer_h = 0.08 * geometry.outer_radius
    axisym = geometry.mode == "axisymmetric"
    eps, r1, R = geometry.eps, geometry.r1, geometry.outer_radius

    cap_u = solve_cap(geometry.upper, eps, geometry.inclusion_radius)
    cap_l = solve_cap(geometry.lower, eps, geometry.inclusion_radius)
    top_extent = cap_u.center_y + cap_u.radius
    bot_extent = cap_l.center_y + cap_l.radius
    if max(top_extent, bot_extent, 2.0 * r1) >= R:
        raise GeometryError(f"containment violated: inclusion extent "
                            f"{max(top_extent, bot_extent):.6g} >= outer radius {R}")

    xs, nodes_arr, neck_tris, bedges, btags = _neck_grid(geometry, layers, grading_exponent, neck_density)
    ncol = len(xs)
    nodes = list(map(tuple, nodes_arr))

    def neck_id(k, j):
        return k * (layers + 1) + j

    def add_points(pts):
        start = len(nodes)
        nodes.extend(map(tuple, np.asarray(pts).reshape(-1, 2)))
        return list(range(start, len(nodes)))

    step_u = min(cap_step_frac * cap_u.radius, target_outer_h)
    step_l = min(cap_step_frac * cap_l.radius, target_outer_h)

    # chain around the dumbbell, CCW; each entry is (node_id, tag_of_edge_to_next)
    chain: list[int] = []
    seg_tags: list[int] = []

    def extend(ids, tag):
        for i in ids:
            if chain:
                seg_tags.append(tag)
            chain.append(i)

    if axisym:
        # open chain from the lower apex to the upper apex (angles -pi/2 .. pi/2)
        extend(add_points([[0.0, -(cap_l.center_y + cap_l.radius)]]), TAG_D2)
        extend(add_points(_arc_points(cap_l, 0.5 * math.pi, cap_l.phi_junction,
                                      step_l, lower=True)), TAG_D2)
        if cap_l.junction_x > r1:
            extend(add_points([[cap_l.junction_x, -cap_l.junction_y]]), TAG_D2)
            gpl = _graph_points(geometry.lower, eps, cap_l.junction_x, r1,
                                max(1e-12, (cap_l.junction_x - r1) / 8.0), lower=True)
            extend(add_points(gpl[:-1]), TAG_D2)
        extend([neck_id(ncol - 1, 0)], TAG_D2)
        for j in range(1, layers + 1):
            extend([neck_id(ncol - 1, j)], None)
        if cap_u.junction_x > r1:
            gpu = _graph_points(geometry.upper, eps, r1, cap_u.junction_x,
                                max(1e-12, (cap_u.junction_x - r1) / 8.0), lower=False)
            extend(add_points(gpu), TAG_D1)
        extend(add_points(_arc_points(cap_u, cap_u.phi_junction, 0.5 * math.pi,
                                      step_u, lower=False)), TAG_D1)
        extend(add_points([[0.0, cap_u.center_y + cap_u.radius]]), TAG_D1)
    else:
        # closed chain starting at the right-stitch bottom
        for j in range(0, layers + 1):
            extend([neck_id(ncol - 1, j)], None)
        if cap_u.junction_x > r1:
            gpu = _graph_points(geometry.upper, eps, r1, cap_u.junction_x,
                                max(1e-12, (cap_u.junction_x - r1) / 8.0), lower=False)
            extend(add_points(gpu), TAG_D1)
        extend(add_points(_arc_points(cap_u, cap_u.phi_junction, math.pi - cap_u.phi_junction,
                                      step_u, lower=False)), TAG_D1)
        if cap_u.junction_x > r1:
            extend(add_points([[-cap_u.junction_x, cap_u.junction_y]]), TAG_D1)
            gpu_l = _graph_points(geometry.upper, eps, -cap_u.junction_x, -r1,
                                  max(1e-12, (cap_u.junction_x - r1) / 8.0), lower=False)
            extend(add_points(gpu_l[:-1]), TAG_D1)
        for j in range(layers, -1, -1):
            extend([neck_id(0, j)], TAG_D1 if j == layers else None)
        if cap_l.junction_x > r1:
            gpl = _graph_points(geometry.lower, eps, -r1, -cap_l.junction_x,
                                max(1e-12, (cap_l.junction_x - r1) / 8.0), lower=True)
            extend(add_points(gpl), TAG_D2)
        extend(add_points(_arc_points(cap_l, math.pi - cap_l.phi_junction, cap_l.phi_junction,
                                      step_l, lower=True)), TAG_D2)
        if cap_l.junction_x > r1:
            extend(add_points([[cap_l.junction_x, -cap_l.junction_y]]), TAG_D2)
            gpl_r = _graph_points(geometry.lower, eps, cap_l.junction_x, r1,
                                  max(1e-12, (cap_l.junction_x - r1) / 8.0), lower=True)
            extend(add_points(gpl_r[:-1]), TAG_D2)
        seg_tags.append(TAG_D2)  # closing edge back to the right-stitch bottom

    coords = np.asarray(nodes)
    chain_pts = coords[chain]

    # star-shape check: unwrapped polar angles must increase strictly
    ang = np.unwrap(np.arctan2(chain_pts[:, 1], chain_pts[:, 0]))
    if np.any(np.diff(ang) <= 0.0):
        i = int(np.argmin(np.diff(ang)))
        raise MeshError(f"inner chain not star-shaped near ({chain_pts[i, 0]:.6g}, {chain_pts[i, 1]:.6g})")
    if not axisym:
        closing = ang[0] + 2.0 * math.pi - ang[-1]
        if not 0.0 < closing < math.pi:
            raise MeshError(f"inner chain does not wind once around the origin (gap {closing:.6f})")

    radii = np.hypot(chain_pts[:, 0], chain_pts[:, 1])
    dirs = chain_pts / radii[:, None]
    outer_pts = R * dirs
    dist = R - radii
    seg = np.linalg.norm(np.diff(chain_pts, axis=0), axis=1)
    if axisym:
        h_loc = np.concatenate([[seg[0]], 0.5 * (seg[1:] + seg[:-1]), [seg[-1]]])
    else:
        seg_c = np.concatenate([seg, [np.linalg.norm(chain_pts[0] - chain_pts[-1])]])
        h_loc = 0.5 * (seg_c + np.roll(seg_c, 1))
    h_loc = _smooth_spacing(h_loc, cyclic=not axisym)

    J = _rings_needed(h_loc, dist, growth, target_outer_h)
    frac = _ring_fractions(h_loc, dist, J, growth)
    ring_ids = [list(chain)]
    for j in range(J):
        pts = chain_pts + frac[:, j][:, None] * (outer_pts - chain_pts)
        if j == J - 1:
            pts = outer_pts
        ring_ids.append(add_points(pts))
    coords = np.asarray(nodes)

    M = len(chain)
    blend_tris = []
    pair_count = M if not axisym else M - 1
    for j in range(J):
        a = np.asarray(ring_ids[j], dtype=np.int64)
        b = np.asarray(ring_ids[j + 1], dtype=np.int64)
        i0 = np.arange(pair_count)
        i1 = (i0 + 1) % M
        blend_tris.append(_split_quads(coords, a[i0], a[i1], b[i1], b[i0]))
    blend_tris = np.concatenate(blend_tris, axis=0)

    # boundary edges: inclusion parts of the chain, the outer ring, and
    # the axis rays in axisymmetric mode
    for i in range(pair_count):
        tag = seg_tags[i]
        if tag is not None:
            bedges.append((chain[i], chain[(i + 1) % M]))
            btags.append(tag)
    outer_ring = ring_ids[-1]
    for i in range(pair_count):
        bedges.append((outer_ring[i], outer_ring[(i + 1) % M]))
        btags.append(TAG_OUTER)
    if axisym:
        for j in range(J):
            bedges.append((ring_ids[j][0], ring_ids[j + 1][0]))
            btags.append(TAG_AXIS)
            bedges.append((ring_ids[j][-1], ring_ids[j + 1][-1]))
            btags.append(TAG_AXIS)
        for j in range(layers):
            bedges.append((neck_id(0, j), neck_id(0, j + 1)))
            btags.append(TAG_AXIS)

    all_tris = np.concatenate([neck_tris, blend_tris], axis=0).astype(np.int32)
    neck_flags = np.zeros(len(all_tris), dtype=bool)
    neck_flags[: len(neck_tris)] = True

    coords = np.asarray(nodes, dtype=float)
    if axisym:
        snap = np.abs(coords[:, 0]) < 1e-14 * max(1.0, R)
        coords[snap, 0] = 0.0
        axis_flags = snap
    else:
        axis_flags = np.zeros(len(coords), dtype=bool)

    all_tris = _orient_positive(coords, all_tris)

    projectors = _make_projectors(geometry, cap_u, cap_l)
    mesh = Mesh(nodes=coords, triangles=all_tris,
                boundary_edges=np.asarray(bedges, dtype=np.int32),
                boundary_tags=np.asarray(btags, dtype=np.int8),
                neck_flags=neck_flags, axis_flags=axis_flags,
                mode=geometry.mode, projectors=projectors)
    mesh.assert_valid()
    return mesh


def _make_projectors(geometry: GapGeometry, cap_u, cap_l) -> dict:
    eps = geometry.eps

    def inclusion(cap, profile, sign):
        def project(pts):
            pts = np.array(pts, dtype=float)
            x, z = pts[:, 0], pts[:, 1]
            on_graph = (np.abs(x) < cap.junction_x) & (sign * z < cap.center_y)
            zg = sign * (0.5 * eps + profile.value(x))
            center = np.array([0.0, sign * cap.center_y])
            v = pts - center
            nrm = np.linalg.norm(v, axis=1)
            zc = center + cap.radius * v / np.maximum(nrm, 1e-300)[:, None]
            out = np.where(on_graph[:, None], np.column_stack([x, zg]), zc)
            return out
        return project

    def outer(pts):
        pts = np.asarray(pts, dtype=float)
        nrm = np.linalg.norm(pts, axis=1)
        return geometry.outer_radius * pts / np.maximum(nrm, 1e-300)[:, None]

    def axis(pts):
        pts = np.array(pts, dtype=float)
        pts[:, 0] = 0.0
        return pts

    return {TAG_D1: inclusion(cap_u, geometry.upper, +1.0),
            TAG_D2: inclusion(cap_l, geometry.lower, -1.0),
            TAG_OUTER: outer,
            TAG_AXIS: axis}


# ---------------------------------------------------------------------------
# refinement
# ---------------------------------------------------------------------------


def refine(mesh: Mesh) -> Mesh:
    """Uniform midpoint refinement: 4x triangles, tags inherited, boundary
    midpoints projected back onto the true curves when projectors exist."""
    nodes = list(map(tuple, mesh.nodes))
    midpoint: dict[tuple[int, int], int] = {}

    def mid(a: int, b: int) -> int:
        key = (a, b) if a < b else (b, a)
        idx = midpoint.get(key)
        if idx is None:
            pa, pb = nodes[a], nodes[b]
            nodes.append((0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])))
            idx = len(nodes) - 1
            midpoint[key] = idx
        return idx

    tris = []
    for (a, b, c) in mesh.triangles:
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        tris.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
    tris = np.asarray(tris, dtype=np.int32)
    neck_flags = np.repeat(mesh.neck_flags, 4)

    coords = np.asarray(nodes, dtype=float)
    bedges, btags = [], []
    by_tag: dict[int, list[int]] = {}
    for (a, b), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
        m = mid(int(a), int(b))
        bedges.extend([(int(a), m), (m, int(b))])
        btags.extend([int(tag), int(tag)])
        by_tag.setdefault(int(tag), []).append(m)
    for tag, ids in by_tag.items():
        proj = mesh.projectors.get(tag)
        if proj is not None:
            coords[ids] = proj(coords[ids])

    axis_flags = np.zeros(len(coords), dtype=bool)
    axis_flags[: len(mesh.axis_flags)] = mesh.axis_flags
    if mesh.mode == "axisymmetric":
        axis_flags |= np.abs(coords[:, 0]) < 1e-14 * max(1.0, float(np.max(np.abs(coords))))
        coords[axis_flags, 0] = 0.0

    tris = _orient_positive(coords, tris)
    out = Mesh(nodes=coords, triangles=tris,
               boundary_edges=np.asarray(bedges, dtype=np.int32),
               boundary_tags=np.asarray(btags, dtype=np.int8),
               neck_flags=neck_flags, axis_flags=axis_flags,
               mode=mesh.mode, projectors=mesh.projectors)
    out.assert_valid()
    return out


# ---------------------------------------------------------------------------
# quality report
# ---------------------------------------------------------------------------


@dataclass
class MeshQuality:
    min_angle: float
    max_aspect: float
    layer_histogram: np.ndarray
    node_count: int
    tri_count: int


def check_quality(mesh: Mesh) -> MeshQuality:
    """Angle, aspect, and gap-layer metrics; reports only, never raises."""
    p = mesh.nodes[mesh.triangles]
    e0 = p[:, 1] - p[:, 0]
    e1 = p[:, 2] - p[:, 1]
    e2 = p[:, 0] - p[:, 2]
    l0 = np.linalg.norm(e0, axis=1)
    l1 = np.linalg.norm(e1, axis=1)
    l2 = np.linalg.norm(e2, axis=1)
    areas = np.abs(mesh.tri_areas())

    def angle(u, v):
        c = -np.sum(u * v, axis=1) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
        return np.degrees(np.arccos(np.clip(c, -1.0, 1.0)))

    angles = np.stack([angle(e2, e0), angle(e0, e1), angle(e1, e2)], axis=1)
    lmax = np.maximum(np.maximum(l0, l1), l2)
    aspect = lmax * lmax / (2.0 * np.maximum(areas, 1e-300))

    hist = np.zeros(0, dtype=int)
    if np.any(mesh.neck_flags):
        ntri = mesh.triangles[mesh.neck_flags]
        tx = mesh.nodes[ntri][:, :, 0]
        txmin, txmax = tx.min(axis=1), tx.max(axis=1)
        cols = np.unique(mesh.nodes[np.unique(ntri), 0])
        fibers = 0.5 * (cols[1:] + cols[:-1])
        hist = np.array([int(np.sum((txmin < f) & (f < txmax))) for f in fibers])

    return MeshQuality(min_angle=float(angles.min()), max_aspect=float(aspect.max()),
                       layer_histogram=hist, node_count=mesh.node_count, tri_count=mesh.tri_count)


# ---------------------------------------------------------------------------
# debug meshes
# ---------------------------------------------------------------------------


def annulus_mesh(r0: float = 0.25, outer: float = 1.0, n_r: int = 8, n_theta: int = 48) -> Mesh:
    """Structured annulus, inner circle tagged as inclusion 1: the analytic
    benchmark geometry for the solver."""
    radii = np.geomspace(r0, outer, n_r + 1)
    th = np.linspace(-math.pi, math.pi, n_theta + 1)[:-1]
    rr, tt = np.meshgrid(radii, th, indexing="ij")
    nodes = np.column_stack([(rr * np.cos(tt)).ravel(), (rr * np.sin(tt)).ravel()])

    def nid(i, j):
        return i * n_theta + (j % n_theta)

    i = np.repeat(np.arange(n_r), n_theta)
    j = np.tile(np.arange(n_theta), n_r)
    tris = _split_quads(nodes, nid(i, j), nid(i, j + 1), nid(i + 1, j + 1), nid(i + 1, j))
    tris = _orient_positive(nodes, tris.astype(np.int32))

    bedges, btags = [], []
    for jj in range(n_theta):
        bedges.append((nid(0, jj), nid(0, jj + 1)))
        btags.append(TAG_D1)
        bedges.append((nid(n_r, jj), nid(n_r, jj + 1)))
        btags.append(TAG_OUTER)

    def radial(target):
        def project(pts):
            pts = np.asarray(pts, dtype=float)
            nrm = np.linalg.norm(pts, axis=1)
            return target * pts / np.maximum(nrm, 1e-300)[:, None]
        return project

    mesh = Mesh(nodes=nodes, triangles=tris,
                boundary_edges=np.asarray(bedges, dtype=np.int32),
                boundary_tags=np.asarray(btags, dtype=np.int8),
                neck_flags=np.zeros(len(tris), dtype=bool),
                axis_flags=np.zeros(len(nodes), dtype=bool),
                mode="planar",
                projectors={TAG_D1: radial(r0), TAG_OUTER: radial(outer)})
    mesh.assert_valid()
    return mesh


def disk_mesh(outer: float = 1.0, h: float = 0.1) -> Mesh:
    """Unstructured disk via Delaunay of a hex lattice plus rim points."""
    from scipy.spatial import Delaunay

    pts = [np.zeros((0, 2))]
    dy = h * math.sqrt(3.0) / 2.0
    rows = int(math.ceil(outer / dy))
    for r in range(-rows, rows + 1):
        y = r * dy
        shift = 0.5 * h if r % 2 else 0.0
        n = int(math.ceil(2 * outer / h)) + 2
        xs = (np.arange(-n, n + 1) * h + shift)
        keep = xs * xs + y * y < (outer - 0.7 * h) ** 2
        pts.append(np.column_stack([xs[keep], np.full(int(keep.sum()), y)]))
    n_rim = max(16, int(math.ceil(2 * math.pi * outer / h)))
    th = np.linspace(-math.pi, math.pi, n_rim + 1)[:-1]
    rim = outer * np.column_stack([np.cos(th), np.sin(th)])
    nodes = np.vstack(pts + [rim])
    tri = Delaunay(nodes)
    tris = _orient_positive(nodes, tri.simplices.astype(np.int32))

    rim_ids = np.arange(len(nodes) - n_rim, len(nodes))
    bedges = [(int(rim_ids[k]), int(rim_ids[(k + 1) % n_rim])) for k in range(n_rim)]

    def radial(ptsq):
        ptsq = np.asarray(ptsq, dtype=float)
        nrm = np.linalg.norm(ptsq, axis=1)
        return outer * ptsq / np.maximum(nrm, 1e-300)[:, None]

    mesh = Mesh(nodes=nodes, triangles=tris,
                boundary_edges=np.asarray(bedges, dtype=np.int32),
                boundary_tags=np.full(len(bedges), TAG_OUTER, dtype=np.int8),
                neck_flags=np.zeros(len(tris), dtype=bool),
                axis_flags=np.zeros(len(nodes), dtype=bool),
                mode="planar", projectors={TAG_OUTER: radial})
    mesh.assert_valid()
    return mesh


# ---------------------------------------------------------------------------
# plain-text serialization
# ---------------------------------------------------------------------------


def save_mesh(mesh: Mesh, path) -> None:
    """Documented plain-text format; see README for the section layout."""
    lines = [f"neckfield-mesh 1 {mesh.mode}", f"nodes {mesh.node_count}"]
    for (x, y), ax in zip(mesh.nodes, mesh.axis_flags):
        lines.append(f"{x!r} {y!r}" + (" axis" if ax else ""))
    lines.append(f"triangles {mesh.tri_count}")
    for (a, b, c), nf in zip(mesh.triangles, mesh.neck_flags):
        lines.append(f"{a} {b} {c}" + (" neck" if nf else ""))
    lines.append(f"boundary_edges {len(mesh.boundary_edges)}")
    for (a, b), t in zip(mesh.boundary_edges, mesh.boundary_tags):
        lines.append(f"{a} {b} {TAG_NAMES[int(t)]}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_mesh(path) -> Mesh:
    with open(path, "r", encoding="utf-8") as fh:
        tokens = fh.read().split("\n")
    head = tokens[0].split()
    if head[0] != "neckfield-mesh":
        raise MeshError(f"not a neckfield mesh file: {path}")
    mode = head[2] if len(head) > 2 else "planar"
    i = 1
    n = int(tokens[i].split()[1]); i += 1
    nodes, axis = [], []
    for _ in range(n):
        parts = tokens[i].split(); i += 1
        nodes.append((float(parts[0]), float(parts[1])))
        axis.append(len(parts) > 2 and parts[2] == "axis")
    t = int(tokens[i].split()[1]); i += 1
    tris, neck = [], []
    for _ in range(t):
        parts = tokens[i].split(); i += 1
        tris.append((int(parts[0]), int(parts[1]), int(parts[2])))
        neck.append(len(parts) > 3 and parts[3] == "neck")
    b = int(tokens[i].split()[1]); i += 1
    bedges, btags = [], []
    for _ in range(b):
        parts = tokens[i].split(); i += 1
        bedges.append((int(parts[0]), int(parts[1])))
        btags.append(TAG_CODES[parts[2]])
    mesh = Mesh(nodes=np.asarray(nodes, dtype=float),
                triangles=np.asarray(tris, dtype=np.int32),
                boundary_edges=np.asarray(bedges, dtype=np.int32),
                boundary_tags=np.asarray(btags, dtype=np.int8),
                neck_flags=np.asarray(neck, dtype=bool),
                axis_flags=np.asarray(axis, dtype=bool),
                mode=mode)
    mesh.assert_valid()
    return mesh
