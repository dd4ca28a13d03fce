"""Geodesic polar grids by fast marching with angular back-propagation.

Distances solve the eikonal equation on the triangulated surface with the
classic acute-triangle update; obtuse update angles are split by unfolding
adjacent triangles into the plane. Angular coordinates propagate along the
first-arrival characteristics: one-ring neighbors of the source receive fan
angles (total ring angle rescaled to 2*pi, zero anchored at the lowest-index
neighbor) and every later update interpolates the angles of its two support
vertices at the characteristic crossing point.
"""

from __future__ import annotations

import heapq
import math
import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "EmptyPatchError",
    "GeodesicPolarGrid",
    "LocalParameterization",
    "fast_marching_distances",
    "build_polar_grid",
    "parameterize_surface",
    "geodesic_diameter",
    "suggest_radius",
    "save_parameterization",
    "load_parameterization",
]

TWO_PI = 2.0 * np.pi

_FAR, _NARROW, _ALIVE = 0, 1, 2


class EmptyPatchError(ValueError):
    """No vertex fell inside the geodesic disc; the radius is too small."""

    def __init__(self, vertex, rho_d):
        self.vertex = int(vertex)
        self.rho_d = float(rho_d)
        super().__init__(
            f"geodesic disc of radius {rho_d} around vertex {vertex} is empty; "
            "increase the radius or refine the mesh"
        )


@dataclass(frozen=True)
class GeodesicPolarGrid:
    """Disc members around one center: parallel (ids, rho, theta) arrays."""

    center: int
    vertex_ids: np.ndarray
    rho: np.ndarray
    theta: np.ndarray

    def __len__(self):
        return self.vertex_ids.size


class LocalParameterization:
    """Sparse per-vertex polar coordinates for a whole surface.

    Row ``i`` of the CSR structure holds the disc members of vertex ``i``
    (sorted by vertex id) with their geodesic and angular coordinates, i.e.
    the nonzeros of the (P, Theta) matrix pair.
    """

    def __init__(self, n_vertices, rho_d, n_rho, n_theta, indptr, cols, rho, theta):
        self.n_vertices = int(n_vertices)
        self.rho_d = float(rho_d)
        self.n_rho = int(n_rho)
        self.n_theta = int(n_theta)
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.cols = np.ascontiguousarray(cols, dtype=np.int64)
        self.rho = np.ascontiguousarray(rho, dtype=np.float64)
        self.theta = np.ascontiguousarray(theta, dtype=np.float64)
        for arr in (self.indptr, self.cols, self.rho, self.theta):
            arr.setflags(write=False)

    @property
    def nnz(self):
        return self.cols.size

    def grid(self, v):
        lo, hi = self.indptr[v], self.indptr[v + 1]
        return GeodesicPolarGrid(v, self.cols[lo:hi], self.rho[lo:hi],
                                 self.theta[lo:hi])

    def row_counts(self):
        return np.diff(self.indptr)


# ---------------------------------------------------------------------------
# Update stencils (with obtuse-angle unfolding)
# ---------------------------------------------------------------------------

_UNFOLD_LIMIT = 16


def _face_rotations(faces):
    """Directed edge (a, b) -> opposite vertex c, for consistent winding."""
    opposite = {}
    for a, b, c in faces:
        opposite[(a, b)] = c
        opposite[(b, c)] = a
        opposite[(c, a)] = b
    return opposite


def _place_third(p_l, p_r, d_l, d_r):
    """2D position of the unfolded vertex, on the far side of edge (l, r)."""
    edge = p_r - p_l
    d_lr = np.hypot(edge[0], edge[1])
    along = (d_l * d_l - d_r * d_r + d_lr * d_lr) / (2.0 * d_lr)
    h2 = d_l * d_l - along * along
    h = np.sqrt(h2) if h2 > 0.0 else 0.0
    direction = edge / d_lr
    perp = np.array([-direction[1], direction[0]])
    base = p_l + along * direction
    # origin (the updated vertex) sits at (0, 0); place D on the other side
    side_origin = edge[0] * (-p_l[1]) - edge[1] * (-p_l[0])
    return base - h * perp if side_origin > 0 else base + h * perp


def compute_stencils(mesh):
    """Per-vertex two-support update stencils in unfolded 2D coordinates.

    Returns ``support_map``: for each vertex ``s`` a list of tuples
    ``(center, other, px, py, qx, qy)`` meaning "when ``s`` is finalized,
    vertex ``center`` may be updated from supports ``s`` (at 2D ``(px, py)``)
    and ``other`` (at ``(qx, qy)``), relative to ``center`` at the origin".
    """
    positions = mesh.positions
    opposite = _face_rotations(mesh.faces)
    support_map = [[] for _ in range(mesh.n_vertices)]

    def emit(center, id_a, id_b, p_a, p_b):
        support_map[id_a].append(
            (center, id_b, p_a[0], p_a[1], p_b[0], p_b[1])
        )
        support_map[id_b].append(
            (center, id_a, p_b[0], p_b[1], p_a[0], p_a[1])
        )

    for a, b, c in mesh.faces:
        # each face yields one stencil per corner; corner order (center, l, r)
        for center, left, right in ((a, b, c), (b, c, a), (c, a, b)):
            pc = positions[center]
            vl = positions[left] - pc
            vr = positions[right] - pc
            d_l = np.linalg.norm(vl)
            d_r = np.linalg.norm(vr)
            cos_c = float(vl @ vr) / (d_l * d_r)
            cos_c = min(1.0, max(-1.0, cos_c))
            ang = np.arccos(cos_c)
            p_l = np.array([d_l, 0.0])
            p_r = np.array([d_r * cos_c, d_r * np.sin(ang)])
            if cos_c >= 0.0:
                emit(center, left, right, p_l, p_r)
                continue
            # obtuse at the center: split the wedge by unfolding
            wedges = [(left, right, p_l, p_r, 0)]
            while wedges:
                w_l, w_r, q_l, q_r, depth = wedges.pop()
                third = opposite.get((w_r, w_l))
                if depth >= _UNFOLD_LIMIT or third is None:
                    emit(center, w_l, w_r, q_l, q_r)
                    continue
                d3l = np.linalg.norm(positions[third] - positions[w_l])
                d3r = np.linalg.norm(positions[third] - positions[w_r])
                p_t = _place_third(q_l, q_r, d3l, d3r)
                sigma = q_l[0] * q_r[1] - q_l[1] * q_r[0]
                in_l = (q_l[0] * p_t[1] - q_l[1] * p_t[0]) * sigma > 0.0
                in_r = (p_t[0] * q_r[1] - p_t[1] * q_r[0]) * sigma > 0.0
                if not (in_l and in_r):
                    emit(center, w_l, w_r, q_l, q_r)
                    continue
                for s_l, s_r, s_pl, s_pr in ((w_l, third, q_l, p_t),
                                             (third, w_r, p_t, q_r)):
                    if s_pl @ s_pr >= 0.0:
                        emit(center, s_l, s_r, s_pl, s_pr)
                    else:
                        wedges.append((s_l, s_r, s_pl, s_pr, depth + 1))
    return support_map


# ---------------------------------------------------------------------------
# Source fan (one-ring angles)
# ---------------------------------------------------------------------------

def _ring_fan(mesh, source):
    """One-ring ids in cyclic winding order with rescaled fan angles.

    The cumulative one-ring angle is rescaled to 2*pi and the angle origin
    is anchored at the lowest-index neighbor.
    """
    positions = mesh.positions
    succ = {}
    faces = mesh.faces
    incident = np.nonzero((faces == source).any(axis=1))[0]
    for fi in incident:
        a, b, c = faces[fi]
        if a == source:
            succ[b] = c
        elif b == source:
            succ[c] = a
        else:
            succ[a] = b
    start = min(succ)
    ring = [start]
    nxt = succ[start]
    while nxt != start:
        ring.append(nxt)
        nxt = succ[nxt]
    vecs = positions[ring] - positions[source]
    norms = np.linalg.norm(vecs, axis=1)
    unit = vecs / norms[:, None]
    cosines = np.clip(np.einsum("ij,ij->i", unit, np.roll(unit, -1, axis=0)),
                      -1.0, 1.0)
    steps = np.arccos(cosines)
    total = steps.sum()
    cumulative = np.concatenate([[0.0], np.cumsum(steps[:-1])]) * (TWO_PI / total)
    anchor_pos = ring.index(min(ring))
    angles = np.mod(cumulative - cumulative[anchor_pos], TWO_PI)
    return np.array(ring), norms, angles


# ---------------------------------------------------------------------------
# Fast marching
# ---------------------------------------------------------------------------

def _circ_interp(theta_a, theta_b, lam):
    delta = theta_b - theta_a
    delta -= TWO_PI * math.ceil(delta / TWO_PI - 0.5)
    return (theta_a + lam * delta) % TWO_PI


def _march(mesh, source, rho_max, support_map):
    """Run pruned fast marching; returns (dist, theta, alive_ids)."""
    n = mesh.n_vertices
    dist = np.full(n, np.inf)
    theta = np.zeros(n)
    state = np.zeros(n, dtype=np.int8)

    dist[source] = 0.0
    state[source] = _ALIVE
    alive = [source]

    ring, ring_dist, ring_theta = _ring_fan(mesh, source)
    heap = []
    for rv, rd, rt in zip(ring, ring_dist, ring_theta):
        dist[rv] = rd
        theta[rv] = rt
        state[rv] = _NARROW
        heapq.heappush(heap, (rd, rv))

    while heap:
        d, v = heapq.heappop(heap)
        if state[v] == _ALIVE or d > dist[v]:
            continue
        if d > rho_max:
            break
        state[v] = _ALIVE
        alive.append(v)
        for center, other, px, py, qx, qy in support_map[v]:
            if state[center] == _ALIVE:
                continue
            t_a = d
            cand = t_a + math.hypot(px, py)
            cand_theta = theta[v]
            if state[other] == _ALIVE:
                t_b = dist[other]
                # circular-wavefront update: place the virtual source X with
                # |X - pA| = t_a, |X - pB| = t_b on the far side of AB, then
                # the candidate distance is |X - center| = |X|. Exact for
                # point sources on flat regions; reduces to the planar
                # update when the source is far away.
                ex, ey = qx - px, qy - py
                d_ab2 = ex * ex + ey * ey
                if d_ab2 > 0.0 and (t_a - t_b) * (t_a - t_b) <= d_ab2:
                    d_ab = math.sqrt(d_ab2)
                    along = (t_a * t_a - t_b * t_b + d_ab2) / (2.0 * d_ab)
                    h2 = t_a * t_a - along * along
                    h = math.sqrt(h2) if h2 > 0.0 else 0.0
                    ux, uy = ex / d_ab, ey / d_ab
                    bx, by = px + along * ux, py + along * uy
                    # far side: opposite sign of the center (origin) wrt AB
                    side = ex * (-py) - ey * (-px)
                    if side > 0.0:
                        sx, sy = bx - h * (-uy), by - h * ux
                    else:
                        sx, sy = bx + h * (-uy), by + h * ux
                    two_pt = math.hypot(sx, sy)
                    if two_pt >= max(t_a, t_b) and two_pt < cand:
                        # characteristic must cross the open support segment:
                        # solve X + s*(0 - X) = pA + lam*E
                        det = ex * sy - ey * sx
                        if det != 0.0:
                            lam = (sy * (sx - px) - sx * (sy - py)) / det
                            s_par = (ex * (sy - py) - ey * (sx - px)) / det
                            if 0.0 <= lam <= 1.0 and 0.0 < s_par <= 1.0:
                                cand = two_pt
                                cand_theta = _circ_interp(
                                    theta[v], theta[other], lam
                                )
            if cand < dist[center]:
                dist[center] = cand
                theta[center] = cand_theta
                state[center] = _NARROW
                heapq.heappush(heap, (cand, center))

    return dist, theta, alive


def fast_marching_distances(mesh, source, rho_max, support_map=None):
    """First-arrival geodesic distances from ``source``, pruned at ``rho_max``.

    Returns a dict mapping vertex id to distance for every vertex whose
    distance is at most ``rho_max`` (the source maps to 0). Vertices beyond
    the pruning radius, or disconnected from the source, are absent.
    """
    if rho_max <= 0:
        raise ValueError("rho_max must be positive")
    if support_map is None:
        support_map = compute_stencils(mesh)
    dist, _, alive = _march(mesh, source, rho_max, support_map)
    return {int(v): float(dist[v]) for v in alive if dist[v] <= rho_max}


def build_polar_grid(mesh, center, rho_d, n_rho, n_theta, support_map=None):
    """Geodesic polar grid around ``center``: all vertices within ``rho_d``.

    Members carry (rho, theta) local coordinates and exclude the center
    itself; they are sorted by vertex id. Raises :class:`EmptyPatchError`
    when no vertex lies within the radius.
    """
    _check_grid_args(rho_d, n_rho, n_theta)
    if support_map is None:
        support_map = compute_stencils(mesh)
    dist, theta, alive = _march(mesh, center, rho_d, support_map)
    members = np.array(
        [v for v in alive if v != center and dist[v] <= rho_d], dtype=np.int64
    )
    if members.size == 0:
        raise EmptyPatchError(center, rho_d)
    members.sort()
    return GeodesicPolarGrid(int(center), members, dist[members].copy(),
                             theta[members].copy())


def _check_grid_args(rho_d, n_rho, n_theta):
    if rho_d <= 0:
        raise ValueError("rho_d must be positive")
    if n_rho < 1:
        raise ValueError("n_rho must be at least 1")
    if n_theta < 3:
        raise ValueError("n_theta must be at least 3")


def parameterize_surface(mesh, rho_d, n_rho, n_theta):
    """Polar grids for every vertex, assembled as sparse (P, Theta) rows.

    Deterministic: vertices are processed in index order and each row is
    independent of the others, so any parallel schedule over centers would
    produce the identical result.
    """
    _check_grid_args(rho_d, n_rho, n_theta)
    support_map = compute_stencils(mesh)
    n = mesh.n_vertices
    indptr = np.zeros(n + 1, dtype=np.int64)
    all_cols, all_rho, all_theta = [], [], []
    for v in range(n):
        grid = build_polar_grid(mesh, v, rho_d, n_rho, n_theta, support_map)
        indptr[v + 1] = indptr[v] + len(grid)
        all_cols.append(grid.vertex_ids)
        all_rho.append(grid.rho)
        all_theta.append(grid.theta)
    return LocalParameterization(
        n, rho_d, n_rho, n_theta, indptr,
        np.concatenate(all_cols), np.concatenate(all_rho),
        np.concatenate(all_theta),
    )


def geodesic_diameter(mesh):
    """Double-sweep approximation of the largest geodesic distance."""
    support_map = compute_stencils(mesh)
    dist, _, _ = _march(mesh, 0, np.inf, support_map)
    far = int(np.argmax(np.where(np.isfinite(dist), dist, -np.inf)))
    dist2, _, _ = _march(mesh, far, np.inf, support_map)
    finite = dist2[np.isfinite(dist2)]
    return float(finite.max())


def suggest_radius(mesh, fraction=0.01):
    """Disc radius as a fraction of the geodesic diameter (default 1%)."""
    return fraction * geodesic_diameter(mesh)


# ---------------------------------------------------------------------------
# Cache file ("GPG1")
# ---------------------------------------------------------------------------

_TRIPLE_DTYPE = np.dtype([("id", "<u4"), ("rho", "<f8"), ("theta", "<f8")])


def save_parameterization(param, path):
    """Binary cache: magic GPG1, counts header, then per-vertex triples."""
    with open(path, "wb") as fh:
        fh.write(b"GPG1")
        fh.write(struct.pack("<IdII", param.n_vertices, param.rho_d,
                             param.n_rho, param.n_theta))
        counts = param.row_counts()
        for v in range(param.n_vertices):
            fh.write(struct.pack("<I", int(counts[v])))
            lo, hi = param.indptr[v], param.indptr[v + 1]
            block = np.empty(hi - lo, dtype=_TRIPLE_DTYPE)
            block["id"] = param.cols[lo:hi]
            block["rho"] = param.rho[lo:hi]
            block["theta"] = param.theta[lo:hi]
            fh.write(block.tobytes())


def load_parameterization(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != b"GPG1":
        raise ValueError(f"{path}: not a GPG1 parameterization cache")
    n_vertices, rho_d, n_rho, n_theta = struct.unpack_from("<IdII", raw, 4)
    offset = 4 + struct.calcsize("<IdII")
    indptr = np.zeros(n_vertices + 1, dtype=np.int64)
    cols, rho, theta = [], [], []
    for v in range(n_vertices):
        (count,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        block = np.frombuffer(raw, dtype=_TRIPLE_DTYPE, count=count,
                              offset=offset)
        offset += count * _TRIPLE_DTYPE.itemsize
        indptr[v + 1] = indptr[v] + count
        cols.append(block["id"].astype(np.int64))
        rho.append(block["rho"])
        theta.append(block["theta"])
    return LocalParameterization(
        n_vertices, rho_d, n_rho, n_theta, indptr,
        np.concatenate(cols), np.concatenate(rho), np.concatenate(theta),
    )
