"""Triangle meshes: validation, OFF file I/O, adjacency and difference features.

Meshes are immutable after construction; every array is frozen so instances
can be shared freely across worker threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "MeshError",
    "MeshParseError",
    "MeshValidationError",
    "TriangleMesh",
    "SurfacePair",
    "LongitudinalSample",
    "load_mesh",
    "save_mesh",
    "neighborhood_difference_map",
    "icosphere",
]


class MeshError(ValueError):
    """Base class for mesh construction and I/O failures."""


class MeshParseError(MeshError):
    """Raised when an OFF file cannot be parsed."""


class MeshValidationError(MeshError):
    """Raised when mesh connectivity or geometry is unacceptable."""


class TriangleMesh:
    """A closed, consistently wound triangle mesh with precomputed adjacency.

    Parameters
    ----------
    positions : (V, 3) float array
        Vertex coordinates in mm.
    faces : (F, 3) int array
        Vertex index triples. Winding is normalized so that face normals
        point outward (positive enclosed volume).
    validate : bool
        Run full connectivity/geometry validation. Only skip this for
        meshes derived from an already-validated mesh with the same faces.

    Raises
    ------
    MeshValidationError
        If the mesh is not a closed edge-manifold of consistently wound,
        non-degenerate triangles, or has duplicate/unreferenced vertices.
    """

    __slots__ = ("positions", "faces", "_adj_indptr", "_adj_indices")

    def __init__(self, positions, faces, validate=True, _adjacency=None):
        positions = np.ascontiguousarray(positions, dtype=np.float64)
        faces = np.ascontiguousarray(faces, dtype=np.int64)
        if positions.ndim != 2 or positions.shape[1] != 3:
            raise MeshValidationError("positions must have shape (V, 3)")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise MeshValidationError("faces must have shape (F, 3)")
        if not np.isfinite(positions).all():
            raise MeshValidationError("positions contain non-finite values")
        if validate:
            faces = _validate_connectivity(positions, faces)
            _validate_geometry(positions, faces)
        self.positions = positions
        self.faces = faces
        if _adjacency is None:
            self._adj_indptr, self._adj_indices = _one_ring_csr(
                faces, positions.shape[0]
            )
        else:
            self._adj_indptr, self._adj_indices = _adjacency
        for arr in (self.positions, self.faces, self._adj_indptr, self._adj_indices):
            arr.setflags(write=False)

    @property
    def n_vertices(self):
        return self.positions.shape[0]

    @property
    def n_faces(self):
        return self.faces.shape[0]

    @property
    def n_edges(self):
        return 3 * self.faces.shape[0] // 2

    def one_ring(self, v):
        """Sorted vertex ids sharing an edge with vertex ``v``."""
        if not 0 <= v < self.n_vertices:
            raise IndexError(f"vertex id {v} out of range")
        return self._adj_indices[self._adj_indptr[v] : self._adj_indptr[v + 1]]

    @property
    def adjacency(self):
        """One-ring adjacency as (indptr, indices) CSR arrays, rows sorted."""
        return self._adj_indptr, self._adj_indices

    def valences(self):
        return np.diff(self._adj_indptr)

    def with_positions(self, positions):
        """New mesh sharing this mesh's connectivity, adjacency included.

        Geometry is re-checked for degenerate faces; connectivity is not
        re-validated.
        """
        mesh = TriangleMesh(
            positions,
            self.faces,
            validate=False,
            _adjacency=(self._adj_indptr, self._adj_indices),
        )
        _validate_geometry(mesh.positions, mesh.faces)
        return mesh

    def __repr__(self):
        return f"TriangleMesh(|V|={self.n_vertices}, |F|={self.n_faces})"


def _one_ring_csr(faces, n_vertices):
    """Per-vertex sorted neighbor lists in CSR form."""
    edges = np.concatenate(
        [faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=0
    )
    # both directions of every face edge are present for a closed mesh, so the
    # directed edge list already enumerates each (v, neighbor) pair once
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    edges = edges[order]
    counts = np.bincount(edges[:, 0], minlength=n_vertices)
    indptr = np.zeros(n_vertices + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return indptr, np.ascontiguousarray(edges[:, 1])


def _validate_connectivity(positions, faces):
    n_vertices = positions.shape[0]
    if faces.size == 0:
        raise MeshValidationError("mesh has no faces")
    if faces.min() < 0 or faces.max() >= n_vertices:
        raise MeshValidationError("face references out-of-range vertex id")
    if (
        (faces[:, 0] == faces[:, 1])
        | (faces[:, 1] == faces[:, 2])
        | (faces[:, 2] == faces[:, 0])
    ).any():
        raise MeshValidationError("face references a repeated vertex id")

    # duplicate vertex positions are rejected, not repaired
    order = np.lexsort(positions.T)
    srt = positions[order]
    if (srt[1:] == srt[:-1]).all(axis=1).any():
        raise MeshValidationError("duplicate vertex positions")

    referenced = np.zeros(n_vertices, dtype=bool)
    referenced[faces] = True
    if not referenced.all():
        raise MeshValidationError("mesh has unreferenced vertices")

    directed = np.concatenate(
        [faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=0
    )
    keys = directed[:, 0] * n_vertices + directed[:, 1]
    if np.unique(keys).size != keys.size:
        raise MeshValidationError("inconsistent winding: repeated directed edge")
    undirected = np.sort(directed, axis=1)
    ukeys = undirected[:, 0] * n_vertices + undirected[:, 1]
    uniq, counts = np.unique(ukeys, return_counts=True)
    if (counts != 2).any():
        raise MeshValidationError(
            "mesh is not a closed edge-manifold (every edge must border 2 faces)"
        )

    # normalize winding to outward normals (positive enclosed volume)
    p0, p1, p2 = (positions[faces[:, k]] for k in range(3))
    volume = np.einsum("ij,ij->i", p0, np.cross(p1, p2)).sum() / 6.0
    if volume < 0:
        faces = faces[:, [0, 2, 1]].copy()
    return faces


def _validate_geometry(positions, faces):
    p0, p1, p2 = (positions[faces[:, k]] for k in range(3))
    doubled_areas = np.linalg.norm(np.cross(p1 - p0, p2 - p0), axis=1)
    extent = positions.max(axis=0) - positions.min(axis=0)
    scale2 = max(float(extent @ extent), 1.0)
    if (doubled_areas <= 1e-14 * scale2).any():
        raise MeshValidationError("degenerate (zero-area) face")


# ---------------------------------------------------------------------------
# OFF file I/O
# ---------------------------------------------------------------------------

def load_mesh(path):
    """Read and validate a triangle mesh from an OFF file.

    The accepted format: a header line ``OFF``, a count line ``|V| |F| 0``,
    then ``|V|`` coordinate lines and ``|F|`` lines of ``3 i j k``. Lines
    starting with ``#`` are comments and are skipped anywhere in the file.
    """
    with open(path, "r") as fh:
        lines = [
            ln.strip()
            for ln in fh
            if ln.strip() and not ln.lstrip().startswith("#")
        ]
    if not lines:
        raise MeshParseError(f"{path}: empty file")
    if lines[0] != "OFF":
        raise MeshParseError(f"{path}: missing OFF header")
    try:
        counts = lines[1].split()
        n_vertices, n_faces = int(counts[0]), int(counts[1])
    except (IndexError, ValueError) as exc:
        raise MeshParseError(f"{path}: malformed count line") from exc
    expected = 2 + n_vertices + n_faces
    if len(lines) < expected:
        raise MeshParseError(
            f"{path}: expected {expected} content lines, found {len(lines)}"
        )
    try:
        positions = np.array(
            [ln.split() for ln in lines[2 : 2 + n_vertices]], dtype=np.float64
        )
    except ValueError as exc:
        raise MeshParseError(f"{path}: malformed vertex line") from exc
    if n_vertices and positions.shape[1] != 3:
        raise MeshParseError(f"{path}: vertex lines must hold 3 coordinates")
    faces = np.empty((n_faces, 3), dtype=np.int64)
    for i, ln in enumerate(lines[2 + n_vertices : expected]):
        parts = ln.split()
        if len(parts) != 4 or parts[0] != "3":
            raise MeshParseError(f"{path}: face line {i} is not a triangle")
        try:
            faces[i] = [int(parts[1]), int(parts[2]), int(parts[3])]
        except ValueError as exc:
            raise MeshParseError(f"{path}: malformed face line {i}") from exc
    try:
        return TriangleMesh(positions, faces)
    except MeshValidationError as exc:
        raise MeshValidationError(f"{path}: {exc}") from exc


def save_mesh(mesh, path):
    """Write a mesh as OFF. Exported floats carry 9 significant digits."""
    with open(path, "w") as fh:
        fh.write("OFF\n")
        fh.write(f"{mesh.n_vertices} {mesh.n_faces} 0\n")
        for x, y, z in mesh.positions:
            fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")
        for i, j, k in mesh.faces:
            fh.write(f"3 {i} {j} {k}\n")


# ---------------------------------------------------------------------------
# Input features
# ---------------------------------------------------------------------------

def neighborhood_difference_map(mesh):
    """Mean coordinate difference to the one-ring, one 3-vector per vertex.

    For vertex ``v`` this is ``mean over w in N(v) of (pos(v) - pos(w))``,
    which is translation-invariant and rotation-equivariant.
    """
    indptr, indices = mesh.adjacency
    sums = np.zeros_like(mesh.positions)
    np.add.at(sums, np.repeat(np.arange(mesh.n_vertices), np.diff(indptr)),
              mesh.positions[indices])
    counts = np.diff(indptr).astype(np.float64)[:, None]
    return mesh.positions - sums / counts


# ---------------------------------------------------------------------------
# Icosphere construction
# ---------------------------------------------------------------------------

_ICO_R = (1.0 + np.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array(
    [
        [-1.0, _ICO_R, 0.0], [1.0, _ICO_R, 0.0], [-1.0, -_ICO_R, 0.0],
        [1.0, -_ICO_R, 0.0], [0.0, -1.0, _ICO_R], [0.0, 1.0, _ICO_R],
        [0.0, -1.0, -_ICO_R], [0.0, 1.0, -_ICO_R], [_ICO_R, 0.0, -1.0],
        [_ICO_R, 0.0, 1.0], [-_ICO_R, 0.0, -1.0], [-_ICO_R, 0.0, 1.0],
    ]
)
_ICO_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [5, 4, 9], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ],
    dtype=np.int64,
)


def icosphere(level, radius=1.0):
    """Subdivided icosahedron projected on a sphere of the given radius.

    Level ``L`` yields ``10 * 4**L + 2`` vertices and ``20 * 4**L`` faces.
    The 12 original icosahedron vertices keep valence 5; all others have
    valence 6. Construction is deterministic.
    """
    if level < 0:
        raise ValueError("subdivision level must be >= 0")
    verts = _ICO_VERTS / np.linalg.norm(_ICO_VERTS[0])
    faces = _ICO_FACES
    for _ in range(level):
        verts, faces = _subdivide(verts, faces)
    verts = verts / np.linalg.norm(verts, axis=1, keepdims=True)
    return TriangleMesh(verts * radius, faces)


def _subdivide(verts, faces):
    new_verts = [verts]
    midpoint = {}
    next_id = len(verts)

    def mid(a, b):
        nonlocal next_id
        key = (a, b) if a < b else (b, a)
        vid = midpoint.get(key)
        if vid is None:
            vid = next_id
            midpoint[key] = vid
            p = verts[a] + verts[b]
            new_verts.append((p / np.linalg.norm(p))[None, :])
            next_id += 1
        return vid

    out_faces = np.empty((4 * len(faces), 3), dtype=np.int64)
    for i, (a, b, c) in enumerate(faces):
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        out_faces[4 * i : 4 * i + 4] = [
            [a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca],
        ]
    return np.concatenate(new_verts, axis=0), out_faces


# ---------------------------------------------------------------------------
# Paired and longitudinal surfaces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SurfacePair:
    """Inner/outer surface pair in vertex-to-vertex correspondence."""

    inner: TriangleMesh
    outer: TriangleMesh

    def __post_init__(self):
        if self.inner.n_vertices != self.outer.n_vertices or not np.array_equal(
            self.inner.faces, self.outer.faces
        ):
            raise MeshValidationError(
                "inner and outer surfaces must share vertex count and face list"
            )

    @property
    def n_vertices(self):
        return self.inner.n_vertices


@dataclass(frozen=True)
class LongitudinalSample:
    """One subject's surface pairs at months 1/3/6 with availability flags.

    ``flag3``/``flag6`` are 1 exactly when the corresponding pair is present.
    All present meshes must share one connectivity.
    """

    subject_id: str
    month1: SurfacePair
    month3: Optional[SurfacePair] = None
    month6: Optional[SurfacePair] = None

    def __post_init__(self):
        ref = self.month1.inner.faces
        for pair in (self.month3, self.month6):
            if pair is not None and not np.array_equal(pair.inner.faces, ref):
                raise MeshValidationError(
                    f"{self.subject_id}: time points do not share connectivity"
                )

    @property
    def flag3(self):
        return 1 if self.month3 is not None else 0

    @property
    def flag6(self):
        return 1 if self.month6 is not None else 0

    def pair_at(self, month):
        if month == 1:
            return self.month1
        if month == 3:
            return self.month3
        if month == 6:
            return self.month6
        raise ValueError(f"no month {month} in a 1/3/6 longitudinal sample")
