"""Triangle meshes: OBJ reading/writing, validation and the weighted edge graph."""

import hashlib
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from ._util import atomic_write

logger = logging.getLogger(__name__)

#: Faces with an area below this (in squared mesh units) are degenerate.
DEGENERATE_AREA = 1e-12


class MeshError(ValueError):
    """Base class for mesh loading and validation failures."""


class ObjParseError(MeshError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class MeshValidationError(MeshError):
    pass


def _connected_components(n_vertices, edges):
    parent = np.arange(n_vertices)

    def find(i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    return len({find(i) for i in range(n_vertices)})


def _unique_edges(faces):
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """An immutable, validated triangle mesh.

    Parameters
    ----------
    vertices : array_like, shape (n, 3)
        Vertex positions in arbitrary but consistent length units.
    faces : array_like, shape (m, 3)
        Zero-based vertex indices of each triangle.

    Raises
    ------
    MeshValidationError
        If an index is out of range, a face repeats a vertex or has
        (near) zero area, or the edge graph is not connected.
    """

    vertices: np.ndarray
    faces: np.ndarray
    name: str = field(default="mesh", compare=False)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        f = np.array(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshValidationError(f"vertices must have shape (n, 3), got {v.shape}")
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshValidationError(f"faces must have shape (m, 3), got {f.shape}")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        self._validate()

    def _validate(self):
        v, f = self.vertices, self.faces
        n = len(v)
        if n == 0:
            raise MeshValidationError("mesh has no vertices")
        if not np.all(np.isfinite(v)):
            raise MeshValidationError("vertex coordinates must be finite")
        if len(f) == 0:
            if n == 1:
                return
            raise MeshValidationError("mesh has no faces")
        bad = np.flatnonzero((f < 0).any(axis=1) | (f >= n).any(axis=1))
        if bad.size:
            raise MeshValidationError(
                f"face {bad[0]} has a vertex index outside [0, {n})")
        rep = np.flatnonzero((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2]))
        if rep.size:
            raise MeshValidationError(f"face {rep[0]} repeats a vertex index")
        areas = self.face_areas()
        small = np.flatnonzero(areas < DEGENERATE_AREA)
        if small.size:
            raise MeshValidationError(
                f"face {small[0]} is degenerate (area {areas[small[0]]:.3g})")
        n_comp = _connected_components(n, _unique_edges(f))
        if n_comp != 1:
            raise MeshValidationError(f"edge graph has {n_comp} connected components")

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def face_areas(self):
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def edges(self):
        """Unique undirected edges as an (E, 2) array with ``u < v``."""
        return _unique_edges(self.faces)

    def content_hash(self):
        """SHA-256 of the geometry; used to key cached geodesics."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.faces, dtype="<i8").tobytes())
        return h.digest()


@dataclass(frozen=True, eq=False)
class EdgeGraph:
    """Undirected, Euclidean-weighted vertex graph of a mesh.

    ``adjacency[u]`` lists ``(v, length)`` pairs; every edge appears in both
    directions with the same weight.
    """

    adjacency: tuple
    edges: np.ndarray
    weights: np.ndarray

    @property
    def n_vertices(self):
        return len(self.adjacency)

    @property
    def n_edges(self):
        return len(self.edges)


def build_edge_graph(mesh):
    """Build the symmetric edge graph of ``mesh`` with Euclidean edge lengths."""
    edges = mesh.edges()
    d = mesh.vertices[edges[:, 0]] - mesh.vertices[edges[:, 1]]
    # fixed x, y, z summation order so lengths are reproducible bit for bit
    w = np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2])
    adj = [[] for _ in range(mesh.n_vertices)]
    for (u, v), length in zip(edges.tolist(), w.tolist()):
        adj[u].append((v, length))
        adj[v].append((u, length))
    edges.setflags(write=False)
    w.setflags(write=False)
    return EdgeGraph(adjacency=tuple(tuple(a) for a in adj), edges=edges, weights=w)


def parse_obj(lines, path=None):
    """Parse ``v``/``f`` records from an iterable of OBJ lines.

    Texture and normal references in face records (``f 1/2/3 ...``) are
    ignored, as are all other record types. Polygons with more than three
    corners are fan-triangulated. Negative (relative) indices are supported.

    Returns
    -------
    vertices, faces : ndarray
    """
    vertices = []
    faces = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *rest = line.split()
        if tag == "v":
            if len(rest) < 3:
                raise ObjParseError("vertex record needs 3 coordinates", lineno, path)
            try:
                vertices.append([float(x) for x in rest[:3]])
            except ValueError:
                raise ObjParseError(f"bad vertex coordinate in {line!r}", lineno, path) from None
        elif tag == "f":
            if len(rest) < 3:
                raise ObjParseError("face record needs at least 3 vertices", lineno, path)
            idx = []
            for tok in rest:
                head = tok.split("/", 1)[0]
                try:
                    i = int(head)
                except ValueError:
                    raise ObjParseError(f"bad face index {tok!r}", lineno, path) from None
                if i == 0:
                    raise ObjParseError("face index 0 is invalid (OBJ indices are 1-based)",
                                        lineno, path)
                i = i - 1 if i > 0 else len(vertices) + i
                if i < 0 or i >= len(vertices):
                    raise ObjParseError(f"face index {head} refers to an undefined vertex",
                                        lineno, path)
                idx.append(i)
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
    return (np.asarray(vertices, dtype=np.float64).reshape(-1, 3),
            np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def load_mesh(path):
    """Read and validate an OBJ file (``v`` and ``f`` records only)."""
    with open(path, encoding="utf-8") as fh:
        vertices, faces = parse_obj(fh, path=os.fspath(path))
    mesh = TriangleMesh(vertices, faces, name=os.path.basename(os.fspath(path)))
    logger.debug("loaded %s: %d vertices, %d faces", path, mesh.n_vertices, mesh.n_faces)
    return mesh


def format_obj(mesh):
    out = [f"v {x!r} {y!r} {z!r}\n" for x, y, z in mesh.vertices.tolist()]
    out += [f"f {a + 1} {b + 1} {c + 1}\n" for a, b, c in mesh.faces.tolist()]
    return "".join(out)


def write_mesh(mesh, path):
    """Write ``mesh`` as OBJ. Coordinates are written with full precision."""
    with atomic_write(path, "w") as fh:
        fh.write(format_obj(mesh))


# --- synthetic meshes ---------------------------------------------------------

def _tetrahedron():
    v = np.array([
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.5, np.sqrt(3.0) / 2.0, 0.0],
        [0.5, np.sqrt(3.0) / 6.0, np.sqrt(2.0 / 3.0)],
    ])
    f = np.array([[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]])
    return TriangleMesh(v, f, name="tetrahedron")


def _icosahedron():
    t = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    return v, f


def _subdivide(v, f):
    verts = list(map(tuple, v))
    midpoint = {}

    def mid(a, b):
        key = (a, b) if a < b else (b, a)
        if key not in midpoint:
            p = (np.asarray(verts[a]) + np.asarray(verts[b])) / 2.0
            p /= np.linalg.norm(p)
            midpoint[key] = len(verts)
            verts.append(tuple(p))
        return midpoint[key]

    out = []
    for a, b, c in f.tolist():
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        out += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
    return np.array(verts), np.array(out)


def icosphere(level=0, radius=1.0):
    if level < 0:
        raise ValueError("icosphere level must be >= 0")
    v, f = _icosahedron()
    for _ in range(level):
        v, f = _subdivide(v, f)
    return TriangleMesh(v * radius, f, name=f"icosphere{level}")


def grid(n=2, size=1.0):
    """Flat ``n`` x ``n`` vertex grid in the z=0 plane, two triangles per cell."""
    if n < 2:
        raise ValueError("grid needs n >= 2")
    xs = np.linspace(0.0, size, n)
    yy, xx = np.meshgrid(xs, xs, indexing="ij")
    v = np.stack([xx.ravel(), yy.ravel(), np.zeros(n * n)], axis=1)
    f = []
    for r in range(n - 1):
        for c in range(n - 1):
            i = r * n + c
            f.append([i, i + 1, i + n + 1])
            f.append([i, i + n + 1, i + n])
    return TriangleMesh(v, np.array(f), name=f"grid{n}")


def make_test_mesh(kind, level=0, n=2):
    """Deterministic synthetic mesh: ``"tetrahedron"``, ``"icosphere"`` or ``"grid"``.

    ``kind`` may also carry the parameter inline, e.g. ``"icosphere(2)"`` or
    ``"grid(3)"``.
    """
    kind = kind.strip().lower()
    if "(" in kind and kind.endswith(")"):
        kind, arg = kind[:-1].split("(", 1)
        level = n = int(arg)
    if kind == "tetrahedron":
        return _tetrahedron()
    if kind == "icosphere":
        return icosphere(level)
    if kind == "grid":
        return grid(n)
    raise ValueError(f"unknown test mesh kind {kind!r}")
