"""Graph-geodesic distances on a mesh and their on-disk cache.

Distances are shortest-path lengths over the Euclidean-weighted edge graph.
They bound the true surface geodesic from above; paths are restricted to
edges, so the gap does not vanish under uniform refinement (a few percent on
an icosphere).
"""

import heapq
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._util import atomic_write

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"SCGEO\0\0\0"
CACHE_VERSION = 1
_HEADER = struct.Struct("<8sIII32s")


class CacheMiss(KeyError):
    """Raised when a distance is requested for a vertex without a cached row."""


def geodesic_from(graph, source):
    """Shortest-path distances from ``source`` to every vertex (Dijkstra).

    Each distance is accumulated edge by edge from the source outward,
    ``dist[v] = dist[u] + w(u, v)``.
    """
    n = graph.n_vertices
    source = int(source)
    if not 0 <= source < n:
        raise IndexError(f"source {source} out of range for {n} vertices")
    dist = [np.inf] * n
    dist[source] = 0.0
    done = [False] * n
    heap = [(0.0, source)]
    adj = graph.adjacency
    while heap:
        d, u = heapq.heappop(heap)
        if done[u]:
            continue
        done[u] = True
        for v, w in adj[u]:
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return np.array(dist)


@dataclass(frozen=True, eq=False)
class GeodesicCache:
    """Geodesic rows for a set of source vertices.

    ``dist[i, v]`` is the distance from ``sources[i]`` to vertex ``v``.
    """

    mesh_hash: bytes
    sources: np.ndarray
    dist: np.ndarray

    def __post_init__(self):
        src = np.asarray(self.sources, dtype=np.int64)
        dist = np.asarray(self.dist, dtype=np.float64)
        if dist.ndim != 2 or dist.shape[0] != len(src):
            raise ValueError("dist must have one row per source")
        src.setflags(write=False)
        dist.setflags(write=False)
        object.__setattr__(self, "sources", src)
        object.__setattr__(self, "dist", dist)
        object.__setattr__(self, "_row_of", {int(s): i for i, s in enumerate(src)})

    @property
    def n_vertices(self):
        return self.dist.shape[1]

    @property
    def g_max(self):
        return float(self.dist.max())

    def has(self, vertex):
        return int(vertex) in self._row_of

    def row(self, vertex):
        try:
            return self.dist[self._row_of[int(vertex)]]
        except KeyError:
            raise CacheMiss(f"no cached geodesic row for vertex {vertex}") from None

    def distance(self, u, v):
        """g(u, v); either endpoint may be the cached source."""
        if int(u) in self._row_of:
            return float(self.dist[self._row_of[int(u)], int(v)])
        if int(v) in self._row_of:
            return float(self.dist[self._row_of[int(v)], int(u)])
        raise CacheMiss(f"neither {u} nor {v} has a cached geodesic row")

    def distances(self, u, v):
        """Vectorised :meth:`distance` over paired vertex arrays."""
        u = np.asarray(u, dtype=np.int64).ravel()
        v = np.asarray(v, dtype=np.int64).ravel()
        lookup = np.full(self.n_vertices, -1, dtype=np.int64)
        lookup[self.sources] = np.arange(len(self.sources))
        ru, rv = lookup[u], lookup[v]
        if np.any((ru < 0) & (rv < 0)):
            k = int(np.flatnonzero((ru < 0) & (rv < 0))[0])
            raise CacheMiss(f"neither {u[k]} nor {v[k]} has a cached geodesic row")
        src = np.where(ru >= 0, ru, rv)
        dst = np.where(ru >= 0, v, u)
        return self.dist[src, dst]

    def rows(self, vertices):
        """Stack the rows of several source vertices into a (k, |V|) array."""
        try:
            idx = [self._row_of[int(v)] for v in vertices]
        except KeyError as exc:
            raise CacheMiss(f"no cached geodesic row for vertex {exc.args[0]}") from None
        return self.dist[idx]


def _default_workers():
    try:
        return max(1, int(os.environ.get("SURFCORR_THREADS", "1")))
    except ValueError:
        return 1


def build_cache(graph, sources, mesh_hash=b"", workers=None):
    """Run :func:`geodesic_from` for each source and collect the rows.

    ``sources`` may be an iterable of vertex indices or ``"all"``.
    Duplicate sources are dropped, first occurrence kept.
    """
    if isinstance(sources, str):
        if sources != "all":
            raise ValueError(f"sources must be 'all' or vertex indices, got {sources!r}")
        sources = range(graph.n_vertices)
    seen = {}
    for s in sources:
        seen.setdefault(int(s), None)
    src = list(seen)
    if not src:
        raise ValueError("build_cache needs at least one source")
    for s in src:
        if not 0 <= s < graph.n_vertices:
            raise IndexError(f"source {s} out of range for {graph.n_vertices} vertices")
    workers = workers or _default_workers()
    if workers > 1 and len(src) > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(lambda s: geodesic_from(graph, s), src))
    else:
        rows = [geodesic_from(graph, s) for s in src]
    return GeodesicCache(mesh_hash=mesh_hash, sources=np.array(src), dist=np.stack(rows))


def scale(g, g_max):
    """Map a geodesic distance linearly onto the cosine-distance range [0, 2].

    Distances beyond ``g_max`` clamp to 2. Works elementwise on arrays.
    """
    if not g_max > 0:
        raise ValueError(f"g_max must be positive, got {g_max}")
    g = np.asarray(g, dtype=np.float64)
    if np.any(g < 0):
        raise ValueError("geodesic distances must be nonnegative")
    out = 2.0 * np.minimum(g, g_max) / g_max
    return float(out) if out.ndim == 0 else out


# --- persistence --------------------------------------------------------------

def save_cache(cache, path):
    """Write ``cache`` as little-endian binary with float32 rows."""
    n_src, n_v = cache.dist.shape
    mesh_hash = cache.mesh_hash.ljust(32, b"\0")[:32]
    with atomic_write(path) as fh:
        fh.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, n_src, n_v, mesh_hash))
        fh.write(cache.sources.astype("<u4").tobytes())
        fh.write(cache.dist.astype("<f4").tobytes())


def load_cache(path):
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError(f"{path}: truncated geodesic cache header")
        magic, version, n_src, n_v, mesh_hash = _HEADER.unpack(head)
        if magic != CACHE_MAGIC:
            raise ValueError(f"{path}: not a geodesic cache file")
        if version != CACHE_VERSION:
            raise ValueError(f"{path}: unsupported cache version {version}")
        raw_src, raw_dist = fh.read(4 * n_src), fh.read(4 * n_src * n_v)
        if len(raw_src) != 4 * n_src or len(raw_dist) != 4 * n_src * n_v:
            raise ValueError(f"{path}: truncated geodesic cache payload")
        src = np.frombuffer(raw_src, dtype="<u4")
        dist = np.frombuffer(raw_dist, dtype="<f4")
    return GeodesicCache(mesh_hash=mesh_hash, sources=src.astype(np.int64),
                         dist=dist.reshape(n_src, n_v).astype(np.float64))


def load_or_build_cache(path, mesh, sources, graph=None):
    """Load ``path`` if it matches ``mesh`` and covers ``sources``; else rebuild it."""
    from .mesh import build_edge_graph

    want = mesh.content_hash()
    if os.path.exists(path):
        try:
            cache = load_cache(path)
        except ValueError as exc:
            logger.warning("ignoring unreadable cache %s: %s", path, exc)
        else:
            covered = sources == "all" and len(cache.sources) == mesh.n_vertices
            if not isinstance(sources, str):
                covered = all(cache.has(s) for s in sources)
            if cache.mesh_hash == want and covered:
                return cache
            logger.info("geodesic cache %s is stale; recomputing", path)
    cache = build_cache(graph or build_edge_graph(mesh), sources, mesh_hash=want)
    save_cache(cache, path)
    return cache
