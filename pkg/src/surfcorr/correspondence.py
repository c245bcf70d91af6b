"""Pixel-to-vertex correspondences.

Covers the two ways correspondences are produced: projecting a fitted mesh
into the image (pseudo-correspondences with vertex z-buffering) and the
annotation-style sampling of pixels over body parts. Also handles cross-view
links between images of the same person and JSONL persistence.
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from ._util import atomic_write, stage_rng

logger = logging.getLogger(__name__)


class CorrespondenceError(ValueError):
    pass


class InsufficientCandidates(CorrespondenceError):
    def __init__(self, available, requested):
        self.available = available
        self.requested = requested
        super().__init__(
            f"only {available} candidate pixels available, {requested} requested")


class CorrSchemaError(CorrespondenceError):
    def __init__(self, message, line=None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class Correspondence(NamedTuple):
    row: int
    col: int
    vertex: int


class CrossViewLink(NamedTuple):
    """A local pixel and a pixel of another image that share one vertex."""

    row: int
    col: int
    image: str
    row2: int
    col2: int


@dataclass(frozen=True)
class CorrespondenceSet:
    image: str
    size: tuple
    pid: int = 0
    cam: int = 0
    clothes: int = 0
    entries: tuple = ()
    cross_view: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "size", (int(self.size[0]), int(self.size[1])))
        object.__setattr__(self, "entries",
                           tuple(Correspondence(*map(int, e)) for e in self.entries))
        object.__setattr__(self, "cross_view", tuple(
            CrossViewLink(int(r), int(c), str(img), int(r2), int(c2))
            for r, c, img, r2, c2 in self.cross_view))

    def __len__(self):
        return len(self.entries)

    @property
    def pixels(self):
        return np.array([(e.row, e.col) for e in self.entries], dtype=np.int64).reshape(-1, 2)

    @property
    def vertices(self):
        return np.array([e.vertex for e in self.entries], dtype=np.int64)

    def vertex_at(self, row, col):
        for e in self.entries:
            if e.row == row and e.col == col:
                return e.vertex
        raise KeyError((row, col))

    def validate(self, n_vertices=None, mask=None):
        """Check bounds (and optionally vertex range / mask membership)."""
        h, w = self.size
        for e in self.entries:
            if not (0 <= e.row < h and 0 <= e.col < w):
                raise CorrespondenceError(f"{self.image}: pixel {(e.row, e.col)} outside {h}x{w}")
            if e.vertex < 0 or (n_vertices is not None and e.vertex >= n_vertices):
                raise CorrespondenceError(f"{self.image}: vertex {e.vertex} out of range")
            if mask is not None and not mask[e.row, e.col]:
                raise CorrespondenceError(f"{self.image}: pixel {(e.row, e.col)} outside mask")
        for link in self.cross_view:
            if not (0 <= link.row < h and 0 <= link.col < w):
                raise CorrespondenceError(f"{self.image}: link pixel outside image")


# --- cameras and projection ---------------------------------------------------

@dataclass(frozen=True, eq=False)
class Camera:
    """Scaled-orthographic or pinhole camera.

    Image coordinates put pixel ``(row, col)`` over ``[col, col+1) x [row, row+1)``;
    x runs along columns, y down the rows. Smaller depth is closer.

    scaled-orthographic: ``x = scale * (R p)_x + tx``, ``y = scale * (R p)_y + ty``,
    depth ``(R p)_z``.
    pinhole: ``q = R p + t``; ``x = focal * q_x / q_z + cx``, depth ``q_z``.
    """

    model: str = "orthographic"
    scale: float = 1.0
    translation: tuple = (0.0, 0.0, 0.0)
    focal: float = 1.0
    principal: tuple = (0.0, 0.0)
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        if self.model not in ("orthographic", "pinhole"):
            raise ValueError(f"unknown camera model {self.model!r}")
        if self.model == "orthographic" and not self.scale > 0:
            raise ValueError("orthographic scale must be positive")
        if self.model == "pinhole" and not self.focal > 0:
            raise ValueError("pinhole focal length must be positive")
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = tuple(float(x) for x in self.translation)
        if len(t) == 2:
            t = t + (0.0,)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "principal", tuple(float(x) for x in self.principal))

    @classmethod
    def orthographic(cls, scale=1.0, tx=0.0, ty=0.0, rotation=None):
        return cls("orthographic", scale=scale, translation=(tx, ty, 0.0),
                   rotation=np.eye(3) if rotation is None else rotation)

    @classmethod
    def pinhole(cls, focal, cx, cy, rotation=None, translation=(0.0, 0.0, 0.0)):
        return cls("pinhole", focal=focal, principal=(cx, cy), translation=translation,
                   rotation=np.eye(3) if rotation is None else rotation)

    def project(self, points):
        """Return continuous image coordinates ``(x, y)`` and depth for (n, 3) points."""
        p = np.asarray(points, dtype=np.float64) @ self.rotation.T
        t = np.asarray(self.translation)
        if self.model == "orthographic":
            x = self.scale * p[:, 0] + t[0]
            y = self.scale * p[:, 1] + t[1]
            return x, y, p[:, 2]
        q = p + t
        with np.errstate(divide="ignore", invalid="ignore"):
            x = self.focal * q[:, 0] / q[:, 2] + self.principal[0]
            y = self.focal * q[:, 1] / q[:, 2] + self.principal[1]
        return x, y, q[:, 2]

    def to_dict(self):
        return {"model": self.model, "scale": self.scale, "translation": list(self.translation),
                "focal": self.focal, "principal": list(self.principal),
                "rotation": self.rotation.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(model=d.get("model", "orthographic"), scale=d.get("scale", 1.0),
                   translation=tuple(d.get("translation", (0.0, 0.0, 0.0))),
                   focal=d.get("focal", 1.0), principal=tuple(d.get("principal", (0.0, 0.0))),
                   rotation=np.array(d.get("rotation", np.eye(3).tolist())))


def rotation_y(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


class Projection(NamedTuple):
    pixels: np.ndarray   # (n, 2) int rows/cols
    depth: np.ndarray    # (n,)
    visible: np.ndarray  # (n,) bool


def project_vertices(mesh, camera, size):
    """Map every vertex to the pixel containing its projection.

    Vertices landing outside the image, or behind a pinhole camera, are
    flagged invisible; their pixel coordinates are still reported.
    """
    h, w = size
    if h <= 0 or w <= 0:
        raise ValueError("image size must be positive")
    x, y, depth = camera.project(mesh.vertices)
    finite = np.isfinite(x) & np.isfinite(y)
    col = np.where(finite, np.floor(np.where(finite, x, 0.0)), -1).astype(np.int64)
    row = np.where(finite, np.floor(np.where(finite, y, 0.0)), -1).astype(np.int64)
    visible = finite & (row >= 0) & (row < h) & (col >= 0) & (col < w)
    if camera.model == "pinhole":
        visible &= depth > 0
    return Projection(np.stack([row, col], axis=1), depth, visible)


def zbuffer(projection, size):
    """Resolve vertices sharing a pixel: the smallest depth wins, ties to the lower index.

    Returns an (H, W) int map holding the winning vertex per pixel, -1 where
    no visible vertex lands.
    """
    h, w = size
    out = np.full((h, w), -1, dtype=np.int64)
    idx = np.flatnonzero(projection.visible)
    if idx.size == 0:
        return out
    lin = projection.pixels[idx, 0] * w + projection.pixels[idx, 1]
    order = np.lexsort((idx, projection.depth[idx], lin))
    lin_sorted = lin[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = lin_sorted[1:] != lin_sorted[:-1]
    winners = idx[order[first]]
    out.ravel()[lin_sorted[first]] = winners
    return out


def rasterize_mask(mesh, camera, size):
    """Silhouette of ``mesh``: pixels whose centre falls inside a projected face."""
    h, w = size
    x, y, depth = camera.project(mesh.vertices)
    mask = np.zeros((h, w), dtype=bool)
    for a, b, c in mesh.faces:
        if camera.model == "pinhole" and min(depth[a], depth[b], depth[c]) <= 0:
            continue
        xs = np.array([x[a], x[b], x[c]])
        ys = np.array([y[a], y[b], y[c]])
        c0 = max(int(np.floor(xs.min() - 0.5)), 0)
        c1 = min(int(np.ceil(xs.max() - 0.5)), w - 1)
        r0 = max(int(np.floor(ys.min() - 0.5)), 0)
        r1 = min(int(np.ceil(ys.max() - 0.5)), h - 1)
        if c0 > c1 or r0 > r1:
            continue
        py, px = np.mgrid[r0:r1 + 1, c0:c1 + 1] + 0.5
        area = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (xs[2] - xs[0]) * (ys[1] - ys[0])
        if area == 0:
            continue
        w0 = (xs[1] - px) * (ys[2] - py) - (xs[2] - px) * (ys[1] - py)
        w1 = (xs[2] - px) * (ys[0] - py) - (xs[0] - px) * (ys[2] - py)
        w2 = (xs[0] - px) * (ys[1] - py) - (xs[1] - px) * (ys[0] - py)
        s = np.sign(area)
        inside = (w0 * s >= 0) & (w1 * s >= 0) & (w2 * s >= 0)
        mask[r0:r1 + 1, c0:c1 + 1] |= inside
    return mask


def generate_pseudo_correspondences(mesh, camera, mask, count=(80, 125), seed=0,
                                    image="img", pid=0, cam=0, clothes=0):
    """Project ``mesh``, z-buffer the vertices and sample correspondences inside ``mask``.

    The number of entries is drawn uniformly from the inclusive ``count``
    range, then that many candidate pixels are chosen uniformly without
    replacement.

    Raises
    ------
    CorrespondenceError
        If the mask is empty or contains none of the projected pixels.
    InsufficientCandidates
        If fewer candidate pixels exist than the upper end of ``count``.
    """
    mask = np.asarray(mask, dtype=bool)
    size = mask.shape
    lo, hi = (count, count) if np.isscalar(count) else count
    if not 1 <= lo <= hi:
        raise ValueError(f"bad count range {count!r}")
    if not mask.any():
        raise CorrespondenceError("mask is empty")
    owner = zbuffer(project_vertices(mesh, camera, size), size)
    owner = np.where(mask, owner, -1)
    cand = np.flatnonzero(owner.ravel() >= 0)
    if cand.size == 0:
        raise CorrespondenceError("no projected vertex falls inside the mask")
    if cand.size < hi:
        raise InsufficientCandidates(int(cand.size), int(hi))
    rng = stage_rng(seed, "pseudo-correspondences")
    n = int(rng.integers(lo, hi + 1))
    chosen = np.sort(rng.choice(cand, size=n, replace=False))
    rows, cols = np.divmod(chosen, size[1])
    entries = [Correspondence(int(r), int(c), int(owner[r, c])) for r, c in zip(rows, cols)]
    return CorrespondenceSet(image=image, size=size, pid=pid, cam=cam, clothes=clothes,
                             entries=tuple(entries))


# --- annotation-style sampling ------------------------------------------------

class KMeansResult(NamedTuple):
    centroids: np.ndarray
    labels: np.ndarray
    history: list  # objective after each assignment step


def _kmeans_pp(points, k, rng):
    n = len(points)
    centers = [points[rng.integers(n)]]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # every point coincides with a chosen centre; take any unused point
            i = int(rng.integers(n))
        else:
            i = int(rng.choice(n, p=d2 / total))
        centers.append(points[i])
        d2 = np.minimum(d2, np.sum((points - points[i]) ** 2, axis=1))
    return np.array(centers, dtype=np.float64)


def kmeans(points, k, seed=0, max_iter=100, tol=1e-6):
    """Lloyd's algorithm from a seeded k-means++ start.

    Stops when no centroid moves more than ``tol`` or after ``max_iter``
    iterations. An emptied cluster keeps its previous centroid.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if not 1 <= k <= len(pts):
        raise ValueError(f"k={k} must lie in [1, {len(pts)}]")
    rng = stage_rng(seed, "kmeans")
    centers = _kmeans_pp(pts, k, rng)
    history = []
    labels = np.zeros(len(pts), dtype=np.int64)
    for _ in range(max_iter):
        d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(len(pts)), labels].sum()))
        new = centers.copy()
        for j in range(k):
            members = pts[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift < tol:
            break
    d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    history.append(float(d2[np.arange(len(pts)), labels].sum()))
    return KMeansResult(centers, labels, history)


def centroids_for_part(area, max_area, k_range):
    """Linear map of a part's area (relative to the largest part) into ``k_range``."""
    k_lo, k_hi = k_range
    return int(math.floor(k_lo + (k_hi - k_lo) * area / max_area + 0.5))


def sample_annotation_pixels(parts, uniform_n=40, centroids_per_part=(5, 10), seed=0):
    """Pick annotation pixels: a uniform sample of the body plus per-part cluster centres.

    ``parts`` is an (H, W) integer label map with 0 as background. The
    uniform pixels are drawn without replacement from the whole foreground.
    Each part then contributes k k-means centroids of its pixel coordinates,
    each snapped to the nearest pixel of that part; k grows linearly with
    part area, the largest part receiving the top of ``centroids_per_part``.

    Returns an (n, 2) array of ``(row, col)``; uniform pixels come first.
    """
    parts = np.asarray(parts)
    if isinstance(centroids_per_part, int):
        centroids_per_part = (centroids_per_part, centroids_per_part)
    fg = np.flatnonzero(parts.ravel() != 0)
    if fg.size == 0:
        raise CorrespondenceError("part map has no foreground")
    if uniform_n < 0 or uniform_n > fg.size:
        raise CorrespondenceError(
            f"cannot draw {uniform_n} pixels from {fg.size} foreground pixels")
    rng = stage_rng(seed, "annotation-uniform")
    picked = np.sort(rng.choice(fg, size=uniform_n, replace=False))
    out = [np.stack(np.divmod(picked, parts.shape[1]), axis=1)]

    labels, areas = np.unique(parts[parts != 0], return_counts=True)
    max_area = areas.max()
    for label, area in zip(labels.tolist(), areas.tolist()):
        k = min(centroids_for_part(area, max_area, centroids_per_part), area)
        if k < 1:
            continue
        coords = np.argwhere(parts == label)
        rng = stage_rng(seed, f"annotation-part-{label}")
        result = kmeans(coords.astype(np.float64), k, seed=rng)
        d2 = ((result.centroids[:, None, :] - coords[None, :, :]) ** 2).sum(axis=2)
        out.append(coords[d2.argmin(axis=1)])
    return np.concatenate(out).astype(np.int64)


# --- cross-view links ---------------------------------------------------------

def link_cross_view(a, b, n=10):
    """Link up to ``n`` pixel pairs of two images that map to the same vertex.

    Shared vertices are taken in ascending index order. For a vertex that
    occurs at several pixels of one image, its first entry is used. Returns
    ``(a', b', n_links)`` with the links appended to both sets.
    """
    if a.pid != b.pid:
        raise CorrespondenceError(f"{a.image} and {b.image} belong to different persons")
    first_a, first_b = {}, {}
    for e in a.entries:
        first_a.setdefault(e.vertex, e)
    for e in b.entries:
        first_b.setdefault(e.vertex, e)
    shared = sorted(first_a.keys() & first_b.keys())[:n]
    if len(shared) < n:
        logger.info("only %d shared vertices between %s and %s (wanted %d)",
                    len(shared), a.image, b.image, n)
    la = [CrossViewLink(first_a[v].row, first_a[v].col, b.image, first_b[v].row, first_b[v].col)
          for v in shared]
    lb = [CrossViewLink(first_b[v].row, first_b[v].col, a.image, first_a[v].row, first_a[v].col)
          for v in shared]
    return (replace(a, cross_view=a.cross_view + tuple(la)),
            replace(b, cross_view=b.cross_view + tuple(lb)), len(shared))


# --- JSONL persistence --------------------------------------------------------

def to_record(cs):
    return {
        "image": cs.image, "h": cs.size[0], "w": cs.size[1],
        "pid": cs.pid, "cam": cs.cam, "clothes": cs.clothes,
        "entries": [list(e) for e in cs.entries],
        "cross_view": [list(link) for link in cs.cross_view],
    }


def _int(rec, key, line):
    if key not in rec:
        raise CorrSchemaError(f"missing field {key!r}", line)
    v = rec[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise CorrSchemaError(f"field {key!r} must be an integer", line)
    return v


def from_record(rec, line=None):
    if not isinstance(rec, dict):
        raise CorrSchemaError("record must be a JSON object", line)
    if not isinstance(rec.get("image"), str):
        raise CorrSchemaError("missing or non-string field 'image'", line)
    h, w = _int(rec, "h", line), _int(rec, "w", line)
    pid, cam, clothes = (_int(rec, k, line) for k in ("pid", "cam", "clothes"))
    entries = rec.get("entries")
    if not isinstance(entries, list):
        raise CorrSchemaError("missing field 'entries'", line)
    for i, e in enumerate(entries):
        if not isinstance(e, list) or len(e) != 3:
            raise CorrSchemaError(f"entry {i} must be [row, col, vertex] (missing 'vertex'?)", line)
        if not all(isinstance(x, int) and not isinstance(x, bool) for x in e):
            raise CorrSchemaError(f"entry {i} must hold integers", line)
    links = rec.get("cross_view", [])
    if not isinstance(links, list):
        raise CorrSchemaError("field 'cross_view' must be a list", line)
    for i, link in enumerate(links):
        if (not isinstance(link, list) or len(link) != 5 or not isinstance(link[2], str)
                or not all(isinstance(link[j], int) for j in (0, 1, 3, 4))):
            raise CorrSchemaError(f"cross_view {i} must be [row, col, image_id, row2, col2]", line)
    cs = CorrespondenceSet(image=rec["image"], size=(h, w), pid=pid, cam=cam, clothes=clothes,
                           entries=entries, cross_view=links)
    try:
        cs.validate()
    except CorrespondenceError as exc:
        raise CorrSchemaError(str(exc), line) from None
    return cs


def dumps(cs):
    return json.dumps(to_record(cs), separators=(",", ":"))


def iter_corrs(path):
    """Stream correspondence sets from a JSONL file, one image per line."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorrSchemaError(f"invalid JSON: {exc.msg}", lineno) from None
            yield from_record(rec, lineno)


def read_corrs(path):
    return list(iter_corrs(path))


def write_corrs(path, sets):
    with atomic_write(path, "w") as fh:
        for cs in sets:
            fh.write(dumps(cs))
            fh.write("\n")
