"""Per-pixel surface embeddings, pixel-to-vertex classification and PCA views."""

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import fileio

logger = logging.getLogger(__name__)

DEFAULT_DIM = 64


@dataclass(frozen=True, eq=False)
class EmbeddingField:
    """An (H, W, D) embedding image with its (H, W) foreground mask."""

    data: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if data.ndim != 3 or data.shape[2] < 1:
            raise ValueError(f"field data must be (H, W, D) with D >= 1, got {data.shape}")
        if mask.shape != data.shape[:2]:
            raise ValueError(f"mask shape {mask.shape} does not match field {data.shape[:2]}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dim(self):
        return self.data.shape[2]

    @classmethod
    def random(cls, mask, dim=DEFAULT_DIM, seed=0, scale=1.0):
        mask = np.asarray(mask, dtype=bool)
        rng = np.random.default_rng(seed)
        return cls(scale * rng.standard_normal(mask.shape + (dim,)), mask)

    def save(self, path):
        fileio.write_field_file(path, self.data, self.mask)

    @classmethod
    def load(cls, path):
        return cls(*fileio.read_field_file(path))


@dataclass(frozen=True, eq=False)
class VertexEmbeddingTable:
    """One D-dimensional embedding per mesh vertex, shape (|V|, D)."""

    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim != 2:
            raise ValueError("vertex table must be 2-D")
        if not np.all(np.isfinite(t)):
            raise ValueError("vertex table has non-finite entries")
        object.__setattr__(self, "table", t)

    @property
    def n_vertices(self):
        return self.table.shape[0]

    @classmethod
    def random(cls, n_vertices, dim=DEFAULT_DIM, seed=0, scale=1.0):
        rng = np.random.default_rng(seed)
        return cls(scale * rng.standard_normal((n_vertices, dim)))


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def classify_pixel(field, pixel, table, temperature=1.0):
    """Probability over vertices for one foreground pixel.

    Logits are inner products of the pixel embedding with each vertex row,
    divided by ``temperature``.
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    r, c = pixel
    if not field.mask[r, c]:
        raise ValueError(f"pixel {(r, c)} is outside the foreground mask")
    return softmax(table.table @ field.data[r, c] / temperature)


def predict_vertices(field, table):
    """Argmax vertex per foreground pixel; background pixels get -1.

    Ties resolve to the lower vertex index.
    """
    out = np.full(field.mask.shape, -1, dtype=np.int64)
    rows, cols = np.nonzero(field.mask)
    if rows.size:
        logits = field.data[rows, cols] @ table.table.T
        out[rows, cols] = logits.argmax(axis=1)
    return out


def cosine_distance(e1, e2):
    """``1 - cos(e1, e2)``, in [0, 2]."""
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    n1, n2 = np.linalg.norm(e1), np.linalg.norm(e2)
    if n1 == 0 or n2 == 0:
        raise ValueError("cosine distance is undefined for a zero vector")
    return float(1.0 - np.dot(e1, e2) / (n1 * n2))


class PCAResult(NamedTuple):
    image: np.ndarray       # (H, W, k), masked pixels scaled to [0, 1] per channel
    coords: np.ndarray      # (H, W, k) unscaled component scores, 0 off-mask
    basis: np.ndarray       # (D, k), orthonormal columns
    mean: np.ndarray        # (D,)
    explained_variance: np.ndarray  # (k,)
    rank: int

    def reconstruct(self):
        """Masked embeddings rebuilt from the retained components."""
        return self.coords @ self.basis.T + self.mean


def pca_project(field, out_dims=3, rank_tol=1e-10):
    """Project foreground embeddings onto their leading principal components.

    Each basis vector is signed so its largest-magnitude coefficient is
    positive. Components whose variance is negligible (relative to the top
    one) are reported via the ``rank`` field and left as zero channels.
    """
    rows, cols = np.nonzero(field.mask)
    if rows.size < out_dims:
        raise ValueError(f"need at least {out_dims} foreground pixels, got {rows.size}")
    x = field.data[rows, cols]
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / len(x)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:out_dims]
    evals = np.clip(evals[order], 0.0, None)
    basis = evecs[:, order]
    if basis.shape[1] < out_dims:
        basis = np.pad(basis, ((0, 0), (0, out_dims - basis.shape[1])))
        evals = np.pad(evals, (0, out_dims - len(evals)))
    top = evals[0] if evals.size and evals[0] > 0 else 1.0
    keep = evals > rank_tol * top
    rank = int(keep.sum())
    if rank < out_dims:
        logger.warning("embedding covariance has rank %d < %d; padding with zero channels",
                       rank, out_dims)
    for j in range(out_dims):
        if not keep[j]:
            basis[:, j] = 0.0
            evals[j] = 0.0
            continue
        if basis[np.argmax(np.abs(basis[:, j])), j] < 0:
            basis[:, j] = -basis[:, j]
    scores = xc @ basis
    coords = np.zeros(field.mask.shape + (out_dims,))
    coords[rows, cols] = scores
    image = np.zeros_like(coords)
    lo, hi = scores.min(axis=0), scores.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    image[rows, cols] = (scores - lo) / span
    return PCAResult(image, coords, basis, mean, evals, rank)


def export_pca_ppm(field, path):
    """Write the 3-component PCA view of ``field`` as a PPM; background is black."""
    result = pca_project(field, 3)
    fileio.write_ppm(path, result.image)
    return result
