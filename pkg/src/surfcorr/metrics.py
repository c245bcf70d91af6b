"""Correspondence quality (geodesic point similarity) and re-identification metrics."""

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_SIGMA = 0.255
DEFAULT_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class GpsConfig:
    sigma: float = DEFAULT_SIGMA
    thresholds: tuple = DEFAULT_THRESHOLDS

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        t = tuple(float(x) for x in self.thresholds)
        if not t or any(not 0 < x <= 1 for x in t) or any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("thresholds must be strictly increasing within (0, 1]")
        object.__setattr__(self, "thresholds", t)


def gps(gt, pred, cache, sigma=DEFAULT_SIGMA):
    """Mean of ``exp(-g(v, v_hat)^2 / (2 sigma^2))`` over the annotated pixels of one image.

    ``pred`` is an (H, W) vertex map; negative values mean no prediction.
    """
    if len(gt.entries) == 0:
        raise ValueError(f"{gt.image}: no annotated pixels")
    pred = np.asarray(pred)
    px = gt.pixels
    v_hat = pred[px[:, 0], px[:, 1]]
    if np.any(v_hat < 0):
        k = int(np.flatnonzero(v_hat < 0)[0])
        raise ValueError(f"{gt.image}: no prediction at annotated pixel {tuple(px[k])}")
    g = cache.rows(gt.vertices)[np.arange(len(v_hat)), v_hat]
    return float(np.mean(np.exp(-g ** 2 / (2.0 * sigma ** 2))))


class ApArTable(NamedTuple):
    thresholds: tuple
    ap: np.ndarray
    ar: np.ndarray
    scores: list       # per-image GPS, None where the image had no prediction

    @property
    def mean_ap(self):
        return float(np.mean(self.ap))

    @property
    def mean_ar(self):
        return float(np.mean(self.ar))

    def to_csv(self):
        """Percentages, one row per threshold plus a ``mean`` row."""
        lines = ["threshold,AP,AR"]
        for t, ap, ar in zip(self.thresholds, self.ap, self.ar):
            lines.append(f"{t:.2f},{100 * ap:.1f},{100 * ar:.1f}")
        lines.append(f"mean,{100 * self.mean_ap:.1f},{100 * self.mean_ar:.1f}")
        return "\n".join(lines) + "\n"


def gps_ap_ar(dataset, cache, config=GpsConfig()):
    """Per-image AP/AR over GPS thresholds.

    ``dataset`` is a sequence of ``(gt, pred)``; ``pred`` may be None for an
    image without predictions. An image is correct at threshold t when its
    GPS is at least t. AP divides the correct count by the images that have
    predictions, AR by all annotated images.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty dataset")
    scores = [None if pred is None else gps(gt, pred, cache, config.sigma) for gt, pred in dataset]
    have = np.array([s for s in scores if s is not None])
    th = np.array(config.thresholds)
    correct = (have[None, :] >= th[:, None]).sum(axis=1) if have.size else np.zeros(len(th))
    ap = correct / have.size if have.size else np.zeros(len(th))
    ar = correct / len(dataset)
    return ApArTable(config.thresholds, ap.astype(np.float64), ar.astype(np.float64), scores)


# --- re-identification -----------------------------------------------------------

PROTOCOLS = ("standard", "cloth-changing", "same-clothes")


@dataclass(frozen=True, eq=False)
class RetrievalInstance:
    query: np.ndarray
    gallery: np.ndarray
    q_ids: np.ndarray
    g_ids: np.ndarray
    q_cams: np.ndarray
    g_cams: np.ndarray
    q_clothes: np.ndarray
    g_clothes: np.ndarray
    protocol: str = "standard"

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        q = np.asarray(self.query, dtype=np.float64)
        g = np.asarray(self.gallery, dtype=np.float64)
        if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
            raise ValueError("query and gallery features must be 2-D with equal widths")
        object.__setattr__(self, "query", q)
        object.__setattr__(self, "gallery", g)
        for name, n in (("q_ids", len(q)), ("q_cams", len(q)), ("q_clothes", len(q)),
                        ("g_ids", len(g)), ("g_cams", len(g)), ("g_clothes", len(g))):
            arr = np.asarray(getattr(self, name))
            if arr.shape != (n,):
                raise ValueError(f"{name} must have length {n}")
            object.__setattr__(self, name, arr)


@dataclass
class ReidResult:
    mAP: float
    cmc: np.ndarray
    n_valid: int
    skipped: list = field(default_factory=list)

    def rank(self, k):
        return float(self.cmc[min(k, len(self.cmc)) - 1])


def _euclidean(q, g):
    d2 = np.sum(q ** 2, axis=1)[:, None] + np.sum(g ** 2, axis=1)[None, :] - 2.0 * q @ g.T
    return np.sqrt(np.maximum(d2, 0.0))


def protocol_masks(inst, i):
    """``(positive, negative)`` gallery masks for query ``i`` under the instance's protocol."""
    same_id = inst.g_ids == inst.q_ids[i]
    same_cam = inst.g_cams == inst.q_cams[i]
    same_clothes = inst.g_clothes == inst.q_clothes[i]
    junk = same_id & same_cam
    if inst.protocol == "cloth-changing":
        junk |= same_id & same_clothes
    elif inst.protocol == "same-clothes":
        junk |= same_id & ~same_clothes
    return same_id & ~junk, ~same_id


def reid_eval(inst, max_rank=None):
    """mAP and CMC of Euclidean retrieval under one of the three protocols.

    standard
        gallery entries with the query's id and camera are ignored.
    cloth-changing
        additionally ignores entries with the query's id and clothes.
    same-clothes
        only same-id, same-clothes entries count as matches; same-id entries
        in other clothes are ignored.

    Ranking is by distance, ties broken by gallery index. Queries without a
    valid match are skipped and listed in ``skipped``.
    """
    dist = _euclidean(inst.query, inst.gallery)
    n_g = len(inst.gallery)
    max_rank = n_g if max_rank is None else max_rank
    aps, hits, skipped = [], np.zeros(max_rank), []
    for i in range(len(inst.query)):
        pos, neg = protocol_masks(inst, i)
        keep = pos | neg
        if not pos.any():
            skipped.append(i)
            continue
        order = np.lexsort((np.arange(n_g), dist[i]))
        matches = pos[order][keep[order]]
        ranks = np.flatnonzero(matches)
        precision = np.arange(1, len(ranks) + 1) / (ranks + 1)
        aps.append(float(precision.mean()))
        if ranks[0] < max_rank:
            hits[ranks[0]:] += 1
    if skipped:
        logger.info("%d queries without a valid match were skipped", len(skipped))
    if not aps:
        raise ValueError("no query has a valid match under this protocol")
    return ReidResult(float(np.mean(aps)), hits / len(aps), len(aps), skipped)
