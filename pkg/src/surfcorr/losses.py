"""Training losses with analytic gradients, a finite-difference checker and a
small gradient-descent optimizer for embedding fields.

Every loss returns a :class:`LossReport` whose ``grads`` dict is keyed by
input name (``"field"``, ``"table"``, ``"logits"``, ...), with arrays shaped
like the corresponding input.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .embedding import EmbeddingField, VertexEmbeddingTable, softmax
from .geodesics import scale

logger = logging.getLogger(__name__)

#: Probabilities are clamped to at least this value inside every log.
PROB_FLOOR = 1e-7
LN2 = math.log(2.0)


@dataclass(frozen=True)
class LossWeights:
    """Weights of the combined objective.

    ``total = sil + lambda1 * (geo + alpha * cst) + lambda2 * id + lambda3 * tri``
    """

    lambda1: float = 0.3
    alpha: float = 5.0
    lambda2: float = 1.0
    lambda3: float = 0.8
    margin: float = 0.3

    def __post_init__(self):
        for name in ("lambda1", "alpha", "lambda2", "lambda3", "margin"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class LossReport:
    value: float
    grads: dict = field(default_factory=dict)
    terms: dict = field(default_factory=dict)


def _log_clamped(p):
    return np.log(np.maximum(p, PROB_FLOOR))


# --- silhouette ---------------------------------------------------------------

def loss_silhouette(pred, gt):
    """Mean binary cross-entropy between predicted foreground probability and mask."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p = np.clip(pred, PROB_FLOOR, 1.0 - PROB_FLOOR)
    n = p.size
    value = float(np.mean(-gt * np.log(p) - (1.0 - gt) * np.log1p(-p)))
    inside = (pred > PROB_FLOOR) & (pred < 1.0 - PROB_FLOOR)
    grad = np.where(inside, (-gt / p + (1.0 - gt) / (1.0 - p)) / n, 0.0)
    return LossReport(value, {"pred": grad}, {"sil": value})


# --- geodesic classification loss -----------------------------------------------

def _annotated(field, corrs):
    if len(corrs.entries) == 0:
        raise ValueError("correspondence set is empty")
    px = corrs.pixels
    return px[:, 0], px[:, 1], corrs.vertices


def loss_geodesic(field, table, temperature, corrs, cache, mode="literal", g_max=None):
    """Geodesic-weighted vertex classification loss over the annotated pixels.

    ``literal``: ``-mean(g(v, v_hat) * log p(v_hat))`` with ``v_hat`` the argmax
    vertex and ``g`` the raw geodesic distance. The argmax is held fixed when
    differentiating.

    ``expected``: ``mean(sum_u p(u) * s(g(v, u)))`` with ``s`` the linear
    scale onto [0, 2]; smooth in the embeddings.

    Gradients are returned for ``"field"`` (full H x W x D array) and
    ``"table"``.
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    rows, cols, verts = _annotated(field, corrs)
    t = table.table
    emb = field.data[rows, cols]
    logits = emb @ t.T / temperature
    p = softmax(logits, axis=1)
    n = len(verts)
    geo = cache.rows(verts)
    if mode == "literal":
        vhat = logits.argmax(axis=1)
        g = geo[np.arange(n), vhat]
        pv = p[np.arange(n), vhat]
        per = -g * _log_clamped(pv)
        dz = p.copy()
        dz[np.arange(n), vhat] -= 1.0
        dz *= (g * (pv > PROB_FLOOR))[:, None]
    elif mode == "expected":
        s = scale(geo, cache.g_max if g_max is None else g_max)
        per = np.sum(p * s, axis=1)
        dz = p * (s - per[:, None])
    else:
        raise ValueError(f"unknown mode {mode!r}")
    value = float(np.mean(per))
    dz /= n * temperature
    d_emb = dz @ t
    d_table = dz.T @ emb
    d_field = np.zeros_like(field.data)
    np.add.at(d_field, (rows, cols), d_emb)
    return LossReport(value, {"field": d_field, "table": d_table}, {"geo": value})


# --- consistency loss ---------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class ConsistencyPairs:
    """Pixel pairs for :func:`loss_consistency`, compiled to index arrays.

    Every pixel taking part in a pair becomes one node ``(field, row, col)``;
    pairs are stored as node indices so repeated evaluations only gather the
    node embeddings once.
    """

    def __init__(self, cross_pairs=(), same_image_pairs=(), cache=None, g_max=None):
        cross = [(0, t[0], 1, t[1]) if len(t) == 2 else tuple(t) for t in cross_pairs]
        same = [tuple(t) for t in same_image_pairs]
        if not cross and not same:
            raise ValueError("loss_consistency needs at least one pair")
        nodes = {}

        def node(f, pix):
            key = (int(f), int(pix[0]), int(pix[1]))
            return nodes.setdefault(key, len(nodes))

        self.cross = np.array([(node(i, p), node(j, q)) for i, p, j, q in cross],
                              dtype=np.int64).reshape(-1, 2)
        self.same = np.array([(node(i, p1), node(i, p2)) for i, p1, p2, _, _ in same],
                             dtype=np.int64).reshape(-1, 2)
        self.target = np.zeros(len(same))
        if same:
            if g_max is None:
                if cache is None:
                    raise ValueError("need a geodesic cache or g_max for same-image pairs")
                g_max = cache.g_max
            g = cache.distances([t[3] for t in same], [t[4] for t in same])
            self.target = scale(g, g_max)
        keys = np.array(list(nodes), dtype=np.int64).reshape(-1, 3)
        self.node_field, self.node_rc = keys[:, 0], keys[:, 1:]
        self.n_fields = int(keys[:, 0].max()) + 1

    def __len__(self):
        return len(self.cross) + len(self.same)

    def gather(self, fields):
        out = np.empty((len(self.node_field), fields[0].dim))
        for k in range(self.n_fields):
            sel = self.node_field == k
            out[sel] = fields[k].data[self.node_rc[sel, 0], self.node_rc[sel, 1]]
        return out


def loss_consistency(fields, cross_pairs, same_image_pairs=(), cache=None, g_max=None):
    """Cross-view agreement plus geodesic-following distances within an image.

    ``cross_pairs`` holds ``(p, q)`` pixel pairs linking ``fields[0]`` to
    ``fields[1]``, or ``(i, p, j, q)`` tuples naming the fields explicitly.
    ``same_image_pairs`` holds ``(i, p1, p2, v1, v2)``: two pixels of field
    ``i`` and their vertices. The target for a same-image pair is
    ``scale(g(v1, v2), g_max)``; ``g_max`` defaults to ``cache.g_max``.
    A prebuilt :class:`ConsistencyPairs` may be passed as ``cross_pairs``
    in place of both lists.

    ``value = mean log(1 + exp(d(p, q))) + mean log(1 + exp(|d(p1, p2) - s|))``;
    a term whose pair list is empty is omitted. Gradients are returned as
    ``"fields"``: one array per input field.
    """
    fields = list(fields)
    pairs = cross_pairs if isinstance(cross_pairs, ConsistencyPairs) else \
        ConsistencyPairs(cross_pairs, same_image_pairs, cache, g_max)
    if pairs.n_fields > len(fields):
        raise ValueError(f"pairs refer to field {pairs.n_fields - 1}, only {len(fields)} given")
    x = pairs.gather(fields)
    norm = np.linalg.norm(x, axis=1)
    if np.any(norm == 0):
        raise ValueError("cosine distance is undefined for a zero embedding")
    xh = x / norm[:, None]
    n = len(xh)
    # weight[a, b]: d value / d cos(a, b), accumulated over pairs
    weight = np.zeros(n * n)
    terms = {}
    value = 0.0
    for name, idx, target in (("cst_cross", pairs.cross, None),
                              ("cst_same", pairs.same, pairs.target)):
        if not len(idx):
            continue
        d = 1.0 - np.einsum("ij,ij->i", xh[idx[:, 0]], xh[idx[:, 1]])
        if target is None:
            term = np.logaddexp(0.0, d)
            dd = _sigmoid(d)
        else:
            r = d - target
            term = np.logaddexp(0.0, np.abs(r))
            dd = _sigmoid(np.abs(r)) * np.sign(r)
        terms[name] = float(np.mean(term))
        value += terms[name]
        weight += np.bincount(idx[:, 0] * n + idx[:, 1], -dd / len(idx), minlength=n * n)
    weight = weight.reshape(n, n)
    d_xh = weight @ xh + weight.T @ xh
    d_x = (d_xh - xh * np.sum(d_xh * xh, axis=1, keepdims=True)) / norm[:, None]
    grads = [np.zeros_like(f.data) for f in fields]
    for k in range(pairs.n_fields):
        sel = pairs.node_field == k
        grads[k][pairs.node_rc[sel, 0], pairs.node_rc[sel, 1]] += d_x[sel]
    terms["cst"] = value
    return LossReport(value, {"fields": grads}, terms)


# --- identity and triplet losses ------------------------------------------------

def loss_id(logits, labels):
    """Mean softmax cross-entropy of integer ``labels`` under ``logits`` (N x C)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError("need one label per row of logits")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    p = softmax(logits, axis=1)
    py = p[np.arange(n), labels]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted[np.arange(n), labels] - np.log(np.exp(shifted).sum(axis=1))
    logp = np.maximum(logp, math.log(PROB_FLOOR))
    value = float(-np.mean(logp))
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    grad *= (py > PROB_FLOOR)[:, None] / n
    return LossReport(value, {"logits": grad}, {"id": value})


def loss_triplet(features, labels, margin=0.3):
    """Batch-hard triplet loss on Euclidean distances.

    For each anchor the farthest same-label sample and the nearest
    other-label sample form the triplet; ``max(0, d_pos - d_neg + margin)``
    is averaged over anchors. Ties pick the lower index.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(x)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(n, dtype=bool)
    neg = ~same
    if not pos.any(axis=1).all():
        raise ValueError("every label in the batch needs at least two samples")
    if not neg.any(axis=1).all():
        raise ValueError("the batch needs at least two distinct labels")
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt(np.sum(diff ** 2, axis=2))
    hp = np.where(pos, dist, -np.inf).argmax(axis=1)
    hn = np.where(neg, dist, np.inf).argmin(axis=1)
    ar = np.arange(n)
    d_ap, d_an = dist[ar, hp], dist[ar, hn]
    viol = d_ap - d_an + margin
    value = float(np.mean(np.maximum(viol, 0.0)))
    grad = np.zeros_like(x)
    for i in np.flatnonzero(viol > 0):
        if d_ap[i] > 0:
            u = (x[i] - x[hp[i]]) / d_ap[i]
            grad[i] += u
            grad[hp[i]] -= u
        if d_an[i] > 0:
            u = (x[i] - x[hn[i]]) / d_an[i]
            grad[i] -= u
            grad[hn[i]] += u
    grad /= n
    return LossReport(value, {"features": grad},
                      {"tri": value, "active": float(np.mean(viol > 0))})


# --- combined objective -------------------------------------------------------

PARTS = ("sil", "geo", "cst", "id", "tri")


def part_weights(w):
    return {"sil": 1.0, "geo": w.lambda1, "cst": w.lambda1 * w.alpha,
            "id": w.lambda2, "tri": w.lambda3}


def _add_grad(acc, key, g, weight):
    if isinstance(g, list):
        cur = acc.setdefault(key, [np.zeros_like(x) for x in g])
        for k, x in enumerate(g):
            cur[k] = cur[k] + weight * x
    else:
        acc[key] = acc.get(key, 0.0) + weight * np.asarray(g)


def loss_total(parts: Mapping, weights=LossWeights()):
    """Weighted sum of the five sub-losses; gradients combine with the same weights.

    ``parts`` maps ``sil``, ``geo``, ``cst``, ``id`` and ``tri`` to a
    :class:`LossReport` or a plain number. Gradients that share a key (such
    as ``"field"`` from two losses) are summed.
    """
    missing = [k for k in PARTS if k not in parts]
    if missing:
        raise ValueError(f"missing loss parts: {', '.join(missing)}")
    coef = part_weights(weights)
    value = 0.0
    grads = {}
    terms = {}
    for name in PARTS:
        part = parts[name]
        v = part.value if isinstance(part, LossReport) else float(part)
        if not math.isfinite(v):
            raise ValueError(f"loss part {name} is not finite")
        terms[name] = v
        if isinstance(part, LossReport):
            for key, g in part.grads.items():
                _add_grad(grads, key, g, coef[name])
    # written out to keep the grouping of the objective
    value = (terms["sil"] + weights.lambda1 * (terms["geo"] + weights.alpha * terms["cst"])
             + weights.lambda2 * terms["id"] + weights.lambda3 * terms["tri"])
    return LossReport(float(value), grads, terms)


# --- gradient checking ----------------------------------------------------------

def check_gradient(fn, inputs, step=1e-5, seed=0, n_coords=100, floor=1e-6, wrt=None):
    """Compare analytic gradients with central finite differences.

    ``fn(**inputs)`` must return a :class:`LossReport` (or a ``(value, grads)``
    pair) whose ``grads`` has an array for each name in ``wrt`` (default:
    every input that is a float array). ``n_coords`` coordinates are sampled
    at random across those inputs, all of them if there are fewer.

    The error at a coordinate is ``|analytic - numeric| / max(|numeric|, floor)``;
    the maximum over sampled coordinates is returned.
    """
    inputs = {k: (np.array(v, dtype=np.float64) if isinstance(v, np.ndarray) else v)
              for k, v in inputs.items()}
    if wrt is None:
        wrt = [k for k, v in inputs.items() if isinstance(v, np.ndarray)]

    def evaluate():
        out = fn(**inputs)
        if isinstance(out, LossReport):
            return out.value, out.grads
        return out

    value, grads = evaluate()
    if not math.isfinite(value):
        raise ValueError("loss is not finite at the base point")
    analytic = {k: np.asarray(grads[k], dtype=np.float64).ravel() for k in wrt}
    sizes = np.array([inputs[k].size for k in wrt])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = np.arange(total) if total <= n_coords else rng.choice(total, n_coords, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in np.sort(picks):
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        key, idx = wrt[which], int(flat - offsets[which])
        arr = inputs[key].reshape(-1)
        orig = arr[idx]
        arr[idx] = orig + step
        f_plus = evaluate()[0]
        arr[idx] = orig - step
        f_minus = evaluate()[0]
        arr[idx] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise ValueError(f"loss is not finite after perturbing {key}[{idx}]")
        numeric = (f_plus - f_minus) / (2.0 * step)
        err = abs(analytic[key][idx] - numeric) / max(abs(numeric), floor)
        worst = max(worst, err)
    return worst


# --- toy optimizer -------------------------------------------------------------

class OptimizationDiverged(RuntimeError):
    def __init__(self, trace):
        self.trace = trace
        super().__init__(f"loss became non-finite after {len(trace) - 1} steps")


@dataclass
class ToyResult:
    fields: list
    table: VertexEmbeddingTable
    trace: list


def scene_pairs(corrsets, seed=0, per_image=None):
    """Cross-view and same-image pairs for :func:`loss_consistency` from a scene.

    Cross-view pairs come from the sets' ``cross_view`` links (each link is
    used once, from the image listed first). Same-image pairs are every
    unordered pair of entries with different vertices; with ``per_image``
    set, that many are drawn at random per image instead.
    """
    index = {cs.image: i for i, cs in enumerate(corrsets)}
    cross = []
    for i, cs in enumerate(corrsets):
        for link in cs.cross_view:
            j = index.get(link.image)
            if j is not None and j > i:
                cross.append((i, (link.row, link.col), j, (link.row2, link.col2)))
    rng = np.random.default_rng(seed)
    same = []
    for i, cs in enumerate(corrsets):
        e = cs.entries
        pairs = [(a, b) for a in range(len(e)) for b in range(a + 1, len(e))
                 if e[a].vertex != e[b].vertex]
        if per_image is not None and len(pairs) > per_image:
            pick = np.sort(rng.choice(len(pairs), per_image, replace=False))
            pairs = [pairs[k] for k in pick]
        for a, b in pairs:
            same.append((i, (e[a].row, e[a].col), (e[b].row, e[b].col), e[a].vertex, e[b].vertex))
    return cross, same


def toy_objective(fields, table, corrsets, cache, cross, same, temperature, weights):
    """``lambda1 * (geo_expected + alpha * cst)`` summed over images, with gradients."""
    value = 0.0
    g_fields = [np.zeros_like(f.data) for f in fields]
    g_table = np.zeros_like(table.table)
    annotated = [k for k, cs in enumerate(corrsets) if len(cs.entries)]
    geo_total = 0.0
    for k in annotated:
        rep = loss_geodesic(fields[k], table, temperature, corrsets[k], cache, mode="expected")
        w = weights.lambda1 / len(annotated)
        geo_total += rep.value / len(annotated)
        g_fields[k] += w * rep.grads["field"]
        g_table += w * rep.grads["table"]
    value += weights.lambda1 * geo_total
    cst = 0.0
    if isinstance(cross, ConsistencyPairs) or cross or same:
        rep = loss_consistency(fields, cross, same, cache)
        cst = rep.value
        for gf, g in zip(g_fields, rep.grads["fields"]):
            gf += weights.lambda1 * weights.alpha * g
        value += weights.lambda1 * weights.alpha * cst
    return LossReport(value, {"fields": g_fields, "table": g_table}, {"geo": geo_total, "cst": cst})


def optimize_embeddings(scene, seed=0, steps=500, lr=300.0, temperature=1.0, dim=64,
                        weights=LossWeights(), field_init=1.0, table_init=1e-3, fit_table=True,
                        init=None, pair_seed=None, max_halvings=30, lr_table=1000.0):
    """Plain gradient descent on free per-pixel embeddings and the vertex table.

    ``scene`` needs ``corrsets``, ``masks`` and ``cache`` attributes. The
    objective is ``lambda1 * (geo + alpha * cst)`` with the expected-mode
    geodesic loss averaged over images. ``init`` may supply
    ``(fields, table)`` to start from instead of the seeded random draw.

    Each step moves against the gradient by at most ``lr``; a step that
    would raise the objective is halved until it does not (the consistency
    term has kinks where fixed steps oscillate), so the trace never
    increases. Returns a :class:`ToyResult` whose trace holds the objective
    at the start and after every step (``steps + 1`` values).
    """
    corrsets = list(scene.corrsets)
    if init is None:
        rng = np.random.default_rng(seed)
        fields = [EmbeddingField(field_init * rng.standard_normal(np.shape(m) + (dim,)), m)
                  for m in scene.masks]
        table = VertexEmbeddingTable(table_init * rng.standard_normal(
            (scene.cache.n_vertices, dim)))
    else:
        fields, table = init
        fields = [EmbeddingField(f.data.copy(), f.mask) for f in fields]
        table = VertexEmbeddingTable(table.table.copy())
    cross, same = scene_pairs(corrsets, seed=seed if pair_seed is None else pair_seed)
    if cross or same:
        cross, same = ConsistencyPairs(cross, same, scene.cache), ()
    table_ratio = lr_table / lr

    def objective(data, tab):
        cur = [EmbeddingField(d, f.mask) for d, f in zip(data, fields)]
        rep = toy_objective(cur, VertexEmbeddingTable(tab), corrsets, scene.cache,
                            cross, same, temperature, weights)
        if not math.isfinite(rep.value):
            raise OptimizationDiverged(trace + [rep.value])
        return rep

    data = [f.data for f in fields]
    tab = table.table
    trace = []
    rep = objective(data, tab)
    trace.append(rep.value)
    step_size = lr
    for _ in range(steps):
        # halve the step until the objective does not increase
        for _ in range(max_halvings + 1):
            new_data = [d - step_size * g for d, g in zip(data, rep.grads["fields"])]
            new_tab = tab - step_size * table_ratio * rep.grads["table"] if fit_table else tab
            new_rep = objective(new_data, new_tab)
            if new_rep.value <= rep.value:
                break
            step_size *= 0.5
        else:
            logger.debug("no descent step found; stopping early")
            trace.append(rep.value)
            continue
        data, tab, rep = new_data, new_tab, new_rep
        trace.append(rep.value)
        step_size = min(lr, 2.0 * step_size)
    return ToyResult([EmbeddingField(d, f.mask) for d, f in zip(data, fields)],
                     VertexEmbeddingTable(tab), trace)
