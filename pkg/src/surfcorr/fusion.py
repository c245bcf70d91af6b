"""Cross-modality fusion of appearance and shape token maps.

Token maps are ``(h, w, c)`` arrays. Queries, keys and values come from a
latent convolutional projection: a frozen linear encoder summarises the
whole map into one c-vector that is added to every token before a 'same'
padded convolution. Each modality then attends to the other and the result
is added back residually. A class token per modality rides along as an
extra query row.

Forward functions have ``*_vjp`` companions returning gradients of a scalar
objective given the gradient with respect to the outputs.
"""

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import fileio
from .embedding import softmax


@dataclass(frozen=True, eq=False)
class TokenMap:
    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3 or min(d.shape) < 1:
            raise ValueError(f"token map must be (h, w, c) with positive sizes, got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("token map has non-finite entries")
        object.__setattr__(self, "data", d)

    @property
    def shape(self):
        return self.data.shape


def _as_array(F):
    return F.data if isinstance(F, TokenMap) else np.asarray(F, dtype=np.float64)


# --- latent encoder -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LatentEncoder:
    """Linear map from a flattened ``(h, w, c_in)`` map to a latent c-vector."""

    weight: np.ndarray          # (c, h*w*c_in)
    bias: np.ndarray            # (c,)
    frozen: bool = True
    training_mse: tuple = field(default=(), compare=False)

    @property
    def latent_dim(self):
        return self.weight.shape[0]

    def encode(self, F):
        F = _as_array(F)
        if F.size != self.weight.shape[1]:
            raise ValueError(f"encoder expects {self.weight.shape[1]} inputs, map has {F.size}")
        return self.weight @ F.ravel() + self.bias


def train_autoencoder(maps, latent_dim, steps=2000, lr=0.25, seed=0, init_scale=0.1):
    """Fit a linear autoencoder to token maps by gradient descent on the MSE.

    Only the encoder is returned, frozen; the decoder is discarded. The
    per-step reconstruction MSE is kept in ``training_mse`` (``steps + 1``
    values, the last after the final update). The step is ``lr`` divided by
    the mean squared entry of the data, so it does not depend on data scale.
    """
    X = np.stack([_as_array(m).ravel() for m in maps])
    if X.size == 0:
        raise ValueError("need at least one token map")
    m, n = X.shape
    rng = np.random.default_rng(seed)
    We = init_scale * rng.standard_normal((latent_dim, n)) / np.sqrt(n)
    be = np.zeros(latent_dim)
    Wd = init_scale * rng.standard_normal((n, latent_dim)) / np.sqrt(latent_dim)
    bd = np.zeros(n)
    step_size = lr / max(float(np.mean(X ** 2)), 1e-12)
    history = []
    for step in range(steps + 1):
        Z = X @ We.T + be
        E = Z @ Wd.T + bd - X
        mse = float(np.mean(E ** 2))
        history.append(mse)
        if not np.isfinite(mse):
            raise FloatingPointError(f"autoencoder training diverged at step {step}")
        if step == steps:
            break
        dR = 2.0 * E / E.size
        dWd, dbd = dR.T @ Z, dR.sum(axis=0)
        dZ = dR @ Wd
        dWe, dbe = dZ.T @ X, dZ.sum(axis=0)
        We, be = We - step_size * dWe, be - step_size * dbe
        Wd, bd = Wd - step_size * dWd, bd - step_size * dbd
    return LatentEncoder(We, be, frozen=True, training_mse=tuple(history))


# --- convolution and LCP ------------------------------------------------------

def conv2d_same(X, kernel):
    """Stride-1 cross-correlation with zero padding that keeps h and w.

    ``X`` is (h, w, c_in), ``kernel`` is (k, k, c_in, c_out) with k odd.
    """
    k = kernel.shape[0]
    if kernel.ndim != 4 or kernel.shape[1] != k or k % 2 == 0:
        raise ValueError("kernel must be (k, k, c_in, c_out) with odd k")
    if kernel.shape[2] != X.shape[2]:
        raise ValueError(f"kernel expects {kernel.shape[2]} channels, map has {X.shape[2]}")
    h, w, _ = X.shape
    pad = k // 2
    Xp = np.pad(X, ((pad, pad), (pad, pad), (0, 0)))
    Y = np.zeros((h, w, kernel.shape[3]))
    for a in range(k):
        for b in range(k):
            Y += Xp[a:a + h, b:b + w] @ kernel[a, b]
    return Y


def conv2d_same_vjp(X, kernel, dY):
    k = kernel.shape[0]
    h, w, c = X.shape
    pad = k // 2
    Xp = np.pad(X, ((pad, pad), (pad, pad), (0, 0)))
    dXp = np.zeros_like(Xp)
    dK = np.zeros_like(kernel)
    flat_dY = dY.reshape(-1, dY.shape[2])
    for a in range(k):
        for b in range(k):
            dXp[a:a + h, b:b + w] += dY @ kernel[a, b].T
            dK[a, b] = Xp[a:a + h, b:b + w].reshape(-1, c).T @ flat_dY
    return dXp[pad:pad + h, pad:pad + w], dK


def lcp_project(F, encoder, kernel, role="Q"):
    """``Flatten(Conv2d(F + l))`` with ``l = encoder(F)`` added to every token.

    Returns an (h*w, c_out) token sequence in row-major order. ``role`` only
    labels the projection (Q, K or V).
    """
    if role not in ("Q", "K", "V"):
        raise ValueError(f"role must be Q, K or V, got {role!r}")
    if not encoder.frozen:
        raise ValueError("LCP needs a frozen latent encoder")
    F = _as_array(F)
    X = F + encoder.encode(F)
    Y = conv2d_same(X, kernel)
    return Y.reshape(-1, Y.shape[2])


def lcp_project_vjp(F, encoder, kernel, d_out):
    """Gradients of ``sum(d_out * lcp_project(F))`` w.r.t. ``F`` and ``kernel``.

    The encoder is frozen but still depends on ``F``, so the latent path
    contributes to ``dF``.
    """
    F = _as_array(F)
    X = F + encoder.encode(F)
    dY = np.asarray(d_out).reshape(F.shape[0], F.shape[1], kernel.shape[3])
    dX, dK = conv2d_same_vjp(X, kernel, dY)
    d_latent = dX.sum(axis=(0, 1))
    dF = dX + (encoder.weight.T @ d_latent).reshape(F.shape)
    return dF, dK


# --- attention ----------------------------------------------------------------

class AttentionOutput(NamedTuple):
    out: np.ndarray       # (n_q, c_out)
    weights: np.ndarray   # (heads, n_q, n_k)
    heads_out: np.ndarray  # (n_q, c) concatenated head outputs before projection


def mha(Q, K, V, heads, w_out=None, return_weights=False):
    """Multi-head scaled dot-product attention.

    Channels are split into ``heads`` equal groups; each computes
    ``softmax(Q_h K_h^T / sqrt(d_head)) V_h``. Head outputs are concatenated
    and multiplied by ``w_out`` (identity when None).
    """
    Q, K, V = (np.asarray(x, dtype=np.float64) for x in (Q, K, V))
    c = Q.shape[1]
    if K.shape[1] != c or V.shape[1] != c:
        raise ValueError("Q, K and V must share the channel count")
    if K.shape[0] != V.shape[0]:
        raise ValueError("K and V must have the same length")
    if heads < 1 or c % heads:
        raise ValueError(f"{c} channels cannot be split into {heads} heads")
    dh = c // heads
    Qh = Q.reshape(-1, heads, dh).transpose(1, 0, 2)
    Kh = K.reshape(-1, heads, dh).transpose(1, 0, 2)
    Vh = V.reshape(-1, heads, dh).transpose(1, 0, 2)
    A = softmax(Qh @ Kh.transpose(0, 2, 1) / np.sqrt(dh), axis=2)
    O = (A @ Vh).transpose(1, 0, 2).reshape(-1, c)
    out = O if w_out is None else O @ w_out
    if return_weights:
        return AttentionOutput(out, A, O)
    return out


def mha_vjp(Q, K, V, heads, w_out, d_out):
    """Gradients of ``sum(d_out * mha(...))``: ``(dQ, dK, dV, dW_out)``."""
    Q, K, V = (np.asarray(x, dtype=np.float64) for x in (Q, K, V))
    c = Q.shape[1]
    dh = c // heads
    res = mha(Q, K, V, heads, w_out, return_weights=True)
    A, O = res.weights, res.heads_out
    if w_out is None:
        dO, dW = np.asarray(d_out), None
    else:
        dO, dW = d_out @ w_out.T, O.T @ d_out
    Kh = K.reshape(-1, heads, dh).transpose(1, 0, 2)
    Vh = V.reshape(-1, heads, dh).transpose(1, 0, 2)
    Qh = Q.reshape(-1, heads, dh).transpose(1, 0, 2)
    dOh = dO.reshape(-1, heads, dh).transpose(1, 0, 2)
    dA = dOh @ Vh.transpose(0, 2, 1)
    dVh = A.transpose(0, 2, 1) @ dOh
    dS = A * (dA - np.sum(dA * A, axis=2, keepdims=True)) / np.sqrt(dh)
    dQh = dS @ Kh
    dKh = dS.transpose(0, 2, 1) @ Qh

    def merge(x):
        return x.transpose(1, 0, 2).reshape(-1, c)

    return merge(dQh), merge(dKh), merge(dVh), dW


# --- fusion -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FusionParams:
    """Parameters of the bidirectional fusion block.

    ``kernels_g``/``kernels_s`` map ``"q"``, ``"k"``, ``"v"`` to
    (k, k, c, c) kernels of each modality's LCP layers; ``w_out_g`` projects
    the attention read by the appearance branch, ``w_out_s`` the shape
    branch.
    """

    encoder_g: LatentEncoder
    encoder_s: LatentEncoder
    kernels_g: dict
    kernels_s: dict
    w_out_g: np.ndarray
    w_out_s: np.ndarray
    cls_g: np.ndarray
    cls_s: np.ndarray
    heads: int = 4

    def __post_init__(self):
        c = self.w_out_g.shape[0]
        if c % self.heads:
            raise ValueError(f"channel count {c} is not divisible by {self.heads} heads")
        for ks in (self.kernels_g, self.kernels_s):
            for name in ("q", "k", "v"):
                if ks[name].shape[0] % 2 == 0:
                    raise ValueError("LCP kernels must have odd spatial size")

    def swapped(self):
        """The same block with the roles of the two modalities exchanged."""
        return replace(self, encoder_g=self.encoder_s, encoder_s=self.encoder_g,
                       kernels_g=self.kernels_s, kernels_s=self.kernels_g,
                       w_out_g=self.w_out_s, w_out_s=self.w_out_g,
                       cls_g=self.cls_s, cls_s=self.cls_g)


def random_encoder(shape, seed=0, scale=0.1):
    h, w, c = shape
    rng = np.random.default_rng(seed)
    n = h * w * c
    return LatentEncoder(scale * rng.standard_normal((c, n)) / np.sqrt(n),
                         scale * rng.standard_normal(c))


def init_fusion_params(shape, heads=4, kernel_size=3, seed=0, zero_output=False,
                       encoders=None, scale=0.3):
    """Seeded parameters for token maps of ``shape`` = (h, w, c).

    With ``zero_output`` the output projections start at zero, which makes
    the block an exact identity on both maps.
    """
    h, w, c = shape
    rng = np.random.default_rng(seed)
    fan = kernel_size * kernel_size * c

    def kernels():
        return {name: scale * rng.standard_normal((kernel_size, kernel_size, c, c)) / np.sqrt(fan)
                for name in ("q", "k", "v")}

    if encoders is None:
        encoders = (random_encoder(shape, seed=rng.integers(2**31)),
                    random_encoder(shape, seed=rng.integers(2**31)))
    kg, ks = kernels(), kernels()
    if zero_output:
        wg, ws = np.zeros((c, c)), np.zeros((c, c))
    else:
        wg = rng.standard_normal((c, c)) / np.sqrt(c)
        ws = rng.standard_normal((c, c)) / np.sqrt(c)
    return FusionParams(encoders[0], encoders[1], kg, ks, wg, ws,
                        rng.standard_normal(c), rng.standard_normal(c), heads)


class FusionOutput(NamedTuple):
    Fg: np.ndarray
    Fs: np.ndarray
    cls_g: np.ndarray
    cls_s: np.ndarray


def _branch(F_query, enc_q, kq, cls, F_kv, enc_kv, kk, kv, heads, w_out):
    Q = lcp_project(F_query, enc_q, kq, "Q")
    K = lcp_project(F_kv, enc_kv, kk, "K")
    V = lcp_project(F_kv, enc_kv, kv, "V")
    Q_ext = np.vstack([Q, cls[None, :]])
    return Q, K, V, Q_ext, mha(Q_ext, K, V, heads, w_out)


def cross_fuse(Fg, Fs, params):
    """Bidirectional cross-attention with residual addition.

    ``Fg' = Fg + Reshape3D(MHA(Q_g, K_s, V_s))`` and
    ``Fs' = Fs + Reshape3D(MHA(Q_s, K_g, V_g))``; each class token is appended
    as the last query row of its modality and updated residually by the
    same attention, then split off before reshaping.
    """
    Fg, Fs = _as_array(Fg), _as_array(Fs)
    if Fg.shape != Fs.shape:
        raise ValueError(f"token maps differ in shape: {Fg.shape} vs {Fs.shape}")
    n = Fg.shape[0] * Fg.shape[1]
    p = params
    *_, Og = _branch(Fg, p.encoder_g, p.kernels_g["q"], p.cls_g,
                     Fs, p.encoder_s, p.kernels_s["k"], p.kernels_s["v"], p.heads, p.w_out_g)
    *_, Os = _branch(Fs, p.encoder_s, p.kernels_s["q"], p.cls_s,
                     Fg, p.encoder_g, p.kernels_g["k"], p.kernels_g["v"], p.heads, p.w_out_s)
    return FusionOutput(Fg + Og[:n].reshape(Fg.shape), Fs + Os[:n].reshape(Fs.shape),
                        p.cls_g + Og[n], p.cls_s + Os[n])


def _branch_vjp(F_query, enc_q, kq, cls, F_kv, enc_kv, kk, kv, heads, w_out, d_maps, d_cls):
    Q, K, V, Q_ext, _ = _branch(F_query, enc_q, kq, cls, F_kv, enc_kv, kk, kv, heads, w_out)
    d_out = np.vstack([d_maps.reshape(-1, d_maps.shape[2]), d_cls[None, :]])
    dQe, dK, dV, dW = mha_vjp(Q_ext, K, V, heads, w_out, d_out)
    dFq, dkq = lcp_project_vjp(F_query, enc_q, kq, dQe[:-1])
    dFk, dkk = lcp_project_vjp(F_kv, enc_kv, kk, dK)
    dFv, dkv = lcp_project_vjp(F_kv, enc_kv, kv, dV)
    return dFq, dFk + dFv, dkq, dkk, dkv, dW, dQe[-1]


def cross_fuse_vjp(Fg, Fs, params, dFg, dFs, dcls_g=None, dcls_s=None):
    """Gradients of ``<dFg, Fg'> + <dFs, Fs'> + <dcls_g, cls_g'> + <dcls_s, cls_s'>``.

    Returns a dict with ``Fg``, ``Fs``, ``kernels_g``/``kernels_s`` (dicts
    keyed q/k/v), ``w_out_g``, ``w_out_s``, ``cls_g`` and ``cls_s``.
    Encoders are frozen and get no gradient.
    """
    Fg, Fs = _as_array(Fg), _as_array(Fs)
    p = params
    c = Fg.shape[2]
    dcls_g = np.zeros(c) if dcls_g is None else np.asarray(dcls_g)
    dcls_s = np.zeros(c) if dcls_s is None else np.asarray(dcls_s)
    gq_g, gkv_s, kq_g, kk_s, kv_s, dWg, dclsq_g = _branch_vjp(
        Fg, p.encoder_g, p.kernels_g["q"], p.cls_g,
        Fs, p.encoder_s, p.kernels_s["k"], p.kernels_s["v"], p.heads, p.w_out_g, dFg, dcls_g)
    gq_s, gkv_g, kq_s, kk_g, kv_g, dWs, dclsq_s = _branch_vjp(
        Fs, p.encoder_s, p.kernels_s["q"], p.cls_s,
        Fg, p.encoder_g, p.kernels_g["k"], p.kernels_g["v"], p.heads, p.w_out_s, dFs, dcls_s)
    return {
        "Fg": dFg + gq_g + gkv_g,
        "Fs": dFs + gq_s + gkv_s,
        "kernels_g": {"q": kq_g, "k": kk_g, "v": kv_g},
        "kernels_s": {"q": kq_s, "k": kk_s, "v": kv_s},
        "w_out_g": dWg,
        "w_out_s": dWs,
        "cls_g": dcls_g + dclsq_g,
        "cls_s": dcls_s + dclsq_s,
    }


# --- heads --------------------------------------------------------------------

def global_average_pool(F):
    return _as_array(F).mean(axis=(0, 1))


def linear_head(features, weight, bias=None):
    """Identity logits ``features @ weight + bias`` for the ID loss."""
    out = np.asarray(features) @ weight
    return out if bias is None else out + bias


# --- checkpoints --------------------------------------------------------------

def save_fusion_params(path, params):
    t = {"heads": np.array([params.heads])}
    for tag, enc in (("g", params.encoder_g), ("s", params.encoder_s)):
        t[f"encoder_{tag}.weight"] = enc.weight
        t[f"encoder_{tag}.bias"] = enc.bias
    for tag, ks in (("g", params.kernels_g), ("s", params.kernels_s)):
        for name in ("q", "k", "v"):
            t[f"kernel_{tag}.{name}"] = ks[name]
    t["w_out_g"], t["w_out_s"] = params.w_out_g, params.w_out_s
    t["cls_g"], t["cls_s"] = params.cls_g, params.cls_s
    fileio.write_tensors(path, t)


def load_fusion_params(path):
    t = fileio.read_tensors(path)
    enc = {tag: LatentEncoder(t[f"encoder_{tag}.weight"], t[f"encoder_{tag}.bias"])
           for tag in ("g", "s")}
    ks = {tag: {name: t[f"kernel_{tag}.{name}"] for name in ("q", "k", "v")} for tag in ("g", "s")}
    return FusionParams(enc["g"], enc["s"], ks["g"], ks["s"], t["w_out_g"], t["w_out_s"],
                        t["cls_g"], t["cls_s"], int(t["heads"][0]))
