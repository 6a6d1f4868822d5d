"""Monotonic multihead attention: energies, expected alignments, hard boundaries,
chunkwise multihead attention and HeadDrop.

Frame indices exposed by :func:`hard_boundary` and the boundary helpers are
1-based; array axes are 0-based as usual.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Layer, Linear, Tensor, custom_op, exp, matmul, param, sigmoid
from .numerics.rng import xavier_uniform
from .numerics.tensor import reshape, transpose

R_INIT = -2.0


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[..., T, d] -> [..., n_heads, T, d // n_heads]."""
    *lead, t, d = x.shape
    y = reshape(x, (*lead, t, n_heads, d // n_heads))
    n = len(lead)
    return transpose(y, (*range(n), n + 1, n, n + 2))


def merge_heads(x: Tensor) -> Tensor:
    """[..., H, T, dk] -> [..., T, H * dk]."""
    *lead, h, t, dk = x.shape
    n = len(lead)
    y = transpose(x, (*range(n), n + 1, n, n + 2))
    return reshape(y, (*lead, t, h * dk))


# -- monotonic energy and selection ---------------------------------------

def monotonic_energy(h: Tensor, s: Tensor, w_s: Tensor, w_h: Tensor, r: Tensor, n_heads: int) -> Tensor:
    """Energies ``(W_s s_i) . (W_h h_j) / sqrt(d_k) + r`` for every head.

    h: [..., T, d_model], s: [..., U, d_model], w_s/w_h: [d_model, n_heads * d_k],
    r: [n_heads]. Returns [..., n_heads, U, T].
    """
    d_model = h.shape[-1]
    if s.shape[-1] != d_model or w_s.shape[0] != d_model or w_h.shape[0] != d_model:
        raise ValueError("monotonic_energy: inconsistent projection shapes")
    if w_s.shape[1] % n_heads or w_s.shape != w_h.shape:
        raise ValueError("monotonic_energy: projection width must split evenly across heads")
    d_k = w_s.shape[1] // n_heads
    q = split_heads(matmul(s, w_s), n_heads)
    k = split_heads(matmul(h, w_h), n_heads)
    e = matmul(q, transpose(k, (*range(k.ndim - 2), k.ndim - 1, k.ndim - 2))) * (1.0 / np.sqrt(d_k))
    return e + reshape(r, (n_heads, 1, 1))


def selection_probs(energies: Tensor, mode: str = "test", noise_std: float = 1.0,
                    gen: np.random.Generator | None = None) -> Tensor:
    """Stop probabilities; training adds N(0, noise_std^2) before the sigmoid."""
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    if mode == "train" and noise_std > 0:
        if gen is None:
            raise ValueError("training-mode noise needs a generator")
        noise = gen.normal(0.0, noise_std, size=energies.shape).astype(energies.data.dtype)
        energies = energies + noise
    elif mode not in ("train", "test"):
        raise ValueError(f"unknown mode {mode!r}")
    return sigmoid(energies)


# -- expected alignment ---------------------------------------------------

def _alignment_forward(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    *lead, n_out, n_frames = p.shape
    alpha = np.zeros(p.shape, dtype=np.float64)
    q = np.zeros(p.shape, dtype=np.float64)
    prev = np.zeros((*lead, n_frames), dtype=np.float64)
    prev[..., 0] = 1.0
    c = 1.0 - p
    for i in range(n_out):
        acc = prev[..., 0].copy()
        q[..., i, 0] = acc
        ci = c[..., i, :]
        for j in range(1, n_frames):
            acc = ci[..., j - 1] * acc + prev[..., j]
            q[..., i, j] = acc
        alpha[..., i, :] = p[..., i, :] * q[..., i, :]
        prev = alpha[..., i, :]
    return alpha, q


def _alignment_backward(p: np.ndarray, q: np.ndarray, g: np.ndarray) -> np.ndarray:
    n_out, n_frames = p.shape[-2:]
    g_alpha = g.astype(np.float64).copy()
    g_p = np.zeros(p.shape, dtype=np.float64)
    c = 1.0 - p
    for i in range(n_out - 1, -1, -1):
        ga = g_alpha[..., i, :]
        g_p[..., i, :] += ga * q[..., i, :]
        gq = ga * p[..., i, :]
        # reverse of q_j = c_{j-1} q_{j-1} + prev_j
        g_prev = np.empty_like(gq)
        tot = gq[..., n_frames - 1].copy()
        g_prev[..., n_frames - 1] = tot
        for j in range(n_frames - 2, -1, -1):
            g_p[..., i, j] -= tot * q[..., i, j]
            tot = gq[..., j] + c[..., i, j] * tot
            g_prev[..., j] = tot
        if i > 0:
            g_alpha[..., i - 1, :] += g_prev
    return g_p


def expected_alignment(p: Tensor) -> Tensor:
    """Expected monotonic alignments from stop probabilities ``p`` [..., U, T].

    Uses the division-free recurrence
    ``q[i,j] = (1 - p[i,j-1]) q[i,j-1] + alpha[i-1,j]``, ``alpha[i,j] = p[i,j] q[i,j]``
    with ``alpha[0]`` one-hot on the first frame. Accumulates in float64.
    """
    pd = p.data.astype(np.float64)
    alpha, q = _alignment_forward(pd)
    dtype = p.data.dtype

    def bw(g):
        return (_alignment_backward(pd, q, g).astype(dtype),)

    return custom_op(alpha.astype(dtype), (p,), bw)


def hard_boundary(p_row, t_prev: int) -> int | None:
    """First 1-based frame ``j >= t_prev`` with ``p_row[j] >= 0.5``, else ``None``."""
    p_row = np.asarray(p_row)
    n = len(p_row)
    if not 1 <= t_prev <= n:
        raise ValueError(f"t_prev={t_prev} outside [1, {n}]")
    hits = np.nonzero(p_row[t_prev - 1:] >= 0.5)[0]
    return int(hits[0]) + t_prev if len(hits) else None


def first_activation(p: np.ndarray, t_prev: np.ndarray) -> np.ndarray:
    """Vectorised :func:`hard_boundary`: p [..., T], t_prev [...] (1-based) -> 1-based index, 0 if none."""
    n = p.shape[-1]
    frames = np.arange(1, n + 1)
    ok = (p >= 0.5) & (frames >= np.asarray(t_prev)[..., None])
    found = ok.any(axis=-1)
    return np.where(found, np.argmax(ok, axis=-1) + 1, 0)


# -- chunkwise attention --------------------------------------------------

def window_matrix(n_frames: int, w: int) -> np.ndarray:
    """M[l, k] = 1 iff k - w + 1 <= l <= k (0-based), i.e. frame l lies in the window ending at k."""
    idx = np.arange(n_frames)
    diff = idx[None, :] - idx[:, None]
    return ((diff >= 0) & (diff < w)).astype(np.float32)


def chunk_energy(h: Tensor, s: Tensor, w_q: Tensor, w_k: Tensor, n_heads: int) -> Tensor:
    """Scaled-dot chunk energies without offset: [..., n_heads, U, T]."""
    d_c = w_q.shape[1] // n_heads
    q = split_heads(matmul(s, w_q), n_heads)
    k = split_heads(matmul(h, w_k), n_heads)
    return matmul(q, transpose(k, (*range(k.ndim - 2), k.ndim - 1, k.ndim - 2))) * (1.0 / np.sqrt(d_c))


def chunkwise_weights(alpha: Tensor, u: Tensor, w: int, frame_mask: np.ndarray | None = None) -> Tensor:
    """Training-mode chunk weights.

    ``beta[j] = exp(u[j]) * sum_{k=j}^{j+w-1} alpha[k] / sum_{l=k-w+1}^{k} exp(u[l])``
    with windows clipped to the valid frames. alpha: [..., H, U, T] (one per MA
    head), u: [..., Hc, U, T] (shared across MA heads). Returns [..., H, Hc, U, T].
    ``frame_mask`` ([..., T], True = real frame) excludes padding.
    """
    if w < 1:
        raise ValueError("chunk width w must be >= 1")
    n_frames = u.shape[-1]
    ud = u.data
    valid = np.ones(ud.shape, dtype=bool) if frame_mask is None else \
        np.broadcast_to(np.asarray(frame_mask, dtype=bool)[..., None, None, :], ud.shape)
    top = np.max(np.where(valid, ud, -np.inf), axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0).astype(ud.dtype)
    vmask = valid.astype(ud.dtype)
    e = exp(u - top) * vmask
    band = window_matrix(n_frames, w)
    denom = matmul(e, band) + (1.0 - vmask)
    ratio = _expand(alpha, -3) / _expand(denom, -4)
    return _expand(e, -4) * matmul(ratio, band.T)


def _expand(x: Tensor, axis: int) -> Tensor:
    shape = list(x.shape)
    pos = axis if axis >= 0 else len(shape) + 1 + axis
    shape.insert(pos, 1)
    return reshape(x, tuple(shape))


def boundary_window_weights(u: np.ndarray, t: np.ndarray, w: int) -> np.ndarray:
    """Test-mode chunk weights: softmax of ``u`` over frames [t-w+1, t] (1-based, clipped at 1).

    u: [..., T]; t: [...] with 0 meaning "no boundary" (all-zero row).
    """
    n = u.shape[-1]
    frames = np.arange(1, n + 1)
    t = np.asarray(t)[..., None]
    inside = (frames <= t) & (frames > t - w) & (t > 0)
    z = np.where(inside, u, -np.inf)
    top = np.max(z, axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    ez = np.where(inside, np.exp(np.where(inside, u - top, 0.0)), 0.0)
    tot = ez.sum(axis=-1, keepdims=True, dtype=np.float64)
    return np.divide(ez, tot, out=np.zeros(ez.shape), where=tot > 0).astype(u.dtype)


# -- HeadDrop -------------------------------------------------------------

@dataclass
class HeadDropConfig:
    p_hd: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.p_hd < 1.0:
            raise ValueError("p_hd must lie in [0, 1)")


def headdrop_mask(gen: np.random.Generator, batch: int, n_heads: int, p_hd: float) -> tuple[np.ndarray, np.ndarray]:
    """Sample keep-masks [batch, n_heads] and per-sequence scales ``H / H_kept``.

    A draw that would drop every head keeps one head chosen uniformly.
    """
    keep = gen.random((batch, n_heads)) >= p_hd
    dead = ~keep.any(axis=1)
    if dead.any():
        rescue = gen.integers(0, n_heads, size=int(dead.sum()))
        keep[np.nonzero(dead)[0], rescue] = True
    scale = n_heads / keep.sum(axis=1)
    return keep, scale.astype(np.float32)


def headdrop(alpha: Tensor, cfg: HeadDropConfig, mode: str, gen: np.random.Generator | None = None):
    """Zero whole heads of ``alpha`` [B, H, U, T]; returns (alpha, scale [B], keep [B, H])."""
    batch, n_heads = alpha.shape[:2]
    if mode != "train" or cfg.p_hd == 0.0:
        return alpha, np.ones(batch, dtype=np.float32), np.ones((batch, n_heads), dtype=bool)
    keep, scale = headdrop_mask(gen, batch, n_heads, cfg.p_hd)
    masked = alpha * keep[:, :, None, None].astype(alpha.data.dtype)
    return masked, scale, keep


# -- the attention sub-layer ---------------------------------------------

@dataclass
class AlignmentState:
    """Per-layer alignment record.

    Training: ``p`` and ``alpha`` are [B, H, U, T] arrays. Test: ``boundaries``
    holds 1-based frames [U, H] (0 where a head did not activate).
    """

    p: np.ndarray | None = None
    alpha: np.ndarray | None = None
    boundaries: np.ndarray | None = None
    headdrop_mask: np.ndarray | None = None


class MonotonicMultiheadAttention(Layer):
    """H_ma monotonic heads, each followed by H_ca chunkwise heads whose
    parameters are shared by every monotonic head in the layer."""

    def __init__(self, gen: np.random.Generator, d_model: int, n_heads: int, n_chunk_heads: int, w: int,
                 noise_std: float = 1.0, p_hd: float = 0.0):
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by H_ma")
        if d_model % (n_heads * n_chunk_heads):
            raise ValueError("d_model must be divisible by H_ma * H_ca")
        d_c = d_model // (n_heads * n_chunk_heads)
        self.w_s = param(xavier_uniform(gen, d_model, d_model))
        self.w_h = param(xavier_uniform(gen, d_model, d_model))
        self.r = param(np.full(n_heads, R_INIT, dtype=np.float32))
        self.w_q = param(xavier_uniform(gen, d_model, n_chunk_heads * d_c))
        self.w_k = param(xavier_uniform(gen, d_model, n_chunk_heads * d_c))
        self.w_v = param(xavier_uniform(gen, d_model, n_chunk_heads * d_c))
        self.out = Linear(gen, d_model, d_model)
        self._n_heads = n_heads
        self._n_chunk = n_chunk_heads
        self._w = w
        self._noise_std = noise_std
        self._headdrop = HeadDropConfig(p_hd)

    @property
    def n_heads(self) -> int:
        return self._n_heads

    def energies(self, h: Tensor, s: Tensor) -> Tensor:
        return monotonic_energy(h, s, self.w_s, self.w_h, self.r, self._n_heads)

    def chunk_energies(self, h: Tensor, s: Tensor) -> Tensor:
        return chunk_energy(h, s, self.w_q, self.w_k, self._n_chunk)

    def values(self, h: Tensor) -> Tensor:
        """[..., T, d] -> [..., Hc, T, d_c]."""
        return split_heads(matmul(h, self.w_v), self._n_chunk)

    def forward_train(self, s: Tensor, h: Tensor, frame_mask: np.ndarray, mode: str = "train",
                      gen: np.random.Generator | None = None, noise_gen: np.random.Generator | None = None):
        """s: [B, U, d], h: [B, T, d], frame_mask: [B, T]. Returns (context [B, U, d], AlignmentState)."""
        e = self.energies(h, s)
        p = selection_probs(e, mode, self._noise_std if mode == "train" else 0.0, noise_gen)
        p = p * frame_mask[:, None, None, :].astype(p.data.dtype)
        alpha = expected_alignment(p)
        alpha, scale, keep = headdrop(alpha, self._headdrop, mode, gen)
        beta = chunkwise_weights(alpha, self.chunk_energies(h, s), self._w, frame_mask)
        v = _expand(self.values(h), 1)                      # [B, 1, Hc, T, dc]
        ctx = matmul(beta, v)                               # [B, H, Hc, U, dc]
        b, n_h, n_c, n_u, d_c = ctx.shape
        ctx = transpose(ctx, (0, 3, 1, 2, 4))
        ctx = reshape(ctx, (b, n_u, n_h * n_c * d_c))
        if mode == "train" and self._headdrop.p_hd > 0:
            ctx = ctx * scale[:, None, None]
        state = AlignmentState(p=p.data, alpha=alpha.data, headdrop_mask=keep)
        return self.out(ctx), state

    def context_at(self, u: np.ndarray, v: np.ndarray, boundaries: np.ndarray) -> np.ndarray:
        """Test-mode context for one output step.

        u: [K, Hc, T] chunk energies, v: [K, Hc, T, d_c] (or [Hc, T, d_c] shared
        by all K), boundaries: [K, H]
        1-based (0 = head attends nothing). Returns [K, d_model].
        """
        beta = boundary_window_weights(u[:, None, :, :], boundaries[:, :, None], self._w)  # [K,H,Hc,T]
        spec = "khct,ctd->khcd" if v.ndim == 3 else "khct,kctd->khcd"
        ctx = np.einsum(spec, beta, v)
        k = ctx.shape[0]
        return ctx.reshape(k, -1) @ self.out.weight.data + self.out.bias.data
