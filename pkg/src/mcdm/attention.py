"""Attention variants: exact, frame-aligned, kernelized and memory-temporal."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .nn import LayerNorm, Linear, Module, param, sinusoidal
from .tensor import Rng, Tensor


def sdpa(Q, K, V, causal=False, return_weights=False):
    """softmax(Q K^T / sqrt(d)) V over the last two axes.

    With ``causal`` the logit for key j > query i is set to -inf, so a
    perturbation of a later key/value cannot touch earlier outputs.
    """
    Q, K, V = tn.as_tensor(Q), tn.as_tensor(K), tn.as_tensor(V)
    d = Q.shape[-1]
    if K.shape[-1] != d:
        raise ValueError(f"sdpa: query dim {Q.shape} does not match key dim {K.shape}")
    if K.shape[-2] < 1 or K.shape[-2] != V.shape[-2]:
        raise ValueError(f"sdpa: key/value length mismatch {K.shape} vs {V.shape}")
    logits = tn.matmul(Q, K.swapaxes(-1, -2)) * (1.0 / math.sqrt(d))
    if causal:
        n, m = logits.shape[-2], logits.shape[-1]
        mask = np.triu(np.ones((n, m), dtype=bool), k=1 + (m - n))
        logits = tn.masked_fill(logits, mask, -np.inf)
    w = tn.softmax(logits, axis=-1)
    out = tn.matmul(w, V)
    return (out, w) if return_weights else out


class MultiHeadAttention(Module):
    def __init__(self, d, heads, rng: Rng, d_kv=None, zero_out=False):
        if d % heads:
            raise ValueError(f"d={d} not divisible by heads={heads}")
        d_kv = d if d_kv is None else d_kv
        self.heads = heads
        self.q = Linear(d, d, rng, bias=False)
        self.k = Linear(d_kv, d, rng, bias=False)
        self.v = Linear(d_kv, d, rng, bias=False)
        self.o = Linear(d, d, rng, init="zero" if zero_out else "default")

    def split(self, x: Tensor) -> Tensor:
        *lead, L, d = x.shape
        h = self.heads
        return x.reshape(*lead, L, h, d // h).swapaxes(-2, -3)

    def merge(self, x: Tensor) -> Tensor:
        *lead, h, L, dh = x.shape
        return x.swapaxes(-2, -3).reshape(*lead, L, h * dh)

    def __call__(self, x, context=None, causal=False) -> Tensor:
        context = x if context is None else context
        q = self.split(self.q(x))
        k = self.split(self.k(context))
        v = self.split(self.v(context))
        return self.o(self.merge(sdpa(q, k, v, causal=causal)))


# --- frame-aligned attention ---------------------------------------------
class FrameAlignedParams(Module):
    """Key/value projections plus ``n`` learnable query tokens."""

    def __init__(self, n, d, rng: Rng):
        if n < 1:
            raise ValueError("need at least one query token")
        self.W_K = param(rng.normal((d, d), scale=1.0 / math.sqrt(d)))
        self.W_V = param(rng.normal((d, d), scale=1.0 / math.sqrt(d)))
        self.Q = param(rng.normal((n, d)))

    @property
    def n(self):
        return self.Q.shape[0]

    @property
    def d(self):
        return self.Q.shape[1]


def frame_aligned_attention(F_x, F_a, params: FrameAlignedParams, return_weights=False):
    """Per archived frame i: softmax(Q (F_x W_K)^T / sqrt(d)) (F_a[i] W_V).

    F_x: [b, 1, m, d] reference tokens, F_a: [b, a, m, d] archived tokens.
    Returns [b, a, n, d]. Keys come only from the reference, so the weights
    are shared by all frames and broadcast over the frame axis.
    """
    F_x, F_a = tn.as_tensor(F_x), tn.as_tensor(F_a)
    if F_a.shape[1] == 0:
        raise ValueError("empty archived clip")
    if F_x.shape[-1] != params.d or F_a.shape[-1] != params.d:
        raise ValueError(f"embedding dim mismatch: F_x {F_x.shape}, F_a {F_a.shape}, d={params.d}")
    K = tn.matmul(F_x, params.W_K)              # [b,1,m,d]
    V = tn.matmul(F_a, params.W_V)              # [b,a,m,d]
    return sdpa(params.Q, K, V, return_weights=return_weights)


# --- kernelized (FAVOR-style) attention ----------------------------------
@dataclass
class FavorFeatures:
    omega: np.ndarray  # [r, d]
    redraw_seed: int

    @property
    def r(self):
        return self.omega.shape[0]

    @property
    def d(self):
        return self.omega.shape[1]

    @classmethod
    def draw(cls, d: int, r: int, seed: int) -> "FavorFeatures":
        """Orthogonal Gaussian rows, built in d x d blocks and rescaled by chi norms."""
        if r < 1:
            raise ValueError("need at least one random feature")
        rng = Rng(seed, 0xFA)
        blocks = []
        for _ in range(-(-r // d)):
            g = rng.normal((d, d)).astype(np.float64)
            q, rr = np.linalg.qr(g)
            q = q * np.sign(np.diag(rr))  # Haar-distributed, not biased by the QR sign convention
            blocks.append(q.T)
        omega = np.concatenate(blocks, axis=0)[:r]
        norms = np.linalg.norm(rng.normal((r, d)).astype(np.float64), axis=1)
        return cls(omega=(omega * norms[:, None]).astype(tn.get_dtype()), redraw_seed=seed)


def favor_map(x, feats: FavorFeatures) -> Tensor:
    """phi(x) = exp(omega x - |x|^2 / 2) / sqrt(r); strictly positive."""
    x = tn.as_tensor(x)
    if x.shape[-1] != feats.d:
        raise ValueError(f"favor_map: input dim {x.shape[-1]} != feature dim {feats.d}")
    if x.ndim == 1:
        return favor_map(x.reshape(1, -1), feats).reshape(-1)
    omega = Tensor(feats.omega.astype(x.dtype))
    proj = tn.matmul(x, omega.transpose())
    sq = (x * x).sum(axis=-1, keepdims=True) * 0.5
    return tn.exp(proj - sq) * (1.0 / math.sqrt(feats.r))


_UNDERFLOW = 1e-9


def _features(x: Tensor, omega: Tensor, stab_axes) -> Tensor:
    """Positive features with a detached max-shift; the shift cancels in the ratio."""
    logit = tn.matmul(x, omega.transpose()) - (x * x).sum(axis=-1, keepdims=True) * 0.5
    shift = logit.data.max(axis=stab_axes, keepdims=True)
    return tn.exp(logit - Tensor(shift))


def fast_attention(Q, K, V, feats: FavorFeatures, chunk: int | None = None):
    """Linear-cost approximation of ``sdpa(Q, K, V)``.

    Q and K are scaled by d^-1/4 here, so exp(q.k) under the feature map is the
    softmax kernel exp(q.k / sqrt(d)). Output is
    phi(Q) (phi(K)^T V) / (phi(Q) (phi(K)^T 1)).

    Outside of autograd, ``chunk`` streams over the sequence so the working
    set is O(chunk * r + r * d_v) whatever the sequence length.
    """
    Q, K, V = tn.as_tensor(Q), tn.as_tensor(K), tn.as_tensor(V)
    d = Q.shape[-1]
    if K.shape[-1] != d or feats.d != d:
        raise ValueError(f"fast_attention: dims Q{Q.shape} K{K.shape} features d={feats.d}")
    if K.shape[-2] != V.shape[-2]:
        raise ValueError(f"fast_attention: key/value length mismatch {K.shape} vs {V.shape}")
    tracking = tn.grad_enabled() and (Q.requires_grad or K.requires_grad or V.requires_grad)
    if chunk is not None and not tracking:
        return Tensor(_fast_attention_streaming(Q.data, K.data, V.data, feats, chunk), op="fast_attention")
    scale = d ** -0.25
    omega = Tensor(feats.omega.astype(Q.dtype))
    qf = _features(Q * scale, omega, (-1,))
    kf = _features(K * scale, omega, (-2, -1))
    kv = tn.matmul(kf.swapaxes(-1, -2), V)                 # [.., r, dv]
    ksum = kf.sum(axis=-2, keepdims=True)                  # [.., 1, r]
    num = tn.matmul(qf, kv)                                 # [.., L, dv]
    den = (qf * ksum).sum(axis=-1, keepdims=True)           # [.., L, 1]
    if np.any(den.data < _UNDERFLOW):
        raise FloatingPointError("kernel underflow")
    return num / den


def _fast_attention_streaming(q, k, v, feats: FavorFeatures, chunk: int) -> np.ndarray:
    d = q.shape[-1]
    scale = d ** -0.25
    omega = feats.omega.astype(q.dtype)
    Lk, Lq = k.shape[-2], q.shape[-2]

    def logits(x):
        xs = x * scale
        return xs @ omega.T - 0.5 * (xs * xs).sum(axis=-1, keepdims=True)

    lead = np.broadcast_shapes(q.shape[:-2], k.shape[:-2], v.shape[:-2])
    shift = np.full(lead + (1, 1), -np.inf, dtype=q.dtype)
    for s in range(0, Lk, chunk):
        shift = np.maximum(shift, logits(k[..., s:s + chunk, :]).max(axis=(-2, -1), keepdims=True))
    kv = np.zeros(lead + (feats.r, v.shape[-1]), dtype=q.dtype)
    ksum = np.zeros(lead + (1, feats.r), dtype=q.dtype)
    for s in range(0, Lk, chunk):
        kf = np.exp(logits(k[..., s:s + chunk, :]) - shift)
        kv += np.swapaxes(kf, -1, -2) @ v[..., s:s + chunk, :]
        ksum += kf.sum(axis=-2, keepdims=True)
    out = np.empty(lead + (Lq, v.shape[-1]), dtype=q.dtype)
    for s in range(0, Lq, chunk):
        lq = logits(q[..., s:s + chunk, :])
        qf = np.exp(lq - lq.max(axis=-1, keepdims=True))
        den = (qf * ksum).sum(axis=-1, keepdims=True)
        if np.any(den < _UNDERFLOW):
            raise FloatingPointError("kernel underflow")
        out[..., s:s + chunk, :] = (qf @ kv) / den
    return out


# --- EMA motion memory ---------------------------------------------------
@dataclass
class MemoryState:
    M: Tensor      # [..., a, s, d]
    alpha: float
    f: int


def memory_init(F_ac_ref, alpha: float = 0.1) -> MemoryState:
    """First clip: the memory is the archived-clip reference feature itself."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    F = tn.as_tensor(F_ac_ref)
    if not np.all(np.isfinite(F.data)):
        raise ValueError("memory_init: non-finite features")
    return MemoryState(M=F, alpha=float(alpha), f=1)


def memory_update(state: MemoryState, F_ac_ref) -> MemoryState:
    """M_f = alpha * M_{f-1} + (1 - alpha) * F_ac_ref; f advances by one."""
    F = tn.as_tensor(F_ac_ref)
    if F.shape != state.M.shape:
        raise ValueError(f"memory_update: shape {F.shape} != memory shape {state.M.shape}")
    a = state.alpha
    return MemoryState(M=state.M * a + F * (1.0 - a), alpha=a, f=state.f + 1)


class TemporalProjection(Module):
    """Pre-norm and q/k/v/o projections wrapped around the temporal kernel."""

    def __init__(self, d, heads, rng: Rng, zero_out=True):
        if d % heads:
            raise ValueError(f"d={d} not divisible by heads={heads}")
        self.heads = heads
        self.norm = LayerNorm(d)
        self.q = Linear(d, d, rng, bias=False)
        self.k = Linear(d, d, rng, bias=False)
        self.v = Linear(d, d, rng, bias=False)
        self.o = Linear(d, d, rng, init="zero" if zero_out else "default")


def _temporal_attend(x: Tensor, proj, attend) -> Tensor:
    """x: [..., s, L, d] -> [..., s, L, d] with optional projections and heads."""
    if proj is None:
        return attend(x, x, x)
    h = proj.norm(x)
    q, k, v = proj.q(h), proj.k(h), proj.v(h)
    if proj.heads > 1:
        *lead, L, d = q.shape
        split = lambda t: t.reshape(*lead, L, proj.heads, d // proj.heads).swapaxes(-2, -3)
        out = attend(split(q), split(k), split(v))
        out = out.swapaxes(-2, -3).reshape(*lead, L, d)
    else:
        out = attend(q, k, v)
    return proj.o(out)


def memory_temporal_attention(F_pc_ref, state: MemoryState, feats: FavorFeatures,
                              proj: TemporalProjection | None = None, pos=None, chunk=None):
    """Fast attention along time over [memory ; present] for each spatial token.

    F_pc_ref: [..., T, s, d]; state.M: [..., a, s, d]. The concatenation has
    length a + T; only its last T positions are returned (the present clip).
    ``pos`` is an optional [a + T, d] table added before attention.
    """
    F = tn.as_tensor(F_pc_ref)
    M = state.M
    if M.shape[-2:] != F.shape[-2:]:
        raise ValueError(f"memory {M.shape} incompatible with present features {F.shape}")
    a, T = M.shape[-3], F.shape[-3]
    x = tn.concat([M, F], axis=-3)                       # [..., a+T, s, d]
    if pos is not None:
        x = x + Tensor(np.asarray(pos)[:, None, :].astype(x.dtype))
    x = x.swapaxes(-2, -3)                                # [..., s, a+T, d]
    out = _temporal_attend(x, proj, lambda q, k, v: fast_attention(q, k, v, feats, chunk=chunk))
    return out[..., a:, :].swapaxes(-2, -3)               # [..., T, s, d]


def exact_temporal_attention(x, proj: TemporalProjection | None = None, pos=None, keep_last=None):
    """Exact softmax attention along the time axis of x: [..., L, s, d]."""
    x = tn.as_tensor(x)
    L = x.shape[-3]
    if pos is not None:
        x = x + Tensor(np.asarray(pos)[:, None, :].astype(x.dtype))
    x = x.swapaxes(-2, -3)
    out = _temporal_attend(x, proj, lambda q, k, v: sdpa(q, k, v))
    if keep_last is not None:
        out = out[..., L - keep_last:, :]
    return out.swapaxes(-2, -3)


def temporal_positions(length: int, d: int) -> np.ndarray:
    return sinusoidal(np.arange(length), d)
