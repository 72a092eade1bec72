"""Present-clip motion prior: an eps-prediction diffusion model over motion tokens.

Audio and reference-image tokens are fused by FiLM and prepended, together
with a timestep token and optional landmark (head) tokens, to the noised
head/lip/expression tokens. L pairs of (causal block, temporal block) follow.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .attention import MultiHeadAttention
from .diffusion import NoiseSchedule, ddpm_sample, eps_loss, gaussian_eps_gain, q_sample_batch
from .nn import AdamW, FeedForward, LayerNorm, Linear, Module, param, sinusoidal
from .tensor import Rng, Tensor
from .world import N_EXPR, MotionTrack

log = logging.getLogger(__name__)

STREAMS = ("head", "lip", "expr")


# --- encoders -------------------------------------------------------------
class AudioEncoder(Module):
    # synthetic band features have a spread of ~0.25; the gain brings the
    # pre-activation to unit scale
    GAIN = 4.0

    def __init__(self, k, d, rng: Rng):
        self.proj = Linear(k, d, rng)
        self.proj.weight.data *= self.GAIN

    def pre(self, features) -> Tensor:
        return self.proj(tn.as_tensor(features))

    def __call__(self, features) -> Tensor:
        features = tn.as_tensor(features)
        if features.shape[-2] == 0:
            raise ValueError("audio has no frames")
        return tn.silu(self.pre(features))


class ImageEncoder(Module):
    """Mean-pooled linear embedding of 8x8 patches; a black frame maps to the bias."""

    def __init__(self, d, rng: Rng, patch=8):
        self.patch = patch
        self.proj = Linear(patch * patch, d, rng)

    def __call__(self, frame) -> Tensor:
        x = np.asarray(frame, dtype=tn.get_dtype())
        p = self.patch
        *lead, h, w = x.shape
        patches = x.reshape(*lead, h // p, p, w // p, p)
        pooled = np.moveaxis(patches, -3, -2).reshape(*lead, (h // p) * (w // p), p * p).mean(axis=-2)
        return self.proj(Tensor(pooled[..., None, :]))      # [..., 1, d]


def replicate(img_tok, T: int) -> Tensor:
    img_tok = tn.as_tensor(img_tok)
    return tn.broadcast_to(img_tok, img_tok.shape[:-2] + (T, img_tok.shape[-1]))


class MotionEmbedder:
    """Frozen linear embeddings of ground-truth motion parameters.

    Each parameter maps along a fixed random unit direction, scaled so its
    spread over the synthetic world is about ``spread``; biases center the
    streams on the world's typical values.
    """

    # rough spreads of yaw, pitch and mouth openness in the synthetic world
    STD = {"yaw": 0.21, "pitch": 0.13, "mouth": 0.18}

    def __init__(self, d, seed: int = 77, spread: float = 1.5):
        rng = Rng(seed, 0xE3)

        def unit(n):
            u = np.asarray(rng.normal((n, d)), dtype=np.float64)
            return u / np.linalg.norm(u, axis=1, keepdims=True)

        self.W_head = unit(2) * (spread / np.array([[self.STD["yaw"]], [self.STD["pitch"]]]))
        self.W_lip = unit(1) * (spread / self.STD["mouth"])
        self.W_expr = unit(N_EXPR) * spread
        self.b_head = np.zeros(d)
        self.b_lip = -0.5 * self.W_lip[0]
        self.b_expr = -self.W_expr.mean(axis=0)
        self.d = d

    def head(self, pose) -> np.ndarray:
        return (np.asarray(pose, dtype=np.float64) @ self.W_head + self.b_head).astype(tn.get_dtype())

    def lip(self, mouth) -> np.ndarray:
        m = np.asarray(mouth, dtype=np.float64)[..., None]
        return (m @ self.W_lip + self.b_lip).astype(tn.get_dtype())

    def expr(self, weights) -> np.ndarray:
        return (np.asarray(weights, dtype=np.float64) @ self.W_expr + self.b_expr).astype(tn.get_dtype())

    def stream_cov(self) -> np.ndarray:
        """Token covariance of (head, lip, expr) implied by the world's spreads, [3, d, d]."""
        head = (self.W_head.T * np.array([self.STD["yaw"], self.STD["pitch"]]) ** 2) @ self.W_head
        lip = self.STD["mouth"] ** 2 * self.W_lip.T @ self.W_lip
        p = np.full(N_EXPR, 1.0 / N_EXPR)
        expr = self.W_expr.T @ (np.diag(p) - np.outer(p, p)) @ self.W_expr
        return np.stack([head, lip, expr])

    def lip_grid(self, n=101):
        values = np.linspace(0.0, 1.0, n)
        return values, self.lip(values)

    def decode_lip(self, tokens) -> np.ndarray:
        """Nearest-neighbour mouth openness for each lip token."""
        values, grid = self.lip_grid()
        tok = np.asarray(getattr(tokens, "data", tokens), dtype=np.float64)
        d2 = ((tok[..., None, :] - grid.astype(np.float64)) ** 2).sum(-1)
        return values[d2.argmin(-1)]


@dataclass
class MotionTokens:
    head: np.ndarray          # [..., T, d]
    lip: np.ndarray
    expr: np.ndarray
    landmark_guided: bool = False

    def diffused(self) -> np.ndarray:
        """Diffusion state [..., T, c, d]: (lip, expr) when guided, else all three."""
        parts = [self.lip, self.expr] if self.landmark_guided else [self.head, self.lip, self.expr]
        return np.stack(parts, axis=-2)

    def all_streams(self) -> np.ndarray:
        return np.stack([self.head, self.lip, self.expr], axis=-2)

    @property
    def streams(self):
        return ("lip", "expr") if self.landmark_guided else STREAMS


def encode_motion_ground_truth(states: MotionTrack, embedder: MotionEmbedder, landmark_guided=False) -> MotionTokens:
    return MotionTokens(head=embedder.head(np.stack([states.yaw, states.pitch], -1)),
                        lip=embedder.lip(states.mouth_open), expr=embedder.expr(states.expr),
                        landmark_guided=landmark_guided)


class FiLM(Module):
    """out = gamma(image) * audio + beta(image); identity at initialization."""

    def __init__(self, d, rng: Rng):
        self.to_gamma = Linear(d, d, rng, init="zero")
        self.to_beta = Linear(d, d, rng, init="zero")
        self.to_gamma.bias.data[:] = 1.0

    def __call__(self, audio, image) -> Tensor:
        audio, image = tn.as_tensor(audio), tn.as_tensor(image)
        if audio.shape != image.shape:
            raise ValueError(f"film_fuse: shapes differ {audio.shape} vs {image.shape}")
        return self.to_gamma(image) * audio + self.to_beta(image)


def film_fuse(audio, image, film: FiLM) -> Tensor:
    return film(audio, image)


@dataclass
class ConditioningBundle:
    audio_tokens: Tensor
    image_tokens: Tensor
    fused: Tensor
    head_tokens: Tensor | None = None

    @property
    def landmark_guided(self):
        return self.head_tokens is not None


# --- transformer blocks ---------------------------------------------------
class CausalBlock(Module):
    def __init__(self, d, heads, rng: Rng):
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng.fork(1))
        self.norm2 = LayerNorm(d)
        self.ff = FeedForward(d, rng.fork(2))

    def zero_residuals(self):
        self.attn.o.weight.data[:] = 0
        self.attn.o.bias.data[:] = 0
        self.ff.fc2.weight.data[:] = 0
        self.ff.fc2.bias.data[:] = 0

    def __call__(self, tokens, t_embed=None) -> Tensor:
        """tokens [..., S, d]; t_embed [..., d] is added to every position."""
        x = tn.as_tensor(tokens)
        if t_embed is not None:
            t_embed = tn.as_tensor(t_embed)
            x = x + t_embed.reshape(t_embed.shape[:-1] + (1, t_embed.shape[-1]))
        x = x + self.attn(self.norm1(x), causal=True)
        return x + self.ff(self.norm2(x))


def causal_block(tokens, t_embed, block: CausalBlock) -> Tensor:
    return block(tokens, t_embed)


class TemporalBlock(Module):
    """Self-attention along T for each channel group, then feed-forward."""

    def __init__(self, d, heads, rng: Rng, causal=False):
        self.causal = causal
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng.fork(1))
        self.norm2 = LayerNorm(d)
        self.ff = FeedForward(d, rng.fork(2))

    def __call__(self, tokens) -> Tensor:
        """tokens [..., T, c, d]."""
        x = tn.as_tensor(tokens).swapaxes(-2, -3)        # [..., c, T, d]
        x = x + self.attn(self.norm1(x), causal=self.causal)
        x = x + self.ff(self.norm2(x))
        return x.swapaxes(-2, -3)


def temporal_block(tokens, block: TemporalBlock) -> Tensor:
    return block(tokens)


def timestep_features(t, d) -> np.ndarray:
    return sinusoidal(np.atleast_1d(t), d)


# --- the prior network ----------------------------------------------------
_TYPE_FUSED, _TYPE_HEADCOND, _TYPE_MOTION = 0, 1, 2


class PriorNet(Module):
    """eps_theta(z_t, t, F_p) over [head?, lip, expr] tokens."""

    def __init__(self, d=32, L=8, heads=4, k_audio=8, seed=0, T=16, sched: NoiseSchedule | None = None):
        rng = Rng(seed, 0x9A1)
        self.embedder = MotionEmbedder(d, seed=77)
        # eps_hat = K_t z_t + net(...), K_t the exact eps-denoiser for Gaussian tokens with
        # the embedder's covariance; the net models only the non-Gaussian, conditional part.
        self.skip = None if sched is None else gaussian_eps_gain(self.embedder.stream_cov(), sched)
        self.d, self.L, self.T = d, L, T
        self.audio_enc = AudioEncoder(k_audio, d, rng.fork(1))
        self.image_enc = ImageEncoder(d, rng.fork(2))
        self.film = FiLM(d, rng.fork(3))
        self.head_proj = Linear(d, d, rng.fork(4))
        self.cond_in = Linear(d, d, rng.fork(9), init="zero")
        self.t_mlp1 = Linear(d, d, rng.fork(5))
        self.t_mlp2 = Linear(d, d, rng.fork(6))
        self.type_emb = param(rng.fork(7).normal((2 + len(STREAMS), d), scale=0.5))
        self.causal = [CausalBlock(d, heads, rng.fork(100 + i)) for i in range(L)]
        self.temporal = [TemporalBlock(d, heads, rng.fork(200 + i), causal=True) for i in range(L)]
        self.out_norm = LayerNorm(d)
        self.out = Linear(d, d, rng.fork(8), init="zero")

    # conditioning
    def condition(self, audio_features, ref_frame, landmarks=None) -> ConditioningBundle:
        """audio_features [B, T, k], ref_frame [B, H, W], landmarks [B, T, 2] or None."""
        a = self.audio_enc(audio_features)
        T = a.shape[-2]
        img = replicate(self.image_enc(ref_frame), T)
        fused = self.film(a, img)
        head = None
        if landmarks is not None:
            head = self.head_proj(Tensor(self.embedder.head(landmarks)))
        return ConditioningBundle(audio_tokens=a, image_tokens=img, fused=fused, head_tokens=head)

    def t_embed(self, t) -> Tensor:
        return self.t_mlp2(tn.silu(self.t_mlp1(Tensor(timestep_features(t, self.d)))))

    def __call__(self, z_t, t, F_p: ConditioningBundle, landmark_guided: bool | None = None) -> Tensor:
        """z_t [B, T, c, d] with c = 2 (guided) or 3; t [B]. Returns eps_hat [B, T, c, d]."""
        z_t = tn.as_tensor(z_t)
        B, T, c, d = z_t.shape
        guided = F_p.landmark_guided
        if landmark_guided is not None and landmark_guided != guided:
            raise ValueError("landmark flag of the motion tokens and the conditioning disagree")
        if c != (2 if guided else 3):
            raise ValueError(f"landmark flag inconsistent with {c} diffused streams")
        pos = Tensor(sinusoidal(np.arange(T), d))
        te = self.t_embed(np.broadcast_to(np.asarray(t), (B,)))             # [B, d]
        type_ids = [2 + STREAMS.index(s) for s in (("lip", "expr") if guided else STREAMS)]
        parts = [te.reshape(B, 1, d), F_p.fused + pos + self.type_emb[_TYPE_FUSED]]
        if guided:
            parts.append(F_p.head_tokens + pos + self.type_emb[_TYPE_HEADCOND])
        # conditioning is prepended and also added to its own frame's motion tokens
        frame_cond = F_p.fused if not guided else F_p.fused + F_p.head_tokens
        motion = z_t + (self.cond_in(frame_cond) + pos).reshape(B, T, 1, d) + self.type_emb[type_ids]
        P = sum(p.shape[1] for p in parts)
        x = tn.concat(parts + [motion.reshape(B, T * c, d)], axis=1)
        for cb, tb in zip(self.causal, self.temporal):
            x = cb(x, te)
            m = tb(x[:, P:].reshape(B, T, c, d)).reshape(B, T * c, d)
            x = tn.concat([x[:, :P], m], axis=1)
        out = self.out(self.out_norm(x[:, P:])).reshape(B, T, c, d)
        if self.skip is not None:
            streams = [1, 2] if guided else [0, 1, 2]
            k = self.skip[np.broadcast_to(np.asarray(t), (B,))][:, None, streams]      # [B, 1, c, d, d]
            out = out + tn.matmul(Tensor(k.astype(z_t.dtype)), z_t.reshape(B, T, c, d, 1)).reshape(B, T, c, d)
        return out


def prior_forward(z_t, t, F_p: ConditioningBundle, model: PriorNet) -> Tensor:
    return model(z_t, t, F_p)


# --- training & sampling ----------------------------------------------------
@dataclass
class PriorBatchData:
    audio: np.ndarray      # [N, T, k]
    ref: np.ndarray        # [N, H, W]
    head: np.ndarray       # [N, T, 2]
    tokens: np.ndarray     # [N, T, 3, d]

    @classmethod
    def from_clips(cls, clips, embedder: MotionEmbedder):
        if not clips:
            raise ValueError("empty dataset")
        dt = tn.get_dtype()
        return cls(audio=np.stack([c.audio.features for c in clips]).astype(dt),
                   ref=np.stack([c.ref_frame for c in clips]).astype(dt),
                   head=np.stack([c.states.head() for c in clips]).astype(dt),
                   tokens=np.stack([encode_motion_ground_truth(c.states, embedder).all_streams()
                                    for c in clips]))


@dataclass
class PriorTrainLog:
    losses: list = field(default_factory=list)
    streams: list = field(default_factory=list)      # per step: set of diffused stream names
    conditioned_on_head: list = field(default_factory=list)


def prior_loss(model: PriorNet, data: PriorBatchData, idx, guided: bool, sched: NoiseSchedule, rng: Rng):
    tokens = data.tokens[idx]
    z0 = tokens[:, :, 1:] if guided else tokens
    t = rng.integers(0, sched.T_steps, size=len(idx))
    eps = rng.normal(z0.shape)
    zt = q_sample_batch(z0, t, eps, sched)
    cond = model.condition(data.audio[idx], data.ref[idx], data.head[idx] if guided else None)
    return eps_loss(eps, model(zt, t, cond, landmark_guided=guided))


def train_prior(model: PriorNet, clips, sched: NoiseSchedule, steps: int, batch: int = 4,
                lr: float = 1e-5, weight_decay: float = 0.01, landmark_dropout: float = 0.5,
                seed: int = 0, params=None, trace: PriorTrainLog | None = None, log_every=100,
                on_step=None):
    """Minimise the eps loss with whole-clip landmark dropout.

    Each clip in a batch independently loses its landmark track with
    probability ``landmark_dropout``; dropped clips diffuse head, lip and
    expression, kept clips diffuse lip and expression conditioned on head.
    """
    data = PriorBatchData.from_clips(clips, model.embedder)
    rng = Rng(seed, 0x7A)
    opt = AdamW(params if params is not None else model.parameters(), lr=lr, weight_decay=weight_decay)
    trace = trace if trace is not None else PriorTrainLog()
    n = len(data.tokens)
    t0 = time.time()
    for step in range(steps):
        idx = rng.integers(0, n, size=batch)
        drop = np.array([rng.random() < landmark_dropout for _ in range(batch)])
        opt.zero_grad()
        total, count = None, 0
        step_streams, step_head = set(), False
        for guided, members in ((False, idx[drop]), (True, idx[~drop])):
            if len(members) == 0:
                continue
            loss = prior_loss(model, data, members, guided, sched, rng)
            w = len(members) / batch
            total = loss * w if total is None else total + loss * w
            step_streams |= {"lip", "expr"} | (set() if guided else {"head"})
            step_head |= guided
        total.backward()
        opt.step()
        trace.losses.append(total.item())
        trace.streams.append(frozenset(step_streams))
        trace.conditioned_on_head.append(step_head)
        if on_step is not None:
            on_step(step, trace.losses[-1])
        if log_every and (step + 1) % log_every == 0:
            log.info("%d %.5f %.1f", step + 1, float(np.mean(trace.losses[-log_every:])), time.time() - t0)
    return trace


def sample_motion(model: PriorNet, F_p: ConditioningBundle, sched: NoiseSchedule, rng: Rng,
                  head_pose=None) -> MotionTokens:
    """Draw motion tokens for one conditioning bundle (batch axis leading).

    When the bundle carries landmark tokens, ``head_pose`` [B, T, 2] supplies
    the head stream of the returned tokens.
    """
    B, T, d = F_p.fused.shape
    guided = F_p.landmark_guided
    c = 2 if guided else 3

    def eps_model(z, t, cond):
        return model(z, np.full(B, t), cond).data

    with tn.no_grad():
        z = ddpm_sample(eps_model, F_p, sched, (B, T, c, d), rng)
    if guided:
        if head_pose is None:
            raise ValueError("landmark-guided sampling needs the head pose track")
        head = model.embedder.head(head_pose)
        return MotionTokens(head=head, lip=z[:, :, 0], expr=z[:, :, 1], landmark_guided=True)
    return MotionTokens(head=z[:, :, 0], lip=z[:, :, 1], expr=z[:, :, 2])


def lip_sync_score(model: PriorNet, clips, sched: NoiseSchedule, seed=0) -> float:
    """Pearson r between NN-decoded sampled lip tokens and the lagged envelope."""
    data = PriorBatchData.from_clips(clips, model.embedder)
    with tn.no_grad():
        cond = model.condition(data.audio, data.ref)
        tokens = sample_motion(model, cond, sched, Rng(seed, 0x5A))
    mouth = model.embedder.decode_lip(tokens.lip)                       # [N, T]
    env = np.stack([c.audio.envelope for c in clips])
    x, y = mouth[:, 1:].reshape(-1), env[:, :-1].reshape(-1)
    if x.std() == 0 or y.std() == 0:
        return 0.0
    return float(np.corrcoef(x, y)[0, 1])


