"""Video denoiser: four-sublayer transformer blocks and the long-horizon loop."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .attention import (FavorFeatures, MemoryState, MultiHeadAttention, TemporalProjection,
                        exact_temporal_attention, memory_init, memory_temporal_attention,
                        memory_update, temporal_positions)
from .diffusion import NoiseSchedule, ddpm_sample, gaussian_eps_gain
from .io import FormatError, load_pack, read_tensor_from, save_pack, write_tensor_to
from .nn import FeedForward, LayerNorm, Linear, Module, positions_2d, sinusoidal
from .tensor import Rng, Tensor

MODES = ("memory", "plain", "full_history")


# --- lossless latent ------------------------------------------------------
def space_to_depth(frame, factor: int = 4) -> np.ndarray:
    """[..., H, W] -> [..., s, factor**2].

    token = row_block * (W / factor) + col_block, channel = dy * factor + dx.
    """
    x = np.asarray(frame)
    H, W = x.shape[-2:]
    if H % factor or W % factor:
        raise ValueError(f"frame {H}x{W} not divisible by factor {factor}")
    lead = x.shape[:-2]
    y = x.reshape(*lead, H // factor, factor, W // factor, factor)
    y = np.moveaxis(y, -3, -2)                   # [..., gh, gw, dy, dx]
    return y.reshape(*lead, (H // factor) * (W // factor), factor * factor)


def depth_to_space(tokens, H: int, W: int, factor: int = 4) -> np.ndarray:
    z = np.asarray(tokens)
    lead = z.shape[:-2]
    gh, gw = H // factor, W // factor
    if z.shape[-2:] != (gh * gw, factor * factor):
        raise ValueError(f"tokens {z.shape} do not describe a {H}x{W} frame at factor {factor}")
    y = z.reshape(*lead, gh, gw, factor, factor)
    return np.moveaxis(y, -2, -3).reshape(*lead, H, W)


def frames_to_latent(frames, factor: int = 4) -> np.ndarray:
    return space_to_depth(2.0 * np.asarray(frames, dtype=tn.get_dtype()) - 1.0, factor)


def latent_to_frames(z, H: int, W: int, factor: int = 4) -> np.ndarray:
    return np.clip((depth_to_space(z, H, W, factor) + 1.0) * 0.5, 0.0, 1.0)


# --- memory holder ----------------------------------------------------------
class MotionMemory:
    """Per-block memory slot.

    ``state`` is the committed M after the last finished clip (None before the
    first). While a clip is denoised the block derives a provisional state from
    the current F_ac_ref (init on the first clip, EMA update afterwards);
    ``commit`` promotes the provisional state of the final denoising step.
    """

    def __init__(self, alpha: float = 0.1, mode: str = "memory", capture=False):
        if mode not in MODES:
            raise ValueError(f"unknown temporal mode {mode!r}; expected one of {MODES}")
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
        self.alpha, self.mode = alpha, mode
        self.state: MemoryState | None = None
        self.pending: MemoryState | None = None
        self.pending_ref = None
        self.history: list[np.ndarray] = []          # committed F_ac_ref, full-history mode
        self.capture = capture
        self.captured_refs: list[np.ndarray] = []
        self.captured_states: list[np.ndarray] = []

    def provisional(self, F_ac_ref: Tensor) -> MemoryState:
        if self.state is None:
            st = memory_init(F_ac_ref, self.alpha)
        else:
            st = memory_update(self.state, F_ac_ref)
        self.pending, self.pending_ref = st, F_ac_ref
        return st

    def commit(self):
        if self.pending is None:
            raise RuntimeError("nothing to commit; run a denoising pass first")
        st = self.pending
        self.state = MemoryState(M=st.M.detach(), alpha=st.alpha, f=st.f)
        if self.mode == "full_history":
            self.history.append(self.pending_ref.data.copy())
        if self.capture:
            self.captured_refs.append(self.pending_ref.data.copy())
            self.captured_states.append(st.M.data.copy())
        self.pending = self.pending_ref = None


# --- blocks -----------------------------------------------------------------
class MCDMBlock(Module):
    def __init__(self, d, heads, d_arch, d_motion, rng: Rng, r_features=64, feature_seed=0):
        self.norm_self = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, heads, rng.fork(1))
        self.norm_cross = LayerNorm(d)
        self.arch_attn = MultiHeadAttention(d, heads, rng.fork(2), d_kv=d_arch)
        self.pres_attn = MultiHeadAttention(d, heads, rng.fork(3), d_kv=d_motion, zero_out=True)
        self.temporal = TemporalProjection(d, heads, rng.fork(4), zero_out=True)
        self.norm_ff = LayerNorm(d)
        self.ff = FeedForward(d, rng.fork(5))
        self.feats = FavorFeatures.draw(d // heads, r_features, feature_seed)
        self.d = d

    def groups(self):
        return {"self": ["norm_self", "self_attn", "norm_ff", "ff"],
                "archived": ["norm_cross", "arch_attn"],
                "present": ["pres_attn"],
                "temporal": ["temporal"]}

    def zero_residuals(self):
        for m in (self.self_attn, self.arch_attn, self.pres_attn, self.temporal):
            m.o.weight.data[:] = 0
            m.o.bias.data[:] = 0
        self.ff.fc2.weight.data[:] = 0
        self.ff.fc2.bias.data[:] = 0

    def cross(self, Z, F_ac, F_pc):
        """Parallel cross paths. Z [..., T, s, d]; F_ac [..., T, n, d_arch]; F_pc [..., T, c, d_motion]."""
        h = self.norm_cross(Z)
        return self.arch_attn(h, context=F_ac), self.pres_attn(h, context=F_pc)

    def temporal_mix(self, F_ac_ref, F_pc_ref, mem, chunk=None):
        T = F_pc_ref.shape[-3]
        if isinstance(mem, MemoryState):
            state, mode = mem, "memory"
        elif isinstance(mem, MotionMemory):
            mode = mem.mode
            state = mem.provisional(F_ac_ref)
        else:
            raise ValueError("uninitialized memory: build one with memory_init(F_ac_ref, alpha) "
                             "or pass a MotionMemory slot per block")
        if mode == "memory":
            pos = temporal_positions(state.M.shape[-3] + T, self.d)
            return memory_temporal_attention(F_pc_ref, state, self.feats, proj=self.temporal, pos=pos,
                                             chunk=chunk)
        if mode == "plain":
            x = F_pc_ref + F_ac_ref
            return exact_temporal_attention(x, self.temporal, temporal_positions(T, self.d))
        past = [Tensor(h) for h in mem.history]
        x = tn.concat(past + [F_ac_ref, F_pc_ref], axis=-3)
        L = x.shape[-3]
        return exact_temporal_attention(x, self.temporal, temporal_positions(L, self.d), keep_last=T)

    def __call__(self, Z, F_ac, F_pc, mem, chunk=None, probe=None):
        Z = tn.as_tensor(Z)
        x = Z + self.self_attn(self.norm_self(Z))
        h = self.norm_cross(x)
        F_ac_ref = self.arch_attn(h, context=F_ac)
        # a frozen zero output projection makes a branch exactly zero; skip it while training
        F_pc_ref = None if _dead(self.pres_attn.o) else self.pres_attn(h, context=F_pc)
        x = x + F_ac_ref if F_pc_ref is None else x + F_ac_ref + F_pc_ref
        if not _dead(self.temporal.o):
            if F_pc_ref is None:
                F_pc_ref = Tensor(np.zeros(F_ac_ref.shape, dtype=F_ac_ref.dtype))
            if probe is not None:
                probe.before_temporal()
            F_m = self.temporal_mix(F_ac_ref, F_pc_ref, mem, chunk=chunk)
            if probe is not None:
                probe.after_temporal()
            x = x + F_m
        return x + self.ff(self.norm_ff(x))


def _dead(lin: Linear) -> bool:
    return (tn.grad_enabled() and not lin.weight.requires_grad
            and not lin.weight.data.any() and not lin.bias.data.any())


def mcdm_block(Z, F_ac, F_pc, mem, block: MCDMBlock):
    return block(Z, F_ac, F_pc, mem)


@dataclass
class DenoiserConfig:
    H: int = 64
    W: int = 64
    factor: int = 4
    d: int = 64
    heads: int = 4
    N: int = 4
    d_arch: int = 32
    d_motion: int = 32
    r_features: int = 64
    pos2d: bool = True
    seed: int = 0

    @property
    def s(self):
        return (self.H // self.factor) * (self.W // self.factor)

    @property
    def d_lat(self):
        return self.factor * self.factor


@dataclass
class LatentMoments:
    """Gaussian fit of clean video latents: per-position mean, covariance pooled over positions."""
    mean: np.ndarray     # [s, d_lat]
    cov: np.ndarray      # [d_lat, d_lat]

    @classmethod
    def standard(cls, s: int, d_lat: int) -> "LatentMoments":
        return cls(np.zeros((s, d_lat)), np.eye(d_lat))

    @classmethod
    def fit(cls, latents) -> "LatentMoments":
        z = np.asarray(latents, dtype=np.float64).reshape(-1, *np.shape(latents)[-2:])   # [N, s, d_lat]
        mean = z.mean(axis=0)
        x = (z - mean).reshape(-1, z.shape[-1])
        return cls(mean, x.T @ x / len(x))


class Denoiser(Module):
    def __init__(self, cfg: DenoiserConfig, sched: NoiseSchedule | None = None,
                 moments: LatentMoments | None = None):
        rng = Rng(cfg.seed, 0xDE)
        self.cfg = cfg
        # Gaussian-optimal eps skip (as in the motion prior); absent without a schedule.
        # Standard moments reduce it to sqrt(1 - abar) * z_t.
        self.skip_gain = self.skip_shift = None
        if sched is not None:
            moments = moments or LatentMoments.standard(cfg.s, cfg.d_lat)
            self.skip_gain = gaussian_eps_gain(moments.cov[None], sched)[:, 0]              # [T_steps, d, d]
            self.skip_shift = np.sqrt(sched.alpha_bar)[:, None, None] * moments.mean[None]  # [T_steps, s, d]
        self.inp = Linear(cfg.d_lat, cfg.d, rng.fork(1))
        self.t1 = Linear(cfg.d, cfg.d, rng.fork(2))
        self.t2 = Linear(cfg.d, cfg.d, rng.fork(3))
        self.blocks = [MCDMBlock(cfg.d, cfg.heads, cfg.d_arch, cfg.d_motion, rng.fork(100 + i),
                                 r_features=cfg.r_features, feature_seed=cfg.seed * 1000 + i)
                       for i in range(cfg.N)]
        self.out_norm = LayerNorm(cfg.d)
        self.out = Linear(cfg.d, cfg.d_lat, rng.fork(4), init="zero")
        self.pos = positions_2d(cfg.H // cfg.factor, cfg.W // cfg.factor, cfg.d)

    def param_groups(self) -> dict:
        """Named parameter groups used by the staged-training freeze contract."""
        groups = {"base": [], "archived": [], "present": [], "temporal": []}
        for name, p in self.named_parameters():
            if name.startswith("blocks."):
                sub = name.split(".")[2]
                if sub in ("norm_cross", "arch_attn"):
                    groups["archived"].append((name, p))
                elif sub == "pres_attn":
                    groups["present"].append((name, p))
                elif sub == "temporal":
                    groups["temporal"].append((name, p))
                else:
                    groups["base"].append((name, p))
            else:
                groups["base"].append((name, p))
        return groups

    def new_memories(self, alpha=0.1, mode="memory", capture=False):
        return [MotionMemory(alpha, mode, capture) for _ in self.blocks]

    def __call__(self, Z_t, t, F_ac, F_pc, mems, chunk=None, probe=None) -> Tensor:
        """Z_t [..., T, s, d_lat]; t scalar or [B]; returns eps_hat of the same shape."""
        Z_t = tn.as_tensor(Z_t)
        if len(mems) != len(self.blocks):
            raise ValueError(f"need one memory per block ({len(self.blocks)}), got {len(mems)}")
        x = self.inp(Z_t)
        if self.cfg.pos2d:
            x = x + Tensor(self.pos.astype(x.dtype))
        t = np.atleast_1d(np.asarray(t))
        te = self.t2(tn.silu(self.t1(Tensor(sinusoidal(t, self.cfg.d)))))     # [B|1, d]
        lead = Z_t.ndim - 3
        te = te.reshape((te.shape[0],) + (1,) * 2 + (self.cfg.d,)) if lead else te.reshape(1, 1, self.cfg.d)
        x = x + te
        for blk, mem in zip(self.blocks, mems):
            x = blk(x, F_ac, F_pc, mem, chunk=chunk, probe=probe)
        out = self.out(self.out_norm(x))
        if self.skip_gain is not None:
            K, c = self.skip_gain[t].swapaxes(-1, -2), self.skip_shift[t]
            if lead:
                K, c = K[:, None], c[:, None]
            else:
                K, c = K[0], c[0]
            out = out + tn.matmul(Z_t - Tensor(c.astype(Z_t.dtype)), Tensor(K.astype(Z_t.dtype)))
        return out


def denoiser_forward(Z_t, t, F_ac, F_pc, mems, model: Denoiser) -> Tensor:
    return model(Z_t, t, F_ac, F_pc, mems)


def generate_clip(F_ac, F_pc, mems, sched: NoiseSchedule, rng: Rng, model: Denoiser,
                  T: int = 16, chunk=64, probe=None, commit=True) -> np.ndarray:
    """Ancestral sampling of one clip latent [T, s, d_lat]; commits block memories."""
    cfg = model.cfg

    def eps(z, t, _):
        return model(z, t, F_ac, F_pc, mems, chunk=chunk, probe=probe).data

    z = ddpm_sample(eps, None, sched, (T, cfg.s, cfg.d_lat), rng)
    if commit:
        for m in mems:
            if isinstance(m, MotionMemory):
                m.commit()
    return z


# --- long-horizon loop ------------------------------------------------------
@dataclass
class RolloutTrace:
    archives: list = field(default_factory=list)      # archived window used for each clip
    clips: list = field(default_factory=list)


def long_generate(ref_frame, audio, total_frames: int, model: Denoiser, archived_prior, motion_fn,
                  sched: NoiseSchedule, rng: Rng, T: int = 16, a: int = 16, alpha: float = 0.1,
                  mode: str = "memory", ablate_archive=False, capture=False, probe=None,
                  chunk=64, trace: RolloutTrace | None = None):
    """Semi-autoregressive generation of ``total_frames`` frames.

    ``motion_fn(k, audio_window, rng)`` returns present-clip motion tokens
    [T, c, d_motion] for clip k. The archive starts as the reference frame
    repeated ``a`` times and then slides over the newest generated frames;
    with ``ablate_archive`` it stays the repeated reference throughout.
    Returns (frames [total_frames, H, W], memories).
    """
    if total_frames <= 0 or total_frames % T:
        raise ValueError(f"total_frames={total_frames} must be a positive multiple of T={T}")
    if a != T:
        raise ValueError(f"frame-aligned cross attention needs a == T, got a={a}, T={T}")
    cfg = model.cfg
    ref = np.asarray(ref_frame, dtype=tn.get_dtype())
    archive = np.repeat(ref[None], a, axis=0)
    mems = model.new_memories(alpha, mode, capture)
    out = []
    with tn.no_grad():
        for k in range(total_frames // T):
            if trace is not None:
                trace.archives.append(archive.copy())
            F_ac = archived_prior(ref, archive)
            F_pc = tn.as_tensor(motion_fn(k, audio[k * T:(k + 1) * T], rng.fork(2 * k + 1)))
            z = generate_clip(F_ac, F_pc, mems, sched, rng.fork(2 * k + 2), model, T=T, chunk=chunk,
                              probe=probe)
            frames = latent_to_frames(z, cfg.H, cfg.W, cfg.factor)
            out.append(frames)
            if trace is not None:
                trace.clips.append(frames)
            if not ablate_archive:
                archive = np.concatenate([archive, frames])[-a:]
    return np.concatenate(out), mems


# --- video files --------------------------------------------------------------
def write_video(frames, path, fps=25):
    """Directory of frame_XXXXX.mct tensors plus a one-line manifest."""
    frames = np.asarray(frames)
    os.makedirs(path, exist_ok=True)
    for i, f in enumerate(frames):
        with open(os.path.join(path, f"frame_{i:05d}.mct"), "wb") as fh:
            write_tensor_to(fh, f)
    N, H, W = frames.shape
    with open(os.path.join(path, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"frames={N} height={H} width={W} fps={fps}\n")


def read_video(path) -> tuple[np.ndarray, float]:
    man = os.path.join(path, "manifest.txt")
    try:
        with open(man, encoding="utf-8") as fh:
            fields = dict(kv.split("=", 1) for kv in fh.readline().split())
        N, H, W, fps = int(fields["frames"]), int(fields["height"]), int(fields["width"]), float(fields["fps"])
    except (OSError, KeyError, ValueError) as e:
        raise FormatError(man, f"bad video manifest ({e})") from None
    frames = np.empty((N, H, W))
    for i in range(N):
        fp = os.path.join(path, f"frame_{i:05d}.mct")
        with open(fp, "rb") as fh:
            f = read_tensor_from(fh, fp)
        if f.shape != (H, W):
            raise FormatError(fp, f"frame shape {f.shape} != manifest {H}x{W}")
        frames[i] = f
    return frames, fps


def write_video_packed(frames, path, fps=25):
    frames = np.asarray(frames)
    save_pack(path, {"frames": frames}, meta=f"frames={len(frames)} height={frames.shape[1]} "
                                             f"width={frames.shape[2]} fps={fps}")


def read_video_packed(path):
    sections, meta = load_pack(path)
    if "frames" not in sections:
        raise FormatError(path, "missing frames section")
    fields = dict(kv.split("=", 1) for kv in meta.split())
    return sections["frames"], float(fields.get("fps", 25))
