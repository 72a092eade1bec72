"""Archived-clip prior: frozen latent encoder, learnable patchify, frame-aligned attention."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .attention import FrameAlignedParams, frame_aligned_attention
from .nn import Linear, Module
from .tensor import Rng, Tensor

LATENT_CHANNELS = 4
LATENT_STRIDE = 8


@dataclass
class ArchivedClip:
    ref_frame: np.ndarray   # [H, W]
    frames: np.ndarray      # [a, H, W]

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ValueError("empty archived clip")
        if self.frames.shape[1:] != self.ref_frame.shape:
            raise ValueError(f"archived frames {self.frames.shape} differ from reference {self.ref_frame.shape}")

    @property
    def a(self):
        return len(self.frames)


class LatentEncoder:
    """Fixed random 8x8 stride-8 convolution to 4 channels. Never trained."""

    def __init__(self, seed: int = 1234):
        w = Rng(seed, 0x1A7).normal((LATENT_CHANNELS, LATENT_STRIDE * LATENT_STRIDE)).astype(np.float64)
        self.kernel = (w / LATENT_STRIDE).astype(np.float32)
        self.bias = Rng(seed, 0x1A8).normal((LATENT_CHANNELS,)).astype(np.float32) * 0.1

    def __call__(self, frames) -> Tensor:
        """[..., h, w] -> [..., 4, h/8, w/8]."""
        x = np.asarray(frames, dtype=tn.get_dtype())
        h, w = x.shape[-2:]
        if h % LATENT_STRIDE or w % LATENT_STRIDE:
            raise ValueError(f"frame size {h}x{w} not divisible by {LATENT_STRIDE}")
        gh, gw = h // LATENT_STRIDE, w // LATENT_STRIDE
        lead = x.shape[:-2]
        patches = x.reshape(*lead, gh, LATENT_STRIDE, gw, LATENT_STRIDE)
        patches = np.moveaxis(patches, -3, -2).reshape(*lead, gh, gw, LATENT_STRIDE * LATENT_STRIDE)
        out = patches @ self.kernel.T.astype(x.dtype) + self.bias.astype(x.dtype)   # [..., gh, gw, 4]
        return Tensor(np.moveaxis(out, -1, -3).copy())


def latent_encode(frames, encoder: LatentEncoder | None = None) -> Tensor:
    return (encoder or _default_encoder())(frames)


_ENC = None


def _default_encoder():
    global _ENC
    if _ENC is None:
        _ENC = LatentEncoder()
    return _ENC


class Patchify(Module):
    """1x1 convolution from 4 latent channels to d, then row-major flatten."""

    def __init__(self, d, rng: Rng, identity=False):
        self.proj = Linear(LATENT_CHANNELS, d, rng)
        if identity:
            if d != LATENT_CHANNELS:
                raise ValueError("identity patchify needs d == 4")
            self.proj.weight.data = np.eye(d, dtype=self.proj.weight.dtype)

    def __call__(self, latents) -> Tensor:
        latents = tn.as_tensor(latents)
        *lead, c, gh, gw = latents.shape
        tokens = latents.reshape(*lead, c, gh * gw).swapaxes(-1, -2)   # token = row * gw + col
        return self.proj(tokens)


def patchify(latents, layer: Patchify) -> Tensor:
    return layer(latents)


class ArchivedPrior(Module):
    def __init__(self, d, n, rng: Rng, encoder_seed: int = 1234):
        self.encoder = LatentEncoder(encoder_seed)
        self.patch = Patchify(d, rng.fork(1))
        self.attn = FrameAlignedParams(n, d, rng.fork(2))

    def tokens(self, frames) -> Tensor:
        return self.patch(self.encoder(frames))

    def __call__(self, ref_frame, frames, return_weights=False):
        """ref_frame [b, H, W] or [H, W]; frames [b, a, H, W] or [a, H, W] -> F_ac [b?, a, n, d]."""
        ref = np.asarray(ref_frame)
        frames = np.asarray(frames)
        unbatched = frames.ndim == 3
        if unbatched:
            ref, frames = ref[None], frames[None]
        if frames.shape[1] == 0:
            raise ValueError("empty archived clip")
        F_x = self.tokens(ref[:, None])          # [b, 1, m, d]
        F_a = self.tokens(frames)                 # [b, a, m, d]
        res = frame_aligned_attention(F_x, F_a, self.attn, return_weights=return_weights)
        if unbatched:
            if return_weights:
                return res[0][0], res[1][0]
            return res[0]
        return res


def archived_prior(clip: ArchivedClip, model: ArchivedPrior) -> Tensor:
    return model(clip.ref_frame, clip.frames)
