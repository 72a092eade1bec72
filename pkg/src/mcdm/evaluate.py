"""Long-rollout drift and video lip-sync evaluation of a trained pipeline."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .denoiser import long_generate
from .metrics import final_quarter_mean, frame_strip, lipsync_r, ssim, strip_indices, write_curve_csv, write_pgm
from .tensor import Rng
from .world import make_sequence, render_track

# held-out sequences start well clear of the training seeds
EVAL_SEED_BASE = 1_000_003


@dataclass
class DriftResult:
    curve: np.ndarray        # per-frame SSIM
    frames: np.ndarray       # generated
    truth: np.ndarray        # ground-truth renders
    csv_path: str | None = None
    strip_path: str | None = None

    @property
    def final_quarter(self) -> float:
        return final_quarter_mean(self.curve)

    @property
    def mean(self) -> float:
        return float(self.curve.mean())

    def summary(self) -> str:
        return (f"frames={len(self.curve)} mean_ssim={self.mean:.4f} "
                f"final_quarter_ssim={self.final_quarter:.4f}")


def rollout(pipe, seed: int, frames: int, alpha=None, ablate_archive=False, guided=True,
            sample=True, mode="memory"):
    """Generate ``frames`` frames for held-out sequence ``seed``; returns (generated, sequence)."""
    cfg = pipe.cfg
    seq = make_sequence(EVAL_SEED_BASE + seed, frames)
    ref = seq.ref_frame()
    head = seq.states.head() if guided else None
    motion = pipe.motion_fn(ref, head_track=head, sample=sample, gt_states=seq.states)
    out, _ = long_generate(ref, seq.audio.features, frames, pipe.denoiser, pipe.archived, motion,
                           pipe.sched, Rng(seed, 0xE7A1), T=cfg.T, a=cfg.a,
                           alpha=cfg.alpha if alpha is None else alpha, mode=mode,
                           ablate_archive=ablate_archive)
    return out, seq


def eval_drift(pipe, frames=None, seed=0, alpha=None, ablate_archive=False, out_dir=None,
               tag="drift") -> DriftResult:
    """SSIM of every generated frame against the render of its ground-truth motion.

    The prior samples lip and expression with the true head track as landmark
    guidance, so drift measures the video model rather than head-pose luck.
    """
    frames = frames or pipe.cfg.frames
    gen, seq = rollout(pipe, seed, frames, alpha=alpha, ablate_archive=ablate_archive)
    truth = render_track(seq.states, seq.identity)
    curve = np.array([ssim(g, t) for g, t in zip(gen, truth)])
    res = DriftResult(curve, gen, truth)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        res.csv_path = os.path.join(out_dir, f"{tag}_seed{seed}.csv")
        write_curve_csv(res.csv_path, curve)
        idx = strip_indices(frames)
        res.strip_path = os.path.join(out_dir, f"{tag}_seed{seed}.pgm")
        write_pgm(res.strip_path, np.concatenate([frame_strip(gen, idx), frame_strip(truth, idx)]))
    return res


def eval_lipsync(pipe, frames=None, seed=0, lag: int = 1) -> float:
    """Pearson r of extracted mouth openness against the lagged audio envelope.

    Unguided: the prior samples head, lip and expression from audio alone.
    Raises ValueError("degenerate correlation ...") when either series is constant.
    """
    frames = frames or 4 * pipe.cfg.T
    gen, seq = rollout(pipe, seed, frames, guided=False)
    return lipsync_r(gen, seq.audio.envelope, lag=lag)
