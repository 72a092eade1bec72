"""Attention fidelity/speed and temporal-sublayer memory benchmarks."""
from __future__ import annotations

import time
import tracemalloc

import numpy as np

from . import tensor as tn
from .attention import FavorFeatures, fast_attention, sdpa
from .tensor import Rng


def rel_error(approx, exact) -> float:
    return float(np.linalg.norm(approx - exact) / np.linalg.norm(exact))


def attention_error(r: int, d: int = 16, L: int = 64, seed: int = 0) -> float:
    """Relative Frobenius error of fast attention against exact attention on N(0,1) inputs."""
    rng = Rng(seed, 0xBE)
    q, k, v = (rng.normal((L, d)).astype(np.float64) for _ in range(3))
    with tn.precision("float64"), tn.no_grad():
        feats = FavorFeatures.draw(d, r, seed)
        exact = sdpa(q, k, v).data
        approx = fast_attention(q, k, v, feats).data
    return rel_error(approx, exact)


def bench_attention(rs=(16, 64, 256, 1024), Ls=(64, 256, 1024), d=16, L=64, seeds=10, r_time=64):
    errors = [(r, float(np.median([attention_error(r, d, L, s) for s in range(seeds)]))) for r in rs]
    timing = []
    feats = FavorFeatures.draw(d, r_time, 0)
    for n in Ls:
        rng = Rng(n, 0xB7)
        q, k, v = (rng.normal((n, d)) for _ in range(3))
        with tn.no_grad():
            t0 = time.perf_counter()
            sdpa(q, k, v)
            t1 = time.perf_counter()
            fast_attention(q, k, v, feats, chunk=64)
            t2 = time.perf_counter()
        timing.append((n, (t1 - t0) * 1e3, (t2 - t1) * 1e3))
    return {"error": errors, "time": timing}


def format_attention(res) -> str:
    lines = ["r\tmedian_rel_err"]
    lines += [f"{r}\t{e:.4f}" for r, e in res["error"]]
    lines += ["", "L\texact_ms\tfast_ms"]
    lines += [f"{n}\t{a:.2f}\t{b:.2f}" for n, a, b in res["time"]]
    return "\n".join(lines)


class PeakProbe:
    """Largest traced allocation growth between before_temporal/after_temporal calls."""

    def __init__(self):
        self.peak = 0
        self._base = 0

    def before_temporal(self):
        tracemalloc.reset_peak()
        self._base = tracemalloc.get_traced_memory()[0]

    def after_temporal(self):
        self.peak = max(self.peak, tracemalloc.get_traced_memory()[1] - self._base)


def temporal_peak_bytes(total_frames: int, mode: str, cfg=None, seed: int = 0) -> int:
    """Peak temporal-sublayer activation bytes over a long_generate rollout.

    Uses an untrained pipeline and a two-step schedule: the peak depends on
    tensor shapes, not on weights or on the number of denoising steps.
    """
    from .config import desk_preset
    from .denoiser import long_generate
    from .diffusion import make_schedule
    from .train import Pipeline
    from .world import make_sequence

    cfg = (cfg or desk_preset()).replace(seed=seed, N=1, T_steps=2)
    pipe = Pipeline.build(cfg)
    seq = make_sequence(seed, total_frames)
    sched = make_schedule(2, cfg.beta_start, cfg.beta_end)
    probe = PeakProbe()
    started = tracemalloc.is_tracing()
    if not started:
        tracemalloc.start()
    try:
        long_generate(seq.ref_frame(), seq.audio.features, total_frames, pipe.denoiser, pipe.archived,
                      pipe.motion_fn(seq.ref_frame(), sample=False, gt_states=seq.states), sched,
                      Rng(seed, 0x3E), T=cfg.T, a=cfg.a, alpha=cfg.alpha, mode=mode, probe=probe)
    finally:
        if not started:
            tracemalloc.stop()
    return probe.peak


def bench_memory(frames=(16, 128, 512), modes=("memory", "full_history"), cfg=None):
    return [(n, mode, temporal_peak_bytes(n, mode, cfg)) for mode in modes for n in frames]


def format_memory(rows) -> str:
    return "\n".join(["frames\tmode\tpeak_bytes"] + [f"{n}\t{m}\t{b}" for n, m, b in rows])
