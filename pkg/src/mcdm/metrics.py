"""Evaluation: SSIM, lip-sync correlation, drift curves, frame strips."""
from __future__ import annotations

import csv
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .world import extract_mouth_openness

SSIM_WIN, SSIM_STRIDE = 8, 4
C1, C2 = 0.01 ** 2, 0.03 ** 2


def ssim(x, y) -> float:
    """Mean SSIM over 8x8 windows taken every 4 pixels (uniform weights)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    if x.shape[0] < SSIM_WIN or x.shape[1] < SSIM_WIN:
        raise ValueError(f"ssim: frame {x.shape} smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    wx = sliding_window_view(x, (SSIM_WIN, SSIM_WIN))[::SSIM_STRIDE, ::SSIM_STRIDE]
    wy = sliding_window_view(y, (SSIM_WIN, SSIM_WIN))[::SSIM_STRIDE, ::SSIM_STRIDE]
    mx, my = wx.mean(axis=(-2, -1)), wy.mean(axis=(-2, -1))
    dx = wx - mx[..., None, None]
    dy = wy - my[..., None, None]
    vx, vy = (dx * dx).mean(axis=(-2, -1)), (dy * dy).mean(axis=(-2, -1))
    cov = (dx * dy).mean(axis=(-2, -1))
    s = ((2 * mx * my + C1) * (2 * cov + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
    return float(s.mean())


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape or x.size < 2:
        raise ValueError(f"pearson: need two equal-length series, got {x.shape} and {y.shape}")
    if np.ptp(x) == 0 or np.ptp(y) == 0:   # centring a constant can leave round-off residue
        raise ValueError("degenerate correlation: constant series")
    xc, yc = x - x.mean(), y - y.mean()
    den = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if den == 0:
        raise ValueError("degenerate correlation: constant series")
    return float((xc * yc).sum() / den)


def lipsync_r(frames, envelope, lag: int = 1) -> float:
    """Pearson r between extracted mouth openness at t and the envelope at t - lag."""
    mouth = np.array([extract_mouth_openness(f) for f in frames])
    env = np.asarray(envelope)
    return pearson(mouth[lag:], env[:len(mouth) - lag])


def final_quarter_mean(curve) -> float:
    curve = np.asarray(curve)
    return float(curve[len(curve) - len(curve) // 4:].mean())


# --- outputs ------------------------------------------------------------------
def write_curve_csv(path, curve, header=("frame", "ssim")):
    tmp = str(path) + ".tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, v in enumerate(curve):
            w.writerow([i, f"{v:.6f}"])
    os.replace(tmp, path)


def read_curve_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([float(r[1]) for r in rows])


def frame_strip(frames, indices, gap: int = 2) -> np.ndarray:
    frames = np.asarray(frames)
    H, W = frames.shape[1:]
    strip = np.ones((H, len(indices) * (W + gap) - gap))
    for j, i in enumerate(indices):
        strip[:, j * (W + gap): j * (W + gap) + W] = frames[i]
    return strip


def write_pgm(path, image) -> None:
    """8-bit binary PGM."""
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w) / 255.0


def strip_indices(n_frames: int, count: int = 6) -> list[int]:
    """Roughly log-spaced sample points, always including the last frame."""
    pts = np.unique(np.round(np.geomspace(1, n_frames, count)).astype(int) - 1)
    return [int(p) for p in pts]
