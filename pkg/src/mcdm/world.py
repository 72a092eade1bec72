"""Procedural talking-avatar world: audio, motion, renderer, dataset files.

Mouth openness follows the audio envelope with a one-frame lag, head pose is
a bounded random walk, and the expression is a piecewise-constant draw from
eight basis vectors. Frames are 64x64 grayscale in [0, 1].
"""
from __future__ import annotations

import functools
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import FormatError, load_pack, save_pack
from .tensor import Rng

H = W = 64
N_EXPR = 8
AUDIO_K = 8
YAW_LIM, PITCH_LIM = 0.5, 0.3

# brow (angle, raise in px) for each expression basis vector
_BROWS = np.array([(0.0, 0.0), (0.35, 0.0), (-0.35, 0.0), (0.0, 2.5),
                   (0.0, -2.0), (0.35, 2.0), (-0.35, -1.5), (0.18, 1.0)])
# dark-pixel window used for mouth openness; covers every pose in range
MOUTH_ROWS = slice(33, 52)
MOUTH_COLS = slice(18, 47)
_DARK_HI, _DARK_LO = 0.35, 0.15


@dataclass
class MotionState:
    yaw: float
    pitch: float
    mouth_open: float
    expr: np.ndarray

    def validate(self):
        if not (-YAW_LIM <= self.yaw <= YAW_LIM and -PITCH_LIM <= self.pitch <= PITCH_LIM
                and 0.0 <= self.mouth_open <= 1.0):
            raise ValueError(f"motion state out of range: {self}")
        e = np.asarray(self.expr)
        if e.shape != (N_EXPR,) or np.any(e < 0) or abs(e.sum() - 1.0) > 1e-6:
            raise ValueError("expr must be 8 nonnegative weights summing to 1")

    @classmethod
    def neutral(cls):
        e = np.zeros(N_EXPR)
        e[0] = 1.0
        return cls(0.0, 0.0, 0.0, e)


@dataclass
class MotionTrack:
    """Column-wise storage of a sequence of MotionState."""
    yaw: np.ndarray
    pitch: np.ndarray
    mouth_open: np.ndarray
    expr: np.ndarray  # [T, 8]

    def __len__(self):
        return len(self.yaw)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return MotionTrack(self.yaw[i], self.pitch[i], self.mouth_open[i], self.expr[i])
        return MotionState(float(self.yaw[i]), float(self.pitch[i]),
                           float(self.mouth_open[i]), self.expr[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def from_states(cls, states):
        states = list(states)
        return cls(np.array([s.yaw for s in states]), np.array([s.pitch for s in states]),
                   np.array([s.mouth_open for s in states]), np.stack([s.expr for s in states]))

    def head(self) -> np.ndarray:
        return np.stack([self.yaw, self.pitch], axis=-1)


@dataclass
class AudioTrack:
    envelope: np.ndarray   # [T]
    features: np.ndarray   # [T, k]

    def __len__(self):
        return len(self.envelope)

    def __getitem__(self, i: slice):
        return AudioTrack(self.envelope[i], self.features[i])


def band_features(envelope: np.ndarray, k: int = AUDIO_K) -> np.ndarray:
    """Envelope plus k-1 envelope-modulated carriers at fixed frequencies."""
    t = np.arange(len(envelope))
    cols = [envelope]
    for j in range(1, k):
        cols.append(envelope * np.sin(2 * np.pi * (0.07 * j) * t + 0.5 * j))
    return np.stack(cols, axis=-1)


def synth_audio(T: int, rng: Rng, k: int = AUDIO_K) -> AudioTrack:
    """Window-5 moving average of uniform noise, stretched about 0.5 and clamped."""
    if T < 1:
        raise ValueError("T must be >= 1")
    u = rng.uniform((T + 4,)).astype(np.float64)
    ma = np.convolve(u, np.ones(5) / 5.0, mode="valid")
    env = np.clip(0.5 + 1.4 * (ma - 0.5), 0.0, 1.0)
    return AudioTrack(env, band_features(env, k))


def synth_motion(audio: AudioTrack, rng: Rng, mean_segment: float = 32.0,
                 start: MotionState | None = None) -> MotionTrack:
    """mouth[t] = env[t-1] (mouth[0] = env[0] unless ``start`` is given)."""
    env = np.asarray(audio.envelope, dtype=np.float64)
    T = len(env)
    mouth = np.empty(T)
    mouth[1:] = np.clip(env[:-1], 0.0, 1.0)
    mouth[0] = np.clip(env[0], 0.0, 1.0) if start is None else start.mouth_open

    def walk(lim, step, first):
        out = np.empty(T)
        x = first
        steps = rng.normal((T,)).astype(np.float64) * step
        for t in range(T):
            if t > 0:
                x = x + steps[t]
                if x > lim:
                    x = 2 * lim - x
                if x < -lim:
                    x = -2 * lim - x
            out[t] = x
        return out

    y0 = rng.uniform(()) * YAW_LIM - YAW_LIM / 2 if start is None else start.yaw
    p0 = rng.uniform(()) * PITCH_LIM - PITCH_LIM / 2 if start is None else start.pitch
    yaw = walk(YAW_LIM, 0.03, float(y0))
    pitch = walk(PITCH_LIM, 0.02, float(p0))
    expr = np.zeros((T, N_EXPR))
    cur = int(rng.integers(N_EXPR)) if start is None else int(np.argmax(start.expr))
    switches = rng.uniform((T,))
    for t in range(T):
        if t > 0 and switches[t] < 1.0 / mean_segment:
            cur = int(rng.integers(N_EXPR))
        expr[t, cur] = 1.0
    return MotionTrack(yaw, pitch, mouth, expr)


@dataclass(frozen=True)
class Identity:
    seed: int
    background: float
    skin: float
    face_rx: float
    face_ry: float
    eye_dx: float
    eye_r: float
    hair: float

    @classmethod
    def from_seed(cls, seed: int) -> "Identity":
        u = Rng(seed, 0x1D).uniform((7,)).astype(np.float64)
        return cls(seed=seed, background=0.85 + 0.1 * u[0], skin=0.55 + 0.17 * u[1],
                   face_rx=17.0 + 3.0 * u[2], face_ry=21.0 + 3.0 * u[3],
                   eye_dx=6.5 + 1.5 * u[4], eye_r=1.8 + 0.6 * u[5], hair=0.38 + 0.12 * u[6])


_YY, _XX = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5


def _ellipse_alpha(cx, cy, rx, ry):
    r = np.sqrt(((_XX - cx) / rx) ** 2 + ((_YY - cy) / ry) ** 2)
    return np.clip(0.5 - (r - 1.0) * min(rx, ry), 0.0, 1.0)


def _segment_alpha(x0, y0, x1, y1, half_width):
    dx, dy = x1 - x0, y1 - y0
    t = np.clip(((_XX - x0) * dx + (_YY - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    dist = np.hypot(_XX - (x0 + t * dx), _YY - (y0 + t * dy))
    return np.clip(0.5 - (dist - half_width), 0.0, 1.0)


def _paint(img, alpha, shade):
    img *= 1.0 - alpha
    img += alpha * shade


def face_center(state: MotionState):
    return 32.0 + 12.0 * state.yaw, 31.0 + 10.0 * state.pitch


def mouth_box(state: MotionState) -> tuple[slice, slice]:
    """Rows/cols bounding the fully open mouth for this pose."""
    cx, cy = face_center(state)
    my = cy + 11.0
    return (slice(int(np.floor(my - 5.0)), int(np.ceil(my + 5.0))),
            slice(int(np.floor(cx - 7.0)), int(np.ceil(cx + 7.0))))


def render_avatar(state: MotionState, identity) -> np.ndarray:
    """Pure raster of one frame; ``identity`` is a seed or an Identity."""
    ident = identity if isinstance(identity, Identity) else Identity.from_seed(int(identity))
    cx, cy = face_center(state)
    img = np.full((H, W), ident.background)
    _paint(img, _ellipse_alpha(cx, cy - 6.0, ident.face_rx + 1.5, ident.face_ry - 3.0), ident.hair)
    _paint(img, _ellipse_alpha(cx, cy, ident.face_rx, ident.face_ry), ident.skin)
    ey = cy - 5.0
    for side in (-1.0, 1.0):
        _paint(img, _ellipse_alpha(cx + side * ident.eye_dx, ey, ident.eye_r, ident.eye_r), 0.08)
    angle, lift = np.asarray(state.expr, dtype=np.float64) @ _BROWS
    by = ey - 4.0 - lift
    for side in (-1.0, 1.0):
        bx = cx + side * ident.eye_dx
        tilt = side * angle * 3.0
        _paint(img, _segment_alpha(bx - 3.0, by + tilt, bx + 3.0, by - tilt, 0.7), 0.3)
    mh = 0.6 + 4.4 * float(state.mouth_open)
    _paint(img, _ellipse_alpha(cx, cy + 11.0, 7.0, mh), 0.05)
    return np.clip(img, 0.0, 1.0)


def render_track(track: MotionTrack, identity) -> np.ndarray:
    return np.stack([render_avatar(s, identity) for s in track])


def _dark_ratio(frame) -> float:
    region = np.asarray(frame, dtype=np.float64)[MOUTH_ROWS, MOUTH_COLS]
    dark = np.clip((_DARK_HI - region) / (_DARK_HI - _DARK_LO), 0.0, 1.0)
    return float(dark.mean())


@functools.lru_cache(maxsize=1)
def _mouth_calibration():
    ident = Identity(seed=0, background=0.9, skin=0.63, face_rx=18.5, face_ry=22.5,
                     eye_dx=7.0, eye_r=2.1, hair=0.44)
    s = MotionState.neutral()
    lo = _dark_ratio(render_avatar(s, ident))
    s.mouth_open = 1.0
    hi = _dark_ratio(render_avatar(s, ident))
    return lo, hi


def extract_mouth_openness(frame) -> float:
    """Soft dark-pixel ratio in the fixed mouth window, rescaled to [0, 1].

    Pixels at or below 0.15 count fully, at or above 0.35 not at all; the
    ratio is mapped affinely so a closed and a fully open neutral mouth give
    0 and 1.
    """
    lo, hi = _mouth_calibration()
    return float(np.clip((_dark_ratio(frame) - lo) / (hi - lo), 0.0, 1.0))


# --- clips & datasets -----------------------------------------------------
@dataclass
class ClipBatch:
    ref_frame: np.ndarray          # [H, W]
    archived_frames: np.ndarray    # [a, H, W]
    target_frames: np.ndarray      # [T, H, W]
    audio: AudioTrack              # T frames
    states: MotionTrack            # T frames
    landmarks: np.ndarray | None   # [T, 2] head pose track
    meta: dict = field(default_factory=dict)


@dataclass
class Sequence:
    identity: int
    audio: AudioTrack
    states: MotionTrack

    @property
    def ref_state(self) -> MotionState:
        return self.states[0]

    def ref_frame(self) -> np.ndarray:
        return render_avatar(self.ref_state, self.identity)


def make_sequence(seed: int, n_frames: int, identity: int | None = None) -> Sequence:
    rng = Rng(seed, 0x5E)
    ident = int(rng.integers(2**31)) if identity is None else identity
    audio = synth_audio(n_frames, rng.fork(1))
    states = synth_motion(audio, rng.fork(2))
    return Sequence(ident, audio, states)


def make_clip(seed: int, clip_index: int, T: int = 16, a: int = 16, landmarks=True) -> ClipBatch:
    """Clip ``clip_index`` of a fresh sequence; clip 0 gets a reference-filled archive."""
    seq = make_sequence(seed, (clip_index + 1) * T)
    ref = seq.ref_frame()
    start = clip_index * T
    target_states = seq.states[start:start + T]
    target = render_track(target_states, seq.identity)
    if start == 0:
        archived = np.repeat(ref[None], a, axis=0)
    else:
        lo = max(0, start - a)
        hist = render_track(seq.states[lo:start], seq.identity)
        if len(hist) < a:
            hist = np.concatenate([np.repeat(ref[None], a - len(hist), axis=0), hist])
        archived = hist
    return ClipBatch(ref_frame=ref, archived_frames=archived, target_frames=target,
                     audio=seq.audio[start:start + T], states=target_states,
                     landmarks=target_states.head() if landmarks else None,
                     meta={"seed": seed, "identity": seq.identity, "clip": clip_index})


def make_dataset(n_clips: int, seed: int = 0, T: int = 16, a: int = 16, max_clip: int = 3):
    rng = Rng(seed, 0xDA7A)
    clips = []
    for i in range(n_clips):
        clip_seed = int(rng.integers(2**40))
        k = int(rng.integers(max_clip + 1))
        clips.append(make_clip(clip_seed, k, T, a))
    return clips


_MANIFEST = "manifest.txt"


def write_dataset(clips, path, params: str = "") -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"# mcdm-dataset v1 H={H} W={W} {params}".rstrip()]
    for i, c in enumerate(clips):
        sections = {
            "ref_frame": c.ref_frame,
            "archived_frames": c.archived_frames,
            "target_frames": c.target_frames,
            "audio_envelope": c.audio.envelope,
            "audio_features": c.audio.features,
            "yaw": c.states.yaw,
            "pitch": c.states.pitch,
            "mouth_open": c.states.mouth_open,
            "expr": c.states.expr,
        }
        if c.landmarks is not None:
            sections["landmarks"] = c.landmarks
        save_pack(path / f"clip_{i:05d}.mct", {k: np.asarray(v, dtype=np.float64) for k, v in sections.items()})
        m = c.meta
        lines.append(f"id={i} archived={len(c.archived_frames)} target={len(c.target_frames)} "
                     f"seed={m.get('seed', -1)} identity={m.get('identity', -1)} clip={m.get('clip', -1)}")
    tmp = path / (_MANIFEST + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path / _MANIFEST)


def _validate_clip(sec: dict, source):
    for name, arr in sec.items():
        if not np.all(np.isfinite(arr)):
            raise FormatError(source, f"non-finite values in {name}")
    for name in ("ref_frame", "archived_frames", "target_frames", "audio_envelope", "mouth_open"):
        arr = sec[name]
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise FormatError(source, f"{name} outside [0, 1]")
    if np.abs(sec["yaw"]).max() > YAW_LIM + 1e-9 or np.abs(sec["pitch"]).max() > PITCH_LIM + 1e-9:
        raise FormatError(source, "head pose outside documented range")
    e = sec["expr"]
    if e.min() < 0 or np.abs(e.sum(axis=-1) - 1.0).max() > 1e-6:
        raise FormatError(source, "expression weights not on the simplex")


def read_dataset(path) -> list:
    path = Path(path)
    manifest = path / _MANIFEST
    if not manifest.exists():
        raise FormatError(manifest, "missing manifest")
    lines = [ln for ln in manifest.read_text(encoding="utf-8").splitlines() if ln and not ln.startswith("#")]
    clips = []
    for ln in lines:
        fields = dict(kv.split("=", 1) for kv in ln.split())
        i = int(fields["id"])
        fname = path / f"clip_{i:05d}.mct"
        sec, _ = load_pack(fname)
        required = {"ref_frame", "archived_frames", "target_frames", "audio_envelope", "audio_features",
                    "yaw", "pitch", "mouth_open", "expr"}
        if not required <= set(sec):
            raise FormatError(fname, f"missing sections {sorted(required - set(sec))}")
        if len(sec["archived_frames"]) != int(fields["archived"]) or len(sec["target_frames"]) != int(fields["target"]):
            raise FormatError(fname, "frame counts disagree with manifest")
        _validate_clip(sec, fname)
        clips.append(ClipBatch(
            ref_frame=sec["ref_frame"], archived_frames=sec["archived_frames"],
            target_frames=sec["target_frames"],
            audio=AudioTrack(sec["audio_envelope"], sec["audio_features"]),
            states=MotionTrack(sec["yaw"], sec["pitch"], sec["mouth_open"], sec["expr"]),
            landmarks=sec.get("landmarks"),
            meta={"seed": int(fields.get("seed", -1)), "identity": int(fields.get("identity", -1)),
                  "clip": int(fields.get("clip", -1))}))
    return clips
