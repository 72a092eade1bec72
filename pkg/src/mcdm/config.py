"""Run configuration: defaults, `key = value` files and `--set` overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .diffusion import ConfigError


@dataclass
class RunConfig:
    stage: int = 1
    # clip geometry
    T: int = 16
    a: int = 16
    m: int = 64          # latent tokens per frame, (H/8)(W/8) at 64x64
    n: int = 16
    # widths and depths
    d: int = 32          # archived-prior and motion-token width
    L: int = 8           # prior layer pairs
    N: int = 4           # denoiser blocks
    d_model: int = 64    # denoiser width
    heads: int = 4
    factor: int = 4      # space-to-depth factor of the video latent
    r_features: int = 16
    alpha: float = 0.1
    # optimisation
    lr: float = 1e-5
    weight_decay: float = 0.01
    steps: int = 2000
    batch: int = 4
    landmark_dropout: float = 0.5
    seed: int = 0
    seeds: str = "0,1,2"
    # diffusion
    T_steps: int = 50
    beta_start: float = 1e-3
    beta_end: float = 0.25
    # data and evaluation
    n_clips: int = 256
    max_clip: int = 3
    frames: int = 512
    fps: int = 25
    data_dir: str = "data"
    out_dir: str = "runs"
    log_every: int = 100

    def seed_list(self) -> list[int]:
        return [int(s) for s in str(self.seeds).split(",") if s.strip()]

    def validate(self) -> "RunConfig":
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"stage must be 1, 2 or 3, got {self.stage}")
        positive = ("T", "a", "m", "n", "d", "L", "N", "d_model", "heads", "factor", "r_features",
                    "lr", "steps", "batch", "T_steps", "beta_start", "beta_end", "n_clips", "frames", "fps")
        for k in positive:
            if getattr(self, k) <= 0:
                raise ConfigError(f"{k} must be positive, got {getattr(self, k)}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.landmark_dropout <= 1.0:
            raise ConfigError(f"landmark_dropout must lie in [0, 1], got {self.landmark_dropout}")
        if not self.beta_start < self.beta_end < 1.0:
            raise ConfigError("need beta_start < beta_end < 1")
        if self.m != 64:
            raise ConfigError(f"m is fixed by the 64x64 frame and the stride-8 latent (64), got {self.m}")
        if self.a != self.T:
            raise ConfigError(f"frame-aligned archive needs a == T, got a={self.a}, T={self.T}")
        if self.frames % self.T:
            raise ConfigError(f"frames={self.frames} is not a multiple of T={self.T}")
        if self.d_model % self.heads or self.d % self.heads:
            raise ConfigError("widths must be divisible by heads")
        return self

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def dump(self) -> str:
        return "\n".join(f"{f.name} = {getattr(self, f.name)}" for f in fields(self)) + "\n"


def desk_preset() -> RunConfig:
    """Laptop-scale settings: larger steps, shallower prior, coarser video latent."""
    return RunConfig(lr=1e-3, L=4, factor=8)


def valid_keys() -> list[str]:
    return [f.name for f in fields(RunConfig)]


def _coerce(key: str, raw: str):
    types = {f.name: f.type for f in fields(RunConfig)}
    if key not in types:
        raise ConfigError(f"unknown key {key!r}; valid keys: {', '.join(valid_keys())}")
    raw = raw.strip()
    kind = types[key]
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_pairs(lines, source="<config>") -> dict:
    out = {}
    for no, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = _coerce(k.strip(), v)
    return out


def load_config(path=None, overrides=(), base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_pairs(fh, str(path)))
    values.update(parse_pairs(overrides, "--set"))
    return cfg.replace(**values).validate()


def overrides_summary(overrides) -> str:
    return " ".join(o.strip() for o in overrides)


__all__ = ["RunConfig", "ConfigError", "desk_preset", "load_config", "parse_pairs", "valid_keys"]
