"""Three-stage training with hash-verified parameter freezing."""
from __future__ import annotations

import functools
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .archived import ArchivedPrior
from .config import RunConfig
from .denoiser import Denoiser, DenoiserConfig, LatentMoments, frames_to_latent
from .diffusion import eps_loss, make_schedule, q_sample_batch
from .io import FormatError, load_pack, save_pack
from .nn import AdamW, group_hash
from .prior import PriorNet, PriorTrainLog, encode_motion_ground_truth, train_prior
from .tensor import Rng, Tensor

log = logging.getLogger(__name__)

STAGE_TRAINABLE = {
    1: ("archived_prior", "denoiser_base", "denoiser_archived"),
    2: ("prior",),
    3: ("denoiser_present", "denoiser_temporal"),
}


class StageError(RuntimeError):
    pass


class FreezeViolation(AssertionError):
    pass


@functools.lru_cache(maxsize=4)
def latent_moments(factor: int, n_clips: int = 64, seed: int = 0x5EED) -> LatentMoments:
    """Moments of the video latent over a fixed synthetic sample, independent of the run seed."""
    from .world import make_dataset
    frames = np.concatenate([c.target_frames for c in make_dataset(n_clips, seed)])
    with tn.precision("float64"):
        return LatentMoments.fit(frames_to_latent(frames, factor))


@dataclass
class Pipeline:
    cfg: RunConfig
    archived: ArchivedPrior
    denoiser: Denoiser
    prior: PriorNet

    @classmethod
    def build(cls, cfg: RunConfig) -> "Pipeline":
        sched = make_schedule(cfg.T_steps, cfg.beta_start, cfg.beta_end)
        dcfg = DenoiserConfig(factor=cfg.factor, d=cfg.d_model, heads=cfg.heads, N=cfg.N,
                              d_arch=cfg.d, d_motion=cfg.d, r_features=cfg.r_features, seed=cfg.seed)
        return cls(cfg=cfg,
                   archived=ArchivedPrior(cfg.d, cfg.n, Rng(cfg.seed, 0xA2)),
                   denoiser=Denoiser(dcfg, sched=sched, moments=latent_moments(cfg.factor)),
                   prior=PriorNet(d=cfg.d, L=cfg.L, heads=cfg.heads, seed=cfg.seed, sched=sched))

    @property
    def sched(self):
        return make_schedule(self.cfg.T_steps, self.cfg.beta_start, self.cfg.beta_end)

    def groups(self) -> dict:
        dg = self.denoiser.param_groups()
        return {"archived_prior": list(self.archived.named_parameters("archived.")),
                "denoiser_base": [("denoiser." + n, p) for n, p in dg["base"]],
                "denoiser_archived": [("denoiser." + n, p) for n, p in dg["archived"]],
                "denoiser_present": [("denoiser." + n, p) for n, p in dg["present"]],
                "denoiser_temporal": [("denoiser." + n, p) for n, p in dg["temporal"]],
                "prior": list(self.prior.named_parameters("prior."))}

    def hashes(self) -> dict:
        return {k: group_hash(v) for k, v in self.groups().items()}

    def params_of(self, names) -> list:
        g = self.groups()
        return [p for k in names for _, p in g[k]]

    def state(self, modules=("archived", "denoiser", "prior")) -> dict:
        out = {}
        for mod in modules:
            out.update({f"{mod}.{k}": v for k, v in getattr(self, mod).state_dict().items()})
        return out

    def load_state(self, sections: dict, modules):
        for mod in modules:
            prefix = mod + "."
            sub = {k[len(prefix):]: v for k, v in sections.items() if k.startswith(prefix)}
            getattr(self, mod).load_state_dict(sub)

    # motion tokens for the present clip during generation
    def motion_fn(self, ref_frame, head_track=None, sample=True, gt_states=None):
        """Closure for long_generate: clip k -> tokens [T, 3, d]."""
        T = self.cfg.T
        from .prior import sample_motion

        def fn(k, audio_window, rng):
            if not sample:
                return encode_motion_ground_truth(gt_states[k * T:(k + 1) * T], self.prior.embedder).all_streams()
            lm = None if head_track is None else head_track[None, k * T:(k + 1) * T]
            with tn.no_grad():
                cond = self.prior.condition(audio_window[None], np.asarray(ref_frame)[None], lm)
                tok = sample_motion(self.prior, cond, self.sched, rng, head_pose=lm)
            return tok.all_streams()[0]
        return fn


# --- checkpoints -------------------------------------------------------------------
STAGE_MODULES = {1: ("archived", "denoiser"), 2: ("prior",), 3: ("archived", "denoiser")}


def checkpoint_path(cfg: RunConfig, stage: int) -> str:
    return os.path.join(cfg.out_dir, f"stage{stage}.mct")


def save_checkpoint(pipe: Pipeline, stage: int, path=None) -> str:
    path = path or checkpoint_path(pipe.cfg, stage)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    meta = f"stage={stage} " + " ".join(f"{k}={v}" for k, v in pipe.hashes().items())
    save_pack(path, pipe.state(STAGE_MODULES[stage]), meta=meta)
    return path


def load_checkpoint(pipe: Pipeline, stage: int, path=None) -> None:
    path = path or checkpoint_path(pipe.cfg, stage)
    if not os.path.exists(path):
        raise StageError(f"missing stage-{stage} checkpoint {path}")
    sections, meta = load_pack(path)
    if f"stage={stage}" not in meta.split():
        raise FormatError(path, f"not a stage-{stage} checkpoint")
    try:
        pipe.load_state(sections, STAGE_MODULES[stage])
    except (KeyError, ValueError) as e:
        raise FormatError(path, str(e)) from None


def load_trained(cfg: RunConfig) -> Pipeline:
    pipe = Pipeline.build(cfg)
    load_checkpoint(pipe, 3)
    load_checkpoint(pipe, 2)
    return pipe


# --- data -----------------------------------------------------------------------------
@dataclass
class VideoBatchData:
    ref: np.ndarray        # [N, H, W]
    archive: np.ndarray    # [N, a, H, W]
    target: np.ndarray     # [N, T, s, d_lat]
    motion: np.ndarray     # [N, T, 3, d]

    @classmethod
    def from_clips(cls, clips, pipe: Pipeline):
        if not clips:
            raise StageError("empty dataset")
        dt = tn.get_dtype()
        f = pipe.cfg.factor
        return cls(ref=np.stack([c.ref_frame for c in clips]).astype(dt),
                   archive=np.stack([c.archived_frames for c in clips]).astype(dt),
                   target=np.stack([frames_to_latent(c.target_frames, f) for c in clips]).astype(dt),
                   motion=np.stack([encode_motion_ground_truth(c.states, pipe.prior.embedder).all_streams()
                                    for c in clips]))


def video_loss(pipe: Pipeline, data: VideoBatchData, idx, rng: Rng) -> Tensor:
    sched = pipe.sched
    z0 = data.target[idx]
    t = rng.integers(0, sched.T_steps, size=len(idx))
    eps = rng.normal(z0.shape)
    zt = q_sample_batch(z0, t, eps, sched)
    F_ac = pipe.archived(data.ref[idx], data.archive[idx])
    mems = pipe.denoiser.new_memories(pipe.cfg.alpha)
    return eps_loss(eps, pipe.denoiser(zt, t, F_ac, Tensor(data.motion[idx]), mems))


@dataclass
class StageResult:
    stage: int
    losses: list
    hashes_before: dict
    hashes_after: dict
    path: str | None = None
    extra: dict = field(default_factory=dict)

    def changed(self):
        return {k for k in self.hashes_before if self.hashes_before[k] != self.hashes_after[k]}


def verify_freeze(stage: int, before: dict, after: dict):
    trainable = set(STAGE_TRAINABLE[stage])
    for k in before:
        if k not in trainable and before[k] != after[k]:
            raise FreezeViolation(f"stage {stage}: frozen group {k} changed")


class _LossLog:
    def __init__(self, path, every):
        self.fh = open(path, "w", encoding="utf-8") if path else None
        self.every, self.t0 = every, time.time()

    def __call__(self, step, loss):
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}")
        if self.fh:
            self.fh.write(f"{step} {loss:.6f} {time.time() - self.t0:.2f}\n")
        if self.every and step % self.every == 0:
            log.info("%d %.5f %.1f", step, loss, time.time() - self.t0)

    def close(self):
        if self.fh:
            self.fh.close()


def _set_trainable(pipe: Pipeline, stage: int):
    for k, params in pipe.groups().items():
        for _, p in params:
            p.requires_grad = k in STAGE_TRAINABLE[stage]


def _train_video(pipe: Pipeline, clips, stage: int, steps: int, log_path=None) -> list:
    cfg = pipe.cfg
    data = VideoBatchData.from_clips(clips, pipe)
    _set_trainable(pipe, stage)
    opt = AdamW(pipe.params_of(STAGE_TRAINABLE[stage]), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = Rng(cfg.seed, 0x5700 + stage)
    losses, logger = [], _LossLog(log_path, cfg.log_every)
    try:
        for step in range(steps):
            idx = rng.integers(0, len(data.ref), size=cfg.batch)
            opt.zero_grad()
            loss = video_loss(pipe, data, idx, rng)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            logger(step, losses[-1])
    finally:
        logger.close()
    return losses


def train_stage1(pipe: Pipeline, clips, steps=None, save=True) -> StageResult:
    """Archived prior and the denoiser's self/archived path; present and temporal stay put."""
    before = pipe.hashes()
    losses = _train_video(pipe, clips, 1, steps or pipe.cfg.steps, _log_path(pipe.cfg, 1, save))
    after = pipe.hashes()
    verify_freeze(1, before, after)
    return StageResult(1, losses, before, after, save_checkpoint(pipe, 1) if save else None)


def train_stage2(pipe: Pipeline, clips, steps=None, save=True) -> StageResult:
    """Present-clip motion prior with whole-clip landmark dropout."""
    cfg = pipe.cfg
    before = pipe.hashes()
    _set_trainable(pipe, 2)
    trace = PriorTrainLog()
    logger = _LossLog(_log_path(cfg, 2, save), cfg.log_every)
    try:
        train_prior(pipe.prior, clips, pipe.sched, steps or cfg.steps, batch=cfg.batch, lr=cfg.lr,
                    weight_decay=cfg.weight_decay, landmark_dropout=cfg.landmark_dropout,
                    seed=cfg.seed, params=pipe.params_of(STAGE_TRAINABLE[2]), trace=trace,
                    log_every=0, on_step=logger)
    finally:
        logger.close()
    after = pipe.hashes()
    verify_freeze(2, before, after)
    return StageResult(2, trace.losses, before, after, save_checkpoint(pipe, 2) if save else None,
                       extra={"trace": trace})


def train_stage3(pipe: Pipeline, clips, steps=None, save=True, require_checkpoints=True) -> StageResult:
    """Present-clip cross attention and memory-temporal attention only."""
    cfg = pipe.cfg
    if require_checkpoints:
        missing = [s for s in (1, 2) if not os.path.exists(checkpoint_path(cfg, s))]
        if missing:
            raise StageError("stage 3 needs the stage-1 and stage-2 checkpoints; missing: "
                             + ", ".join(checkpoint_path(cfg, s) for s in missing))
        load_checkpoint(pipe, 1)
        load_checkpoint(pipe, 2)
    before = pipe.hashes()
    losses = _train_video(pipe, clips, 3, steps or cfg.steps, _log_path(cfg, 3, save))
    after = pipe.hashes()
    verify_freeze(3, before, after)
    return StageResult(3, losses, before, after, save_checkpoint(pipe, 3) if save else None)


def _log_path(cfg, stage, save):
    if not save:
        return None
    os.makedirs(cfg.out_dir, exist_ok=True)
    return os.path.join(cfg.out_dir, f"stage{stage}.log")


def train_all(cfg: RunConfig, clips, steps=None) -> tuple[Pipeline, list]:
    pipe = Pipeline.build(cfg)
    results = [train_stage1(pipe, clips, steps), train_stage2(pipe, clips, steps),
               train_stage3(pipe, clips, steps)]
    return pipe, results
