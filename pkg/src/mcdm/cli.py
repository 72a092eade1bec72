"""Command line: data generation, staged training, inference, evaluation, benchmarks.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import ConfigError, RunConfig, desk_preset, load_config, overrides_summary

log = logging.getLogger("mcdm")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="file of `key = value` lines ('#' starts a comment)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--preset", choices=("paper", "desk"), default="paper",
                        help="base defaults before --config/--set")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="mcdm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic clip dataset to data_dir")
    t = sub.add_parser("train", parents=[common], help="run one training stage")
    t.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    i = sub.add_parser("infer", parents=[common], help="generate a long video from trained checkpoints")
    i.add_argument("--frames", type=int)
    i.add_argument("--out", help="output video directory (default out_dir/infer)")
    i.add_argument("--eval-seed", type=int, default=0)
    e = sub.add_parser("eval", parents=[common], help="drift curve or lip-sync correlation")
    e.add_argument("what", choices=("drift", "lipsync"))
    e.add_argument("--frames", type=int)
    e.add_argument("--ablate-archive", action="store_true", help="keep the archive at the repeated reference")
    b = sub.add_parser("bench", parents=[common], help="attention fidelity/speed or temporal memory")
    b.add_argument("what", choices=("attention", "memory"))
    sub.add_parser("selftest", parents=[common], help="fast invariant checks")
    return p


def _setup_logging(cfg: RunConfig | None, verbose: bool):
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    handlers = [logging.StreamHandler(sys.stderr)]
    if cfg is not None:
        os.makedirs(cfg.out_dir, exist_ok=True)
        handlers.append(logging.FileHandler(os.path.join(cfg.out_dir, "run.log"), encoding="utf-8"))
    for h in handlers:
        h.setFormatter(fmt)
        root.addHandler(h)


def _resolve_config(args) -> RunConfig:
    base = desk_preset() if args.preset == "desk" else RunConfig()
    return load_config(args.config, args.set, base=base)


def _cmd_gen_data(cfg: RunConfig, args):
    from .world import make_dataset, write_dataset
    clips = make_dataset(cfg.n_clips, cfg.seed, cfg.T, cfg.a, cfg.max_clip)
    write_dataset(clips, cfg.data_dir, params=f"seed={cfg.seed} T={cfg.T} a={cfg.a}")
    print(f"wrote {len(clips)} clips to {cfg.data_dir}")


def _load_clips(cfg):
    from .train import StageError
    from .world import read_dataset
    if not os.path.isdir(cfg.data_dir):
        raise StageError(f"missing dataset directory {cfg.data_dir}; run `mcdm gen-data` first")
    return read_dataset(cfg.data_dir)


def _cmd_train(cfg: RunConfig, args):
    from . import train
    cfg = cfg.replace(stage=args.stage)
    if args.stage == 3:
        for s in (1, 2):
            if not os.path.exists(train.checkpoint_path(cfg, s)):
                raise train.StageError(f"stage 3 needs the stage-{s} checkpoint {train.checkpoint_path(cfg, s)}")
    clips = _load_clips(cfg)
    pipe = train.Pipeline.build(cfg)
    fn = {1: train.train_stage1, 2: train.train_stage2, 3: train.train_stage3}[args.stage]
    res = fn(pipe, clips)
    n = min(100, len(res.losses))
    log.info("stage %d done: first-%d median %.5f, last-%d median %.5f, changed groups %s",
             args.stage, n, _median(res.losses[:n]), n, _median(res.losses[-n:]), sorted(res.changed()))
    print(f"checkpoint {res.path}")


def _median(xs):
    import numpy as np
    return float(np.median(xs))


def _cmd_infer(cfg: RunConfig, args):
    from .denoiser import write_video
    from .evaluate import rollout
    from .train import load_trained
    pipe = load_trained(cfg)
    frames = args.frames or cfg.frames
    gen, _ = rollout(pipe, args.eval_seed, frames, guided=False)
    out = args.out or os.path.join(cfg.out_dir, "infer")
    write_video(gen, out, fps=cfg.fps)
    print(f"wrote {len(gen)} frames to {out}")


def _cmd_eval(cfg: RunConfig, args):
    from .evaluate import eval_drift, eval_lipsync
    from .train import load_trained
    pipe = load_trained(cfg)
    if args.what == "drift":
        for seed in cfg.seed_list():
            tag = "drift_noarchive" if args.ablate_archive else "drift"
            res = eval_drift(pipe, args.frames, seed, ablate_archive=args.ablate_archive,
                             out_dir=cfg.out_dir, tag=tag)
            print(f"seed={seed} {res.summary()} csv={res.csv_path} strip={res.strip_path}")
    else:
        for seed in cfg.seed_list():
            print(f"seed={seed} lipsync_r={eval_lipsync(pipe, args.frames, seed):.4f}")


def _cmd_bench(cfg: RunConfig, args):
    from . import bench
    if args.what == "attention":
        print(bench.format_attention(bench.bench_attention()))
    else:
        print(bench.format_memory(bench.bench_memory(cfg=cfg)))


def _cmd_selftest(cfg, args):
    from .selftest import run
    if not run():
        raise RuntimeError("selftest failed")


COMMANDS = {"gen-data": _cmd_gen_data, "train": _cmd_train, "infer": _cmd_infer,
            "eval": _cmd_eval, "bench": _cmd_bench, "selftest": _cmd_selftest}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _resolve_config(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: cannot read config: {e}", file=sys.stderr)
        return EXIT_USAGE
    _setup_logging(cfg if args.cmd not in ("selftest", "bench") else None, args.verbose)
    log.info("command %s; config %s; overrides: %s", args.cmd, args.config or "<defaults>",
             overrides_summary(args.set) or "none")
    if args.set:
        keys = [o.split("=", 1)[0].strip() for o in args.set]
        log.info("effective: %s", " ".join(f"{k}={getattr(cfg, k)}" for k in keys))
    log.debug("resolved config:\n%s", cfg.dump())
    try:
        COMMANDS[args.cmd](cfg, args)
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as e:  # runtime failures map to exit 2
        log.error("%s: %s", type(e).__name__, e)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
