import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcdm import tensor as tn
from mcdm.attention import MemoryState
from mcdm.config import desk_preset
from mcdm.denoiser import (Denoiser, DenoiserConfig, LatentMoments, MCDMBlock, RolloutTrace, denoiser_forward, depth_to_space,
                           frames_to_latent, generate_clip, latent_to_frames, long_generate, mcdm_block,
                           read_video, read_video_packed, space_to_depth, write_video, write_video_packed)
from mcdm.diffusion import make_schedule
from mcdm.io import FormatError
from mcdm.tensor import Rng, Tensor, grad_check
from mcdm.train import Pipeline
from mcdm.world import make_sequence


# --- latent --------------------------------------------------------------------------
@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([2, 4, 8]), st.integers(0, 2 ** 31 - 1))
def test_space_to_depth_round_trip(gh, gw, f, seed):
    x = Rng(seed).normal((3, gh * f, gw * f))
    assert np.array_equal(depth_to_space(space_to_depth(x, f), gh * f, gw * f, f), x)


def test_space_to_depth_layout():
    assert np.all(space_to_depth(np.full((8, 8), 0.3)) == 0.3)
    x = np.zeros((8, 8))
    x[5, 2] = 1.0
    z = space_to_depth(x, 4)
    # token = row_block * (W / 4) + col_block, channel = dy * 4 + dx
    assert z.shape == (4, 16) and z.sum() == 1.0 and z[1 * 2 + 0, 1 * 4 + 2] == 1.0
    with pytest.raises(ValueError, match="divisible"):
        space_to_depth(np.zeros((6, 8)), 4)
    with pytest.raises(ValueError):
        depth_to_space(z, 8, 12, 4)


def test_latent_frames_round_trip():
    f = np.round(Rng(1).uniform((2, 8, 8)) * 255) / 255
    with tn.precision("float64"):
        assert np.allclose(latent_to_frames(frames_to_latent(f), 8, 8), f, atol=1e-12)


# --- block -------------------------------------------------------------------------------
def _np_ln(x, ln):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * ln.weight.data + ln.bias.data


def _np_mha(x, ctx, m):
    h = m.heads
    q, k, v = x @ m.q.weight.data, ctx @ m.k.weight.data, ctx @ m.v.weight.data
    sp = lambda t: np.moveaxis(t.reshape(*t.shape[:-1], h, -1), -2, -3)
    s = sp(q) @ np.swapaxes(sp(k), -1, -2) / np.sqrt(q.shape[-1] // h)
    w = np.exp(s - s.max(-1, keepdims=True))
    o = (w / w.sum(-1, keepdims=True)) @ sp(v)
    o = np.moveaxis(o, -3, -2).reshape(*x.shape[:-1], -1)
    return o @ m.o.weight.data + m.o.bias.data


def _np_favor(q, k, v, omega):
    s = q.shape[-1] ** -0.25
    phi = lambda x: np.exp((x * s) @ omega.T - ((x * s) ** 2).sum(-1, keepdims=True) / 2)
    qf, kf = phi(q), phi(k)
    return (qf @ (kf.T @ v)) / (qf @ kf.sum(0))[:, None]


def _np_block(Z, F_ac, F_pc, M, blk):
    from mcdm.attention import temporal_positions
    x = Z + _np_mha(_np_ln(Z, blk.norm_self), _np_ln(Z, blk.norm_self), blk.self_attn)
    h = _np_ln(x, blk.norm_cross)
    ac, pc = _np_mha(h, F_ac, blk.arch_attn), _np_mha(h, F_pc, blk.pres_attn)
    x = x + ac + pc
    a, T = M.shape[0], Z.shape[0]
    seq = np.concatenate([M, pc]) + temporal_positions(a + T, blk.d)[:, None, :]
    tp = blk.temporal
    out = np.zeros_like(pc)
    dh = blk.d // tp.heads
    for s in range(Z.shape[1]):
        hs = _np_ln(seq[:, s], tp.norm)
        q, k, v = hs @ tp.q.weight.data, hs @ tp.k.weight.data, hs @ tp.v.weight.data
        o = np.concatenate([_np_favor(q[:, i * dh:(i + 1) * dh], k[:, i * dh:(i + 1) * dh],
                                      v[:, i * dh:(i + 1) * dh], blk.feats.omega) for i in range(tp.heads)], 1)
        out[:, s] = (o @ tp.o.weight.data + tp.o.bias.data)[a:]
    x = x + out
    hf = _np_ln(x, blk.norm_ff)
    u = hf @ blk.ff.fc1.weight.data + blk.ff.fc1.bias.data
    g = 0.5 * u * (1 + np.tanh(np.sqrt(2 / np.pi) * (u + 0.044715 * u ** 3)))
    return x + g @ blk.ff.fc2.weight.data + blk.ff.fc2.bias.data


def _block(seed=0):
    blk = MCDMBlock(8, 2, 8, 8, Rng(seed), r_features=16, feature_seed=seed)
    for m in (blk.pres_attn, blk.temporal):       # zero-initialised outputs; make them do something
        m.o.weight.data = Rng(seed, 9).normal(m.o.weight.shape, scale=0.5)
    return blk


def _block_inputs(seed=1, T=2, s=4):
    r = Rng(seed)
    return r.normal((T, s, 8)), r.normal((T, 3, 8)), r.normal((T, 2, 8)), r.normal((T, s, 8))


def test_mcdm_block_composition_oracle(f64):
    blk = _block()
    Z, F_ac, F_pc, M = _block_inputs()
    with tn.no_grad():
        got = mcdm_block(Z, F_ac, F_pc, MemoryState(Tensor(M), 0.1, 1), blk).data
    assert np.abs(got - _np_block(Z, F_ac, F_pc, M, blk)).max() < 1e-6


def test_mcdm_block_zero_residuals():
    blk = _block()
    blk.zero_residuals()
    Z, F_ac, F_pc, M = _block_inputs()
    assert np.array_equal(blk(Z, F_ac, F_pc, MemoryState(Tensor(M), 0.1, 1)).data, Z.astype(np.float32))


def test_mcdm_block_spatial_permutation(f64):
    blk = _block()
    Z, F_ac, F_pc, M = _block_inputs(T=2, s=5)
    perm = [3, 0, 4, 1, 2]
    base = blk(Z, F_ac, F_pc, MemoryState(Tensor(M), 0.1, 1)).data
    out = blk(Z[:, perm], F_ac[:, ::-1], F_pc, MemoryState(Tensor(M[:, perm]), 0.1, 1)).data
    assert np.allclose(out, base[:, perm], atol=1e-10)


def test_mcdm_block_needs_memory():
    blk = _block()
    Z, F_ac, F_pc, _ = _block_inputs()
    with pytest.raises(ValueError, match="memory_init"):
        blk(Z, F_ac, F_pc, None)


def test_mcdm_block_grad(f64):
    blk = _block()
    Z, F_ac, F_pc, M = _block_inputs()
    Z, F_ac, F_pc = (Tensor(v, requires_grad=True) for v in (Z, F_ac, F_pc))
    params = [blk.self_attn.q.weight, blk.arch_attn.k.weight, blk.pres_attn.v.weight, blk.temporal.q.weight,
              blk.temporal.o.weight, blk.ff.fc1.weight]
    f = lambda Z, F_ac, F_pc, *ps: blk(Z, F_ac, F_pc, MemoryState(Tensor(M), 0.1, 1))
    assert grad_check(f, [Z, F_ac, F_pc] + params, max_coords=24) < 1e-4


# --- denoiser -------------------------------------------------------------------------------
def _tiny(seed=0, N=2, sched=None):
    d = Denoiser(DenoiserConfig(H=8, W=8, factor=4, d=8, heads=2, N=N, d_arch=8, d_motion=8,
                                r_features=16, seed=seed), sched=sched)
    for blk in d.blocks:
        blk.pres_attn.o.weight.data = Rng(seed, 7).normal(blk.pres_attn.o.weight.shape, scale=0.3)
        blk.temporal.o.weight.data = Rng(seed, 8).normal(blk.temporal.o.weight.shape, scale=0.3)
    d.out.weight.data = Rng(seed, 9).normal(d.out.weight.shape, scale=0.3)
    return d


@pytest.mark.parametrize("T", [1, 2, 3])
def test_denoiser_shapes(T):
    model = _tiny()
    r = Rng(T)
    Z = r.normal((T, 4, 16))
    out = denoiser_forward(Z, 3, r.normal((T, 3, 8)), r.normal((T, 2, 8)), model.new_memories(), model)
    assert out.shape == Z.shape
    Zb = r.normal((2, T, 4, 16))
    out = model(Zb, np.array([1, 4]), r.normal((2, T, 3, 8)), r.normal((2, T, 2, 8)), model.new_memories())
    assert out.shape == Zb.shape
    with pytest.raises(ValueError, match="one memory per block"):
        model(Z, 3, r.normal((T, 3, 8)), r.normal((T, 2, 8)), model.new_memories()[:1])


def test_denoiser_grad(f64):
    model = _tiny(sched=make_schedule(10, 1e-3, 0.25))
    r = Rng(3)
    Z, F_ac, F_pc = (Tensor(r.normal(s), requires_grad=True) for s in ((2, 4, 16), (2, 3, 8), (2, 2, 8)))
    params = [model.inp.weight, model.t1.weight, model.blocks[0].temporal.v.weight,
              model.blocks[1].arch_attn.q.weight, model.out.weight]
    f = lambda Z, F_ac, F_pc, *ps: model(Z, 5, F_ac, F_pc, model.new_memories())
    assert grad_check(f, [Z, F_ac, F_pc] + params, max_coords=24) < 1e-4


def test_denoiser_deterministic():
    r = Rng(4)
    Z, F_ac, F_pc = r.normal((2, 4, 16)), r.normal((2, 3, 8)), r.normal((2, 2, 8))
    outs = [m(Z, 2, F_ac, F_pc, m.new_memories()).data.tobytes() for m in (_tiny(), _tiny())]
    assert outs[0] == outs[1]


def test_latent_moments_fit(f64):
    z = Rng(10).normal((50, 4, 3)) * np.array([1.0, 2.0, 0.5]) + 0.3
    m = LatentMoments.fit(z)
    assert np.allclose(m.mean, z.mean(0))
    x = (z - z.mean(0)).reshape(-1, 3)
    assert np.allclose(m.cov, np.cov(x.T, bias=True))


@pytest.mark.parametrize("standard", [True, False])
def test_untrained_output_is_gaussian_posterior_eps(standard, f64):
    # with the output projection at zero the network reduces to the analytic skip
    sched = make_schedule(10, 1e-3, 0.25)
    r = Rng(11)
    A = r.normal((16, 16)) * 0.3
    mom = None if standard else LatentMoments(r.normal((4, 16)) * 0.5, A @ A.T + 0.05 * np.eye(16))
    model = Denoiser(DenoiserConfig(H=8, W=8, factor=4, d=8, heads=2, N=1, d_arch=8, d_motion=8,
                                    r_features=16), sched=sched, moments=mom)
    mom = mom or LatentMoments.standard(4, 16)
    Z = r.normal((2, 3, 4, 16))
    t = np.array([2, 7])
    out = model(Z, t, r.normal((2, 3, 3, 8)), r.normal((2, 3, 2, 8)), model.new_memories()).data
    for b in range(2):
        ab = sched.alpha_bar[t[b]]
        C = ab * mom.cov + (1 - ab) * np.eye(16)
        want = np.sqrt(1 - ab) * np.linalg.solve(C, (Z[b] - np.sqrt(ab) * mom.mean).reshape(-1, 16).T).T
        assert np.allclose(out[b], want.reshape(3, 4, 16), atol=1e-10)
    single = model(Z[0], 2, r.normal((3, 3, 8)), r.normal((3, 2, 8)), model.new_memories()).data
    assert np.allclose(single, out[0], atol=1e-10)


class _Oracle:
    """Analytic eps for a single fixed latent x0."""

    def __init__(self, x0, sched):
        self.x0, self.sched = x0, sched
        self.cfg = DenoiserConfig(H=8, W=8, factor=4)

    def __call__(self, z, t, *args, **kw):
        ab = self.sched.alpha_bar[t]
        return Tensor((z - np.sqrt(ab) * self.x0) / np.sqrt(1 - ab))


def test_generate_clip_oracle_recovers_target(f64):
    sched = make_schedule(50, 1e-3, 0.25)
    x0 = Rng(5).uniform((2, 4, 16)) * 2 - 1
    z = generate_clip(None, None, [], sched, Rng(6), _Oracle(x0, sched), T=2)
    assert np.abs(z - x0).max() < 1e-3
    frames = latent_to_frames(z, 8, 8)
    assert np.all(np.isfinite(frames)) and frames.min() >= 0 and frames.max() <= 1


def test_generate_clip_deterministic():
    model = _tiny(sched=make_schedule(4, 1e-3, 0.25))
    r = Rng(7)
    F_ac, F_pc = r.normal((2, 3, 8)), r.normal((2, 2, 8))
    a = generate_clip(F_ac, F_pc, model.new_memories(), make_schedule(4, 1e-3, 0.25), Rng(8), model, T=2)
    b = generate_clip(F_ac, F_pc, model.new_memories(), make_schedule(4, 1e-3, 0.25), Rng(8), model, T=2)
    assert a.tobytes() == b.tobytes()


# --- long-horizon loop ------------------------------------------------------------------------
@pytest.fixture(scope="module")
def small_pipe():
    cfg = desk_preset().replace(N=2, T_steps=2, T=4, a=4, frames=16)
    pipe = Pipeline.build(cfg)
    for blk in pipe.denoiser.blocks:
        blk.temporal.o.weight.data = Rng(1, 3).normal(blk.temporal.o.weight.shape, scale=0.1)
    return pipe


def _run(pipe, frames, alpha=0.1, ablate=False, mode="memory", trace=None):
    seq = make_sequence(3, frames)
    fn = pipe.motion_fn(seq.ref_frame(), sample=False, gt_states=seq.states)
    return long_generate(seq.ref_frame(), seq.audio.features, frames, pipe.denoiser, pipe.archived, fn,
                         make_schedule(2, 1e-3, 0.25), Rng(0), T=4, a=4, alpha=alpha, mode=mode,
                         ablate_archive=ablate, capture=True, trace=trace), seq


def test_long_generate_single_clip(small_pipe):
    (out, mems), _ = _run(small_pipe, 4)
    assert out.shape == (4, 64, 64)
    for m in mems:
        assert m.state.f == 1 and len(m.captured_states) == 1
        assert np.array_equal(m.captured_states[0], m.captured_refs[0])


def test_long_generate_frame_count_and_errors(small_pipe):
    (out, _), _ = _run(small_pipe, 12)
    assert out.shape == (12, 64, 64) and np.all((out >= 0) & (out <= 1))
    with pytest.raises(ValueError, match="multiple"):
        _run(small_pipe, 10)


def test_memory_recurrence_closed_form(small_pipe):
    (_, mems), _ = _run(small_pipe, 16, alpha=0.3)
    a = 0.3
    for m in mems:
        refs = [r.astype(np.float64) for r in m.captured_refs]
        for f in range(1, len(refs) + 1):
            closed = a ** (f - 1) * refs[0] + sum((1 - a) * a ** (f - j) * refs[j - 1] for j in range(2, f + 1))
            assert np.abs(m.captured_states[f - 1] - closed).max() < 1e-5


def test_alpha_one_freezes_memory(small_pipe):
    (_, mems), _ = _run(small_pipe, 12, alpha=1.0)
    for m in mems:
        assert all(np.array_equal(s, m.captured_states[0]) for s in m.captured_states)


def test_sliding_archive(small_pipe):
    trace = RolloutTrace()
    (out, _), seq = _run(small_pipe, 12, trace=trace)
    ref = seq.ref_frame().astype(np.float32)
    assert np.array_equal(trace.archives[0], np.repeat(ref[None], 4, axis=0))
    for k in (1, 2):
        assert np.array_equal(trace.archives[k], out[(k - 1) * 4:k * 4].astype(np.float32))
    trace = RolloutTrace()
    _run(small_pipe, 12, ablate=True, trace=trace)
    assert all(np.array_equal(a, trace.archives[0]) for a in trace.archives)


def test_long_generate_rejects_unaligned_archive(small_pipe):
    seq = make_sequence(3, 8)
    with pytest.raises(ValueError, match="a == T"):
        long_generate(seq.ref_frame(), seq.audio.features, 8, small_pipe.denoiser, small_pipe.archived,
                      None, make_schedule(2, 1e-3, 0.25), Rng(0), T=4, a=8)


# --- video files -------------------------------------------------------------------------------------
def test_video_round_trip(tmp_path):
    frames = Rng(9).uniform((5, 16, 16))
    write_video(frames, tmp_path / "v", fps=25)
    got, fps = read_video(tmp_path / "v")
    assert fps == 25 and np.array_equal(got, frames)
    assert (tmp_path / "v" / "manifest.txt").read_text() == "frames=5 height=16 width=16 fps=25\n"
    write_video_packed(frames, tmp_path / "v.mctp")
    got, fps = read_video_packed(tmp_path / "v.mctp")
    assert fps == 25 and np.array_equal(got, frames)


def test_video_bad_manifest(tmp_path):
    write_video(np.zeros((2, 8, 8)), tmp_path / "v")
    (tmp_path / "v" / "manifest.txt").write_text("frames=2 height=8\n")
    with pytest.raises(FormatError, match="manifest"):
        read_video(tmp_path / "v")
