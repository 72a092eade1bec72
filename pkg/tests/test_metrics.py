import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcdm.metrics import (C1, final_quarter_mean, frame_strip, lipsync_r, pearson, read_curve_csv, read_pgm,
                          ssim, strip_indices, write_curve_csv, write_pgm)
from mcdm.tensor import Rng
from mcdm.world import make_sequence, render_track


def test_ssim_constant_frames_closed_form():
    # constant windows: variance terms vanish, leaving C1 / (1 + C1)
    assert ssim(np.zeros((64, 64)), np.ones((64, 64))) == pytest.approx(C1 / (1 + C1), rel=1e-12)
    assert ssim(np.zeros((64, 64)), np.ones((64, 64))) == pytest.approx(9.999e-5, rel=1e-4)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_ssim_identity_and_symmetry(seed):
    r = Rng(seed)
    x, y = r.uniform((16, 24)), r.uniform((16, 24))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert ssim(x, y) == ssim(y, x)
    assert -1.0 <= ssim(x, y) <= 1.0


def test_ssim_errors():
    with pytest.raises(ValueError, match="shape mismatch"):
        ssim(np.zeros((8, 8)), np.zeros((8, 9)))
    with pytest.raises(ValueError, match="window"):
        ssim(np.zeros((4, 4)), np.zeros((4, 4)))


def test_pearson():
    assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    with pytest.raises(ValueError, match="degenerate correlation"):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson([1, 2], [1, 2, 3])


def test_lipsync_on_ground_truth_video():
    for seed in range(3):
        seq = make_sequence(500 + seed, 128)
        assert lipsync_r(render_track(seq.states, seq.identity), seq.audio.envelope) >= 0.9


def test_lipsync_constant_video_is_degenerate():
    seq = make_sequence(0, 32)
    frames = np.repeat(render_track(seq.states, seq.identity)[:1], 32, axis=0)
    with pytest.raises(ValueError, match="degenerate correlation"):
        lipsync_r(frames, seq.audio.envelope)


def test_final_quarter():
    assert final_quarter_mean(np.arange(8.0)) == 6.5
    assert final_quarter_mean(np.arange(10.0)) == 8.5


def test_curve_csv_round_trip(tmp_path):
    curve = Rng(1).uniform((37,))
    p = tmp_path / "c.csv"
    write_curve_csv(p, curve)
    assert p.read_text().splitlines()[0] == "frame,ssim"
    assert np.allclose(read_curve_csv(p), curve, atol=5e-7)


def test_pgm_round_trip(tmp_path):
    img = np.round(Rng(2).uniform((10, 13)) * 255) / 255
    write_pgm(tmp_path / "a.pgm", img)
    assert np.allclose(read_pgm(tmp_path / "a.pgm"), img)
    (tmp_path / "b.pgm").write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(ValueError, match="PGM"):
        read_pgm(tmp_path / "b.pgm")


def test_strip():
    idx = strip_indices(512)
    assert idx[0] == 0 and idx[-1] == 511 and idx == sorted(set(idx))
    frames = Rng(3).uniform((4, 8, 8))
    s = frame_strip(frames, [0, 3], gap=2)
    assert s.shape == (8, 18) and np.array_equal(s[:, 10:], frames[3]) and np.all(s[:, 8:10] == 1)
