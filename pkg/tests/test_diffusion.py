import numpy as np
import pytest

from mcdm import tensor as tn
from mcdm.diffusion import ConfigError, ddpm_sample, eps_loss, make_schedule, q_sample, q_sample_batch
from mcdm.tensor import Rng, Tensor, grad_check


def test_schedule_small_example():
    s = make_schedule(2, 0.1, 0.2)
    assert np.allclose(s.alpha_bar, [0.9, 0.72])
    assert s.T_steps == 2


def test_schedule_invariants():
    s = make_schedule(50, 1e-3, 0.25)
    assert s.alpha_bar[0] == pytest.approx(1 - 1e-3)
    assert np.all(np.diff(s.beta) > 0) and np.all(np.diff(s.alpha_bar) < 0)
    assert np.all(s.posterior_var >= 0) and s.posterior_var[0] == 0


def test_default_schedule_tail():
    # direct product evaluation: prod(1 - linspace(1e-4, 0.02, 1000)) ~ 4.0e-5
    s = make_schedule()
    assert s.alpha_bar[999] < 0.01
    assert s.alpha_bar[999] == pytest.approx(np.prod(1 - np.linspace(1e-4, 0.02, 1000)))


@pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)])
def test_schedule_bounds(args):
    with pytest.raises(ConfigError):
        make_schedule(*args)


def _sched_with_alpha_bar(ab):
    s = make_schedule(4, 0.1, 0.2)
    s.alpha_bar.setflags(write=True)
    s.alpha_bar[1] = ab
    return s


def test_q_sample_arithmetic():
    s = _sched_with_alpha_bar(0.25)
    assert q_sample(np.array([2.0]), 1, np.array([1.0]), s).item() == pytest.approx(1.8660, abs=1e-4)
    s1 = _sched_with_alpha_bar(1.0)
    assert q_sample(np.array([2.0]), 1, np.array([5.0]), s1).item() == pytest.approx(2.0)


def test_q_sample_errors():
    s = make_schedule(10, 1e-3, 0.2)
    with pytest.raises(IndexError):
        q_sample(np.zeros(3), 10, np.zeros(3), s)
    with pytest.raises(ValueError, match="shape"):
        q_sample(np.zeros(3), 1, np.zeros(4), s)


def test_q_sample_variance():
    s = make_schedule(50, 1e-3, 0.25)
    eps = Rng(1).normal((10_000,)).astype(np.float64)
    t = 20
    z = q_sample(np.zeros(10_000), t, eps, s).data
    assert z.var() == pytest.approx(1 - s.alpha_bar[t], rel=0.05)


def test_q_sample_batch_matches_scalar():
    s = make_schedule(50, 1e-3, 0.25)
    rng = Rng(2)
    z0, eps = rng.normal((3, 4)), rng.normal((3, 4))
    t = np.array([0, 17, 49])
    got = q_sample_batch(z0, t, eps, s)
    for i in range(3):
        assert np.allclose(got[i], q_sample(z0[i], int(t[i]), eps[i], s).data, atol=1e-6)


def test_correlation_with_z0_decreases():
    s = make_schedule(50, 1e-3, 0.25)
    rng = Rng(3)
    z0 = rng.normal((1000,)).astype(np.float64)
    corr = [np.corrcoef(z0, q_sample(z0, t, rng.normal((1000,)), s).data)[0, 1] for t in (0, 10, 25, 49)]
    assert all(a > b for a, b in zip(corr, corr[1:])), corr


def test_eps_loss():
    assert eps_loss(np.ones(3), np.ones(3)).item() == 0.0
    assert eps_loss(np.zeros(2), np.ones(2)).item() == 1.0
    with pytest.raises(ValueError):
        eps_loss(np.zeros(2), np.zeros(3))


def test_eps_loss_grad(f64):
    rng = Rng(4)
    eps = rng.normal((5, 3))
    eh = Tensor(rng.normal((5, 3)), requires_grad=True)
    assert grad_check(lambda e: eps_loss(eps, e), [eh]) < 1e-4


def _oracle(z0):
    def model(z, t, cond):
        ab = cond.alpha_bar[t]
        return (z - np.sqrt(ab) * z0) / np.sqrt(1 - ab)
    return model


def _recon_err(T_steps, seed=0):
    s = make_schedule(T_steps, 1e-3, 0.25 * 50 / T_steps if T_steps > 50 else 0.25)
    with tn.precision("float64"):
        z0 = Rng(9).normal((4, 8))
        out = ddpm_sample(_oracle(z0), s, s, z0.shape, Rng(seed))
    return float(np.abs(out - z0).max())


def test_ddpm_analytic_oracle_reconstructs():
    assert _recon_err(50) < 1e-3


def test_ddpm_error_shrinks_with_steps():
    # the final step of an exact oracle lands on z0 whatever T is, so the errors
    # are round-off; non-increasing is asserted up to that floor
    errs = [_recon_err(T, seed=1) for T in (10, 50, 200)]
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:])), errs
    assert max(errs) < 1e-9


def test_ddpm_deterministic():
    s = make_schedule(20, 1e-3, 0.25)
    m = lambda z, t, c: 0.3 * z
    a = ddpm_sample(m, None, s, (3, 5), Rng(5))
    b = ddpm_sample(m, None, s, (3, 5), Rng(5))
    assert a.tobytes() == b.tobytes()


def test_ddpm_zero_model_variance_recursion():
    s = make_schedule(50, 1e-3, 0.25)
    var = 1.0
    for t in range(49, -1, -1):
        var = var / s.alpha[t] + (s.posterior_var[t] if t > 0 else 0.0)
    out = ddpm_sample(lambda z, t, c: np.zeros_like(z), None, s, (20_000,), Rng(6))
    assert out.astype(np.float64).var() == pytest.approx(var, rel=0.05)


def test_ddpm_nan_aborts_with_step():
    s = make_schedule(10, 1e-3, 0.25)

    def bad(z, t, c):
        return np.full_like(z, np.nan) if t == 6 else np.zeros_like(z)
    with pytest.raises(FloatingPointError, match="step 6"):
        ddpm_sample(bad, None, s, (2,), Rng(0))
