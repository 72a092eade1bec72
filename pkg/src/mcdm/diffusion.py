"""Linear-beta DDPM: schedule, forward corruption, eps loss, ancestral sampler."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .tensor import Rng, Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    @property
    def T_steps(self) -> int:
        return len(self.beta)


def make_schedule(T_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T_steps < 2:
        raise ConfigError(f"T_steps must be >= 2, got {T_steps}")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T_steps, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = beta * (1.0 - prev) / (1.0 - alpha_bar)
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar, posterior_var=posterior_var)


def _check_t(t, sched):
    if not 0 <= int(t) < sched.T_steps:
        raise IndexError(f"timestep {t} outside [0, {sched.T_steps})")


def q_sample(z0, t: int, eps, sched: NoiseSchedule) -> Tensor:
    """sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    _check_t(t, sched)
    z0, eps = tn.as_tensor(z0), tn.as_tensor(eps)
    if z0.shape != eps.shape:
        raise ValueError(f"q_sample: eps shape {eps.shape} != z0 shape {z0.shape}")
    ab = sched.alpha_bar[int(t)]
    return z0 * float(np.sqrt(ab)) + eps * float(np.sqrt(1.0 - ab))


def q_sample_batch(z0: np.ndarray, t: np.ndarray, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Per-sample timesteps along axis 0."""
    ab = sched.alpha_bar[t].reshape((-1,) + (1,) * (z0.ndim - 1))
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(z0.dtype)


def eps_loss(eps, eps_hat) -> Tensor:
    eps, eps_hat = tn.as_tensor(eps), tn.as_tensor(eps_hat)
    if eps.shape != eps_hat.shape:
        raise ValueError(f"eps_loss: shape mismatch {eps.shape} vs {eps_hat.shape}")
    diff = eps_hat - eps
    return (diff * diff).mean()


EpsModel = Callable[[np.ndarray, int, object], np.ndarray]


def ddpm_sample(model: EpsModel, cond, sched: NoiseSchedule, shape, rng: Rng,
                z_init: np.ndarray | None = None, on_step=None) -> np.ndarray:
    """Ancestral sampling from t = T-1 down to 0.

    ``model(z_t, t, cond)`` returns eps_hat as an array or Tensor. No noise is
    added at the final step. ``on_step(t, z_t, eps_hat)`` is an optional hook.
    """
    z = rng.normal(tuple(shape)) if z_init is None else np.array(z_init, dtype=tn.get_dtype())
    with tn.no_grad():
        for t in range(sched.T_steps - 1, -1, -1):
            eps_hat = model(z, t, cond)
            eps_hat = getattr(eps_hat, "data", eps_hat)
            if not np.all(np.isfinite(eps_hat)):
                raise FloatingPointError(f"non-finite eps prediction at step {t}")
            if on_step is not None:
                on_step(t, z, eps_hat)
            beta, alpha, ab = sched.beta[t], sched.alpha[t], sched.alpha_bar[t]
            mean = (z - (beta / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(alpha)
            if t > 0:
                mean = mean + np.sqrt(sched.posterior_var[t]) * rng.normal(z.shape)
            z = mean.astype(tn.get_dtype())
    return z



def gaussian_eps_gain(cov: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Posterior-mean eps gain for z0 ~ N(mu, S): eps_hat = K_t (z_t - sqrt(abar) mu).

    K_t = sqrt(1 - abar) (abar S + (1 - abar) I)^-1; cov [S, d, d] -> [T_steps, S, d, d].
    """
    eye = np.eye(cov.shape[-1])
    ab = sched.alpha_bar[:, None, None, None]
    return np.sqrt(1.0 - ab) * np.linalg.inv(ab * cov[None] + (1.0 - ab) * eye)
