"""Parameter containers, common layers and the AdamW optimizer."""
from __future__ import annotations

import hashlib
import math

import numpy as np

from . import tensor as tn
from .io import load_pack, save_pack
from .tensor import Rng, Tensor


class Module:
    """Attribute-walking parameter container.

    Every ``Tensor`` attribute is a parameter (frozen ones simply have
    ``requires_grad`` switched off); fixed buffers are kept as plain numpy
    arrays. Child modules may be attributes or live inside lists.
    """

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict, strict=True) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if strict and missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for k, p in own.items():
            if k in state:
                arr = np.asarray(state[k])
                if arr.shape != p.shape:
                    raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
                p.data = arr.astype(p.dtype).copy()

    def save(self, path, meta="") -> None:
        save_pack(path, self.state_dict(), meta)

    def load(self, path) -> str:
        state, meta = load_pack(path)
        self.load_state_dict(state)
        return meta

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def set_trainable(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None
        return self


def param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=tn.get_dtype()), requires_grad=True)


def group_hash(params) -> str:
    """sha256 over (name, bytes) of a named parameter group, in sorted order."""
    h = hashlib.sha256()
    for name, p in sorted(params, key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


class Linear(Module):
    def __init__(self, d_in, d_out, rng: Rng, bias=True, init="default"):
        if init == "zero":
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal((d_in, d_out), scale=1.0 / math.sqrt(d_in))
        self.weight = param(w)
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        y = tn.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d):
        self.weight = param(np.ones(d))
        self.bias = param(np.zeros(d))

    def __call__(self, x) -> Tensor:
        return tn.layer_norm(x, self.weight, self.bias)


class FeedForward(Module):
    def __init__(self, d, rng: Rng, mult=2, zero_out=False):
        self.fc1 = Linear(d, d * mult, rng)
        self.fc2 = Linear(d * mult, d, rng, init="zero" if zero_out else "default")

    def __call__(self, x) -> Tensor:
        return self.fc2(tn.gelu(self.fc1(x)))


def sinusoidal(positions, d) -> np.ndarray:
    """Standard sin/cos table, shape [len(positions), d]."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = positions * freqs
    out = np.zeros((positions.shape[0], d))
    out[:, 0:2 * half:2] = np.sin(ang)
    out[:, 1:2 * half:2] = np.cos(ang)
    return out.astype(tn.get_dtype())


class AdamW:
    """Adam with decoupled weight decay.

    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
    """

    def __init__(self, params, lr=1e-5, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.wd * p.data
            p.data = (p.data - self.lr * update).astype(p.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def positions_2d(gh: int, gw: int, d: int) -> np.ndarray:
    """Row table in the first half of the channels, column table in the second."""
    half = d // 2
    rows = sinusoidal(np.arange(gh), half)
    cols = sinusoidal(np.arange(gw), d - half)
    return np.concatenate([np.repeat(rows, gw, axis=0), np.tile(cols, (gh, 1))], axis=1)
