"""Fast invariant checks runnable from the installed package (`mcdm selftest`)."""
from __future__ import annotations

import os
import tempfile
import traceback

import numpy as np

from . import tensor as tn
from .attention import FavorFeatures, fast_attention, sdpa
from .diffusion import make_schedule, q_sample
from .io import load_tensor, save_tensor
from .metrics import pearson, ssim
from .nn import Linear
from .tensor import Rng, Tensor, grad_check
from .world import extract_mouth_openness, make_sequence, render_track

CHECKS = []


def check(fn):
    CHECKS.append(fn)
    return fn


@check
def philox_reproducible():
    a = Rng(5, 1).normal((16,))
    b = Rng(5, 1).normal((16,))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, Rng(5, 2).normal((16,)))


@check
def linear_gradients():
    with tn.precision("float64"):
        lin = Linear(5, 3, Rng(0, 3))
        x = Tensor(Rng(1, 0).normal((4, 5)), requires_grad=True)
        assert grad_check(lambda x: (tn.tanh(lin(x)) ** 2).sum(), [x]) < 1e-6


@check
def sdpa_rows_are_convex():
    rng = Rng(2, 0)
    q, k, v = rng.normal((6, 4)), rng.normal((9, 4)), rng.normal((9, 3))
    with tn.no_grad():
        out = sdpa(q, k, v).data
    assert np.all(out <= v.max(axis=0) + 1e-5) and np.all(out >= v.min(axis=0) - 1e-5)


@check
def fast_attention_single_key():
    rng = Rng(3, 0)
    q, k, v = rng.normal((5, 16)), rng.normal((1, 16)), rng.normal((1, 4))
    with tn.no_grad():
        out = fast_attention(q, k, v, FavorFeatures.draw(16, 32, 0)).data
    assert np.allclose(out, np.repeat(v, 5, axis=0), atol=1e-5)


@check
def q_sample_endpoints():
    s = make_schedule(50, 1e-3, 0.25)
    x0 = np.ones(8)
    assert np.allclose(q_sample(x0, 0, np.zeros(8), s).data, np.sqrt(s.alpha_bar[0]))


@check
def ssim_identities():
    x = render_track(make_sequence(0, 2).states, 0)
    assert abs(ssim(x[0], x[0]) - 1.0) < 1e-12
    assert abs(ssim(x[0], x[1]) - ssim(x[1], x[0])) < 1e-12


@check
def mouth_round_trip():
    seq = make_sequence(4, 64)
    frames = render_track(seq.states, seq.identity)
    r = pearson([extract_mouth_openness(f) for f in frames], seq.states.mouth_open)
    assert r > 0.9, r


@check
def tensor_file_round_trip():
    x = Rng(9, 0).normal((3, 4, 5))
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "x.mct")
        save_tensor(p, x)
        assert np.array_equal(load_tensor(p), x)


def run(verbose=True) -> bool:
    ok = True
    for fn in CHECKS:
        try:
            fn()
            status = "PASS"
        except Exception:
            ok, status = False, "FAIL"
            if verbose:
                traceback.print_exc()
        if verbose:
            print(f"{status} {fn.__name__}")
    return ok
