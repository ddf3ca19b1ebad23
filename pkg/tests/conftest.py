import numpy as np
import pytest

import lipsynth.nn as nn


@pytest.fixture
def float64_engine():
    """Run a test in float64 so finite-difference tolerances are meaningful."""
    old = nn.get_default_dtype()
    nn.set_default_dtype(np.float64)
    yield
    nn.set_default_dtype(old)


def finite_difference_gradients(build_loss, param, h=1e-3, coords=None):
    """Central-difference gradient of build_loss() w.r.t. one parameter
    tensor, independent of the autodiff path. ``coords`` restricts the
    check to a subset of flat indices (None checks every entry)."""
    flat = param.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = np.zeros(len(list(idx)) if coords is not None else flat.size)
    idx = range(flat.size) if coords is None else coords
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        up = build_loss().item()
        flat[i] = orig - h
        down = build_loss().item()
        flat[i] = orig
        out[j] = (up - down) / (2.0 * h)
    return out


def gradient_relative_error(build_loss, params, h=1e-3, max_coords=None,
                            rng=None):
    """Worst norm-wise relative error between analytic and numeric grads.

    With ``max_coords`` the numeric oracle is evaluated on that many
    seeded-random coordinates per parameter instead of all of them.
    """
    loss = build_loss()
    for p in params:
        p.grad = None
    nn.backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        analytic = analytic.reshape(-1)
        size = p.data.size
        if max_coords is not None and size > max_coords:
            picks = (rng or np.random.default_rng(0)).choice(
                size, size=max_coords, replace=False)
        else:
            picks = np.arange(size)
        numeric = finite_difference_gradients(build_loss, p, h,
                                              coords=list(picks))
        ana = analytic[picks]
        denom = max(np.linalg.norm(ana), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(ana - numeric) / denom))
    return worst
