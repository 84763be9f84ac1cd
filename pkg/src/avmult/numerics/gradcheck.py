"""Central finite-difference checks for the gradient tape."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, precision


def relative_error(analytic, numeric):
    """Largest absolute discrepancy relative to the largest gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numerical_gradient(fn, arrays, index, h=1e-4, entries=None):
    """d fn / d arrays[index] by central differences (optionally only at ``entries``)."""
    target = arrays[index]
    grad = np.zeros_like(target, dtype=np.float64)
    flat = target.reshape(-1)
    positions = range(flat.size) if entries is None else entries
    for i in positions:
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn(*arrays))
        flat[i] = orig - h
        down = float(fn(*arrays))
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def check_gradients(fn, *arrays, h=1e-4, seed_grad=None):
    """Compare reverse-mode gradients of ``fn`` against central differences in float64.

    ``fn`` maps Tensors to a Tensor.  Non-scalar outputs are contracted with
    a fixed random cotangent so every output element contributes.  Returns the
    worst relative error over all inputs.
    """
    with precision(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        probe = fn(*[Tensor(a) for a in arrays])
        if seed_grad is None:
            seed_grad = np.random.default_rng(1234).standard_normal(probe.shape)

        def scalar(*xs):
            out = fn(*[Tensor(x) for x in xs])
            return float((out.data * seed_grad).sum())

        inputs = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = fn(*inputs)
        out.backward(seed_grad)
        worst = 0.0
        for i, t in enumerate(inputs):
            numeric = numerical_gradient(scalar, arrays, i, h=h)
            analytic = t.grad if t.grad is not None else np.zeros_like(arrays[i])
            worst = max(worst, relative_error(analytic, numeric))
        return worst


def check_parameter_gradients(loss_fn, params, n_samples=50, seed=0, h=1e-5):
    """Spot-check d loss / d param on ``n_samples`` random scalar entries.

    ``loss_fn()`` must rebuild the forward pass from the current parameter
    values and return a scalar Tensor.  Run under ``precision(np.float64)``.
    Returns the worst relative error over the sampled entries.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    sizes = np.array([p.data.size for p in params])
    picks = rng.choice(sizes.sum(), size=min(n_samples, int(sizes.sum())), replace=False)
    offsets = np.cumsum(sizes) - sizes
    analytic, numeric = [], []
    for flat_index in picks:
        k = int(np.searchsorted(offsets, flat_index, side="right") - 1)
        p, i = params[k], int(flat_index - offsets[k])
        flat = p.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        up = float(loss_fn().data)
        flat[i] = orig - h
        down = float(loss_fn().data)
        flat[i] = orig
        numeric.append((up - down) / (2 * h))
        analytic.append(0.0 if p.grad is None else float(p.grad.reshape(-1)[i]))
    return relative_error(analytic, numeric)
