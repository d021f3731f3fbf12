import numpy as np
import pytest

from defapprox.nn import Conv2d, Dense, Flatten, MaxPool, ReLU
from defapprox.nn.model import ModelSpec, init_weights


def tiny_model(seed=0, policy=None, size=8):
    """conv -> relu -> pool -> flatten -> dense: every layer type, cheap to emulate."""
    layers = (Conv2d(1, 3, 3, pad=1), ReLU(), MaxPool(2), Flatten(), Dense(3 * (size // 2) ** 2, 4))
    weights = init_weights(layers, (1, size, size), seed)
    rng = np.random.default_rng(seed + 1000)
    for k in weights:
        if k.endswith("bias"):
            weights[k] = rng.normal(0, 0.1, weights[k].shape).astype(np.float32)
    kwargs = {} if policy is None else {"policy": policy}
    return ModelSpec(layers, weights, input_shape=(1, size, size), **kwargs)


@pytest.fixture
def tiny():
    return tiny_model()


@pytest.fixture
def tiny_batch():
    rng = np.random.default_rng(5)
    x = rng.uniform(0, 1, (6, 1, 8, 8)).astype(np.float32)
    y = rng.integers(0, 4, 6)
    return x, y


def activation_pattern(model, x):
    """ReLU signs and max-pool winners: the piece of the piecewise-smooth net containing x."""
    from defapprox.nn.layers import _pool_windows
    from defapprox.nn.model import fast_forward_inputs

    inputs, _ = fast_forward_inputs(model, x[None])
    parts = []
    for layer, h in zip(model.layers, inputs):
        name = type(layer).__name__
        if name == "ReLU":
            parts.append((h > 0).ravel())
        elif name == "MaxPool":
            parts.append(_pool_windows(h, layer.kernel, layer.step).argmax(-1).ravel())
    return np.concatenate(parts)


def fd_gradient(model, x, y, h=1e-3):
    """Float64 central differences; also reports whether any step crossed a kink."""
    from defapprox.nn.model import cross_entropy, fast_forward_inputs

    base = activation_pattern(model, x)
    flat = x.astype(np.float64).reshape(-1)
    fd = np.zeros_like(flat)
    smooth = True
    for k in range(flat.size):
        p, q = flat.copy(), flat.copy()
        p[k] += h
        q[k] -= h
        p, q = p.reshape(x.shape), q.reshape(x.shape)
        smooth &= np.array_equal(activation_pattern(model, p), base) and np.array_equal(activation_pattern(model, q), base)
        lp = cross_entropy(fast_forward_inputs(model, p[None])[1], [y])[0]
        lq = cross_entropy(fast_forward_inputs(model, q[None])[1], [y])[0]
        fd[k] = (lp - lq) / (2 * h)
    return fd.reshape(x.shape), smooth


def gradient_check(count=20, h=1e-3):
    """Relative L2 errors of reverse-mode vs finite differences on ``count`` kink-free instances."""
    from defapprox.nn import input_gradient

    errors, skipped, seed = [], 0, 0
    while len(errors) < count:
        rng = np.random.default_rng(seed)
        model = tiny_model(seed)
        x = rng.uniform(0, 1, (1, 8, 8))
        y = int(rng.integers(0, 4))
        seed += 1
        fd, smooth = fd_gradient(model, x, y, h)
        if not smooth:
            skipped += 1
            continue
        g = input_gradient(model, x, y)
        errors.append(float(np.linalg.norm(g - fd) / np.linalg.norm(fd)))
    return errors, skipped
