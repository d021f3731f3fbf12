"""Model specification, policy-aware forward pass and input gradients."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ContractError, UnsupportedPolicyError
from .backends import EXACT_POLICY, MulBackend, PrecisionPolicy
from .layers import (
    Conv2d,
    Dense,
    Flatten,
    MaxPool,
    ReLU,
    backward,
    conv2d_forward,
    dense_forward,
    fast_forward,
    forward_parameterless,
    log_softmax,
    softmax,
)

MNIST_SHAPE = (1, 28, 28)


@dataclass
class ModelSpec:
    layers: tuple
    weights: dict
    policy: PrecisionPolicy = EXACT_POLICY
    input_shape: tuple = MNIST_SHAPE
    shapes: list = field(init=False, repr=False)

    def __post_init__(self):
        self.layers = tuple(self.layers)
        self.input_shape = tuple(self.input_shape)
        shapes = [self.input_shape]
        for idx, layer in enumerate(self.layers):
            shapes.append(layer.output_shape(shapes[-1]))
            if layer.has_weights:
                for name, shape in zip(("weight", "bias"), layer.weight_shapes()):
                    key = f"{idx}.{name}"
                    if key not in self.weights:
                        raise ContractError(f"missing tensor {key}")
                    if tuple(self.weights[key].shape) != shape:
                        raise ContractError(f"{key} has shape {self.weights[key].shape}, expected {shape}")
        for idx in self.policy.overrides:
            if not (0 <= idx < len(self.layers) and self.layers[idx].has_weights):
                raise ContractError(f"policy override for layer {idx}, which has no multiplications")
        self.shapes = shapes

    @property
    def num_classes(self):
        return self.shapes[-1][0]

    def params(self, idx, dtype=np.float32):
        return (
            self.weights[f"{idx}.weight"].astype(dtype, copy=False),
            self.weights[f"{idx}.bias"].astype(dtype, copy=False),
        )

    def mult_layers(self):
        return [i for i, layer in enumerate(self.layers) if layer.has_weights]

    def is_all_exact(self):
        return all(self.policy.backend_for(i).is_exact for i in self.mult_layers())

    def with_policy(self, policy):
        return replace(self, policy=policy)


def lenet5_layers():
    return (
        Conv2d(1, 6, 5, pad=2),
        ReLU(),
        MaxPool(2),
        Conv2d(6, 16, 5),
        ReLU(),
        MaxPool(2),
        Flatten(),
        Dense(400, 120),
        ReLU(),
        Dense(120, 10),
    )


def init_weights(layers, input_shape, seed):
    """He-uniform weights and zero biases from a seeded generator."""
    rng = np.random.default_rng(seed)
    weights = {}
    shape = tuple(input_shape)
    for idx, layer in enumerate(layers):
        if layer.has_weights:
            w_shape, b_shape = layer.weight_shapes()
            fan_in = int(np.prod(w_shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            weights[f"{idx}.weight"] = rng.uniform(-bound, bound, w_shape).astype(np.float32)
            weights[f"{idx}.bias"] = np.zeros(b_shape, dtype=np.float32)
        shape = layer.output_shape(shape)
    return weights


def lenet5(seed=0, policy=EXACT_POLICY):
    layers = lenet5_layers()
    return ModelSpec(layers, init_weights(layers, MNIST_SHAPE, seed), policy)


@dataclass
class ForwardResult:
    logits: np.ndarray
    probs: np.ndarray
    activations: dict | None = None


def _batched(model, x):
    x = np.asarray(x, dtype=np.float32)
    if x.shape == model.input_shape:
        return x[None], True
    if x.shape[1:] != model.input_shape:
        raise ContractError(f"input shape {x.shape} does not match model input {model.input_shape}")
    return x, False


def _emulated_layers(model, x, capture):
    inputs = [] if capture else None
    h = x
    for idx, layer in enumerate(model.layers):
        if capture:
            inputs.append(h)
        if isinstance(layer, Conv2d):
            w, b = model.params(idx)
            h = conv2d_forward(h, w, b, layer.stride, layer.pad, model.policy.backend_for(idx))
        elif isinstance(layer, Dense):
            w, b = model.params(idx)
            h = dense_forward(h, w, b, model.policy.backend_for(idx))
        else:
            h = forward_parameterless(layer, h)
    return h, inputs


def forward(model, x, capture=False, workers=1, chunk=64):
    """Run the model under its precision policy.

    Accepts one image or a batch. With ``capture`` the input of every layer
    (keyed ``"<idx>.<LayerName>"``) and the logits are returned as
    activations. ``workers > 1`` splits the batch across processes; results
    are identical to a serial run.
    """
    xb, single = _batched(model, x)
    pieces = [xb[i : i + chunk] for i in range(0, xb.shape[0], chunk)] or [xb]
    if workers > 1 and len(pieces) > 1:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=workers)(delayed(_emulated_layers)(model, p, capture) for p in pieces)
    else:
        results = [_emulated_layers(model, p, capture) for p in pieces]
    logits = np.concatenate([r[0] for r in results], axis=0)
    activations = None
    if capture:
        activations = {}
        for idx, layer in enumerate(model.layers):
            activations[f"{idx}.{type(layer).__name__}"] = np.concatenate([r[1][idx] for r in results], axis=0)
        activations["logits"] = logits
    probs = softmax(logits).astype(np.float32)
    if single:
        logits, probs = logits[0], probs[0]
        if activations is not None:
            activations = {k: v[0] for k, v in activations.items()}
    return ForwardResult(logits, probs, activations)


def predict(model, x, workers=1):
    res = forward(model, x, workers=workers)
    return np.argmax(res.logits, axis=-1)


def cross_entropy(logits, labels):
    """Per-sample cross-entropy of softmax(logits), float64."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(labels)
    return -log_softmax(logits)[np.arange(len(labels)), labels]


def loss(model, x, labels, workers=1):
    xb, _ = _batched(model, x)
    return cross_entropy(forward(model, xb, workers=workers).logits, labels)


def confidence(probs, label):
    """Top-class margin: probs[label] minus the best competing probability."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise ContractError("confidence expects a single probability vector")
    if not 0 <= int(label) < probs.shape[0]:
        raise ContractError(f"label {label} outside 0..{probs.shape[0] - 1}")
    others = np.delete(probs, int(label))
    return float(probs[int(label)] - others.max())


def confidences(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    rows = np.arange(len(labels))
    true = probs[rows, labels]
    masked = probs.copy()
    masked[rows, labels] = -np.inf
    return true - masked.max(axis=1)


def fast_forward_inputs(model, x, dtype=np.float64):
    """Exact BLAS forward; returns the list of layer inputs and the logits."""
    h = np.asarray(x, dtype=dtype)
    inputs = []
    for idx, layer in enumerate(model.layers):
        inputs.append(h)
        params = model.params(idx, dtype) if layer.has_weights else None
        h = fast_forward(layer, h, params)
    return inputs, h


def backprop(model, inputs, dlogits, need_params=False, dtype=np.float64):
    """Push ``dlogits`` back through exact backward rules at the given layer inputs."""
    grads = {}
    dy = dlogits
    for idx in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[idx]
        params = model.params(idx, dtype) if layer.has_weights else None
        dy, pg = backward(layer, inputs[idx].astype(dtype, copy=False), dy, params, need_params)
        if pg is not None:
            grads[f"{idx}.weight"], grads[f"{idx}.bias"] = pg
    return dy, grads


def cross_entropy_grad(logits, labels):
    p = softmax(logits)
    p[np.arange(len(labels)), labels] -= 1.0
    return p


def input_gradient(model, x, labels):
    """d(cross-entropy)/d(input) by reverse mode; exact policies only.

    For a batch the loss is the sum of per-image losses, so each row is that
    image's own gradient. Computed in float64.
    """
    if not model.is_all_exact():
        raise UnsupportedPolicyError("reverse-mode input gradients are defined only for all-exact policies")
    xb, single = _batched(model, x)
    labels = np.atleast_1d(labels)
    inputs, logits = fast_forward_inputs(model, xb)
    dx, _ = backprop(model, inputs, cross_entropy_grad(logits, labels))
    return dx[0] if single else dx


def bpda_gradient(model, x, labels):
    """Straight-through gradient: policy forward, exact backward rules at its activations."""
    xb, single = _batched(model, x)
    labels = np.atleast_1d(labels)
    res = forward(model, xb, capture=True)
    inputs = [res.activations[f"{i}.{type(layer).__name__}"] for i, layer in enumerate(model.layers)]
    dx, _ = backprop(model, inputs, cross_entropy_grad(res.logits.astype(np.float64), labels))
    return dx[0] if single else dx


def finite_difference_gradient(model, x, labels, h=1e-3, workers=1, chunk=256):
    """Central differences of the policy forward's loss, one pixel at a time."""
    xb, single = _batched(model, x)
    labels = np.atleast_1d(labels)
    grads = np.zeros(xb.shape, dtype=np.float64)
    d = int(np.prod(model.input_shape))
    for n in range(xb.shape[0]):
        base = xb[n].reshape(-1)
        plus = np.repeat(base[None], d, axis=0)
        minus = plus.copy()
        idx = np.arange(d)
        plus[idx, idx] = base + np.float32(h)
        minus[idx, idx] = base - np.float32(h)
        step = plus[idx, idx].astype(np.float64) - minus[idx, idx].astype(np.float64)
        batch = np.concatenate([plus, minus]).reshape(2 * d, *model.input_shape)
        lab = np.full(2 * d, labels[n])
        losses = cross_entropy(forward(model, batch, workers=workers, chunk=chunk).logits, lab)
        grads[n] = ((losses[:d] - losses[d:]) / step).reshape(model.input_shape)
    return grads[0] if single else grads
