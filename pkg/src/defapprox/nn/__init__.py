"""Minimal CNN engine with pluggable scalar-multiplication backends."""

from .backends import EXACT_POLICY, MulBackend, PrecisionPolicy
from .layers import Conv2d, Dense, Flatten, MaxPool, ReLU, conv2d_forward, dense_forward, maxpool_forward, relu_forward, softmax
from .model import (
    ForwardResult,
    ModelSpec,
    bpda_gradient,
    confidence,
    confidences,
    cross_entropy,
    finite_difference_gradient,
    forward,
    init_weights,
    input_gradient,
    lenet5,
    lenet5_layers,
    loss,
    predict,
)
from .train import EvalResult, SGDConfig, evaluate, train_sgd
