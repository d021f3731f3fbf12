import numpy as np
import pytest

from conftest import gradient_check, tiny_model
from defapprox.errors import ContractError, UnsupportedPolicyError
from defapprox.floats import ax_fpm_mul, truncate_to_bf16
from defapprox.nn import (
    Dense,
    MulBackend,
    PrecisionPolicy,
    SGDConfig,
    confidence,
    conv2d_forward,
    dense_forward,
    evaluate,
    forward,
    input_gradient,
    maxpool_forward,
    relu_forward,
    softmax,
    train_sgd,
)
from defapprox.nn.layers import fast_forward
from defapprox.nn.model import ModelSpec

BACKENDS = list(MulBackend)


def test_conv_example():
    x = np.array([[[[1, 2], [3, 4]]]], np.float32)
    w = np.array([[[[1, 0], [0, 1]]]], np.float32)
    assert conv2d_forward(x, w, np.zeros(1, np.float32)).tolist() == [[[[5.0]]]]


@pytest.mark.parametrize("backend", BACKENDS)
def test_zero_kernel_gives_zero(backend):
    x = np.random.default_rng(0).uniform(-1, 1, (2, 2, 5, 5)).astype(np.float32)
    out = conv2d_forward(x, np.zeros((3, 2, 3, 3), np.float32), np.zeros(3, np.float32), pad=1, backend=backend)
    assert out.shape == (2, 3, 5, 5) and not out.any()


def test_conv_axfpm_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, (1, 1, 3, 3)).astype(np.float32)
    w = rng.uniform(-1, 1, (1, 1, 2, 2)).astype(np.float32)
    b = np.array([0.25], np.float32)
    out = conv2d_forward(x, w, b, backend=MulBackend.AXFPM)
    for i in range(2):
        for j in range(2):
            acc = np.float32(0)
            for kh in range(2):
                for kw in range(2):
                    acc = np.float32(acc + np.float32(ax_fpm_mul(float(w[0, 0, kh, kw]), float(x[0, 0, i + kh, j + kw]))))
            assert out[0, 0, i, j] == np.float32(acc + b[0])


def test_dense_examples_and_oracle():
    x = np.array([[0.3, -0.7]], np.float32)
    assert np.array_equal(dense_forward(x, np.eye(2, dtype=np.float32), np.zeros(2, np.float32)), x)
    b = np.array([1.5, -2.0], np.float32)
    assert np.array_equal(dense_forward(x, np.zeros((2, 2), np.float32), b), b[None])
    w = np.array([[0.9, -0.3], [0.6, 0.45]], np.float32)
    out = dense_forward(x, w, b, MulBackend.AXFPM)
    for o in range(2):
        acc = np.float32(ax_fpm_mul(float(w[o, 0]), float(x[0, 0])))
        acc = np.float32(acc + np.float32(ax_fpm_mul(float(w[o, 1]), float(x[0, 1]))))
        assert out[0, o] == np.float32(acc + b[o])


def test_shape_errors():
    with pytest.raises(ContractError):
        conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 2, 2)), np.zeros(1))
    with pytest.raises(ContractError):
        dense_forward(np.zeros((1, 3)), np.zeros((2, 2)), np.zeros(2))
    with pytest.raises(ContractError):
        maxpool_forward(np.zeros((1, 1, 1, 1)), 2)


def test_parameterless_examples():
    assert maxpool_forward(np.array([[[[1, 2], [3, 4]]]]), 2).tolist() == [[[[4]]]]
    assert relu_forward(np.array([-1.0, 0.0, 2.0])).tolist() == [0, 0, 2]
    assert softmax(np.array([0.0, 0.0])).tolist() == [0.5, 0.5]


def test_softmax_properties():
    z = np.random.default_rng(2).normal(0, 30, (200, 10))
    p = softmax(z)
    assert np.allclose(p.sum(axis=1), 1, atol=1e-6)
    assert softmax(np.array([[1000.0, 0.0]]))[0, 0] == 1.0  # stabilised, no overflow
    q = softmax(np.random.default_rng(3).normal(0, 3, (200, 10)))
    assert ((q > 0) & (q < 1)).all()


def test_confidence_examples():
    assert confidence([0.1, 0.7, 0.2], 1) == pytest.approx(0.5)
    assert confidence([0, 0, 1.0], 2) == 1.0
    assert confidence([0.25] * 4, 0) == 0.0
    p = np.array([0.1, 0.6, 0.3])
    assert confidence(p, int(np.argmax(p))) >= 0
    swapped = p[[0, 2, 1]]
    assert confidence(p, 1) == pytest.approx(-confidence(swapped, 1))
    with pytest.raises(ContractError):
        confidence(p, 3)


def test_zero_weight_model_is_uniform(tiny):
    zero = ModelSpec(tiny.layers, {k: np.zeros_like(v) for k, v in tiny.weights.items()}, input_shape=tiny.input_shape)
    res = forward(zero, np.random.default_rng(0).uniform(0, 1, (1, 8, 8)))
    assert np.allclose(res.probs, 0.25)


def test_exact_forward_equals_layer_composition(tiny, tiny_batch):
    x, _ = tiny_batch
    h = x
    for idx, layer in enumerate(tiny.layers):
        h = fast_forward(layer, h, tiny.params(idx) if layer.has_weights else None)
    assert np.allclose(forward(tiny, x).logits, h, atol=1e-5)


def test_capture_activations(tiny, tiny_batch):
    res = forward(tiny, tiny_batch[0], capture=True)
    assert list(res.activations) == ["0.Conv2d", "1.ReLU", "2.MaxPool", "3.Flatten", "4.Dense", "logits"]
    assert res.activations["3.Flatten"].shape == (6, 3, 4, 4)


@pytest.mark.parametrize("backend", BACKENDS)
def test_partition_independence(backend, tiny_batch):
    m = tiny_model(policy=PrecisionPolicy(backend))
    x, _ = tiny_batch
    whole = forward(m, x).logits
    assert np.array_equal(whole, forward(m, x, chunk=1).logits)
    assert np.array_equal(whole, forward(m, x, chunk=4, workers=2).logits)
    assert np.array_equal(whole[2], forward(m, x[2]).logits)


@pytest.mark.parametrize("backend", BACKENDS)
def test_backends_keep_shapes(backend, tiny_batch):
    m = tiny_model(policy=PrecisionPolicy(backend))
    exact = forward(tiny_model(), tiny_batch[0], capture=True).activations
    approx = forward(m, tiny_batch[0], capture=True).activations
    assert {k: v.shape for k, v in exact.items()} == {k: v.shape for k, v in approx.items()}


def test_bf16_exact_equals_pretruncated_operands():
    rng = np.random.default_rng(7)
    x = rng.uniform(-1, 1, (3, 2, 6, 6)).astype(np.float32)
    w = rng.uniform(-1, 1, (4, 2, 3, 3)).astype(np.float32)
    b = rng.uniform(-1, 1, 4).astype(np.float32)
    got = conv2d_forward(x, w, b, pad=1, backend=MulBackend.BF16_EXACT)
    ref = conv2d_forward(truncate_to_bf16(x), truncate_to_bf16(w), b, pad=1)
    assert np.array_equal(got, ref)
    xd, wd = x.reshape(3, -1), rng.uniform(-1, 1, (5, 72)).astype(np.float32)
    bd = np.zeros(5, np.float32)
    got = dense_forward(xd, wd, bd, MulBackend.BF16_EXACT)
    assert np.array_equal(got, dense_forward(truncate_to_bf16(xd), truncate_to_bf16(wd), bd))


def test_policy_overrides():
    m = tiny_model(policy=PrecisionPolicy(MulBackend.AXFPM, {0: MulBackend.EXACT}))
    assert m.policy.backend_for(0) is MulBackend.EXACT and m.policy.backend_for(4) is MulBackend.AXFPM
    with pytest.raises(ContractError):
        tiny_model(policy=PrecisionPolicy(MulBackend.AXFPM, {1: MulBackend.EXACT}))


def test_input_gradient_matches_finite_differences():
    errors, skipped = gradient_check(20)
    assert len(errors) == 20 and max(errors) < 1e-3
    assert skipped < 20


def test_input_gradient_batch_rows_are_per_image(tiny, tiny_batch):
    x, y = tiny_batch
    g = input_gradient(tiny, x, y)
    assert np.allclose(g[3], input_gradient(tiny, x[3], y[3]))


def test_input_gradient_zero_weight_dense():
    m = ModelSpec((Dense(4, 3),), {"0.weight": np.zeros((3, 4), np.float32), "0.bias": np.ones(3, np.float32)}, input_shape=(4,))
    assert not input_gradient(m, np.ones(4, np.float32), 1).any()


def test_input_gradient_requires_exact_policy(tiny_batch):
    with pytest.raises(UnsupportedPolicyError):
        input_gradient(tiny_model(policy=PrecisionPolicy(MulBackend.AXFPM)), *tiny_batch)


def test_train_lr_zero_keeps_weights(tiny, tiny_batch):
    out = train_sgd(tiny, *tiny_batch, SGDConfig(lr=0.0))
    assert all(np.array_equal(out.weights[k], tiny.weights[k]) for k in tiny.weights)


def test_train_is_deterministic(tiny_batch):
    cfg = SGDConfig(lr=0.05, epochs=3, batch=4, seed=9)
    a = train_sgd(tiny_model(), *tiny_batch, cfg)
    b = train_sgd(tiny_model(), *tiny_batch, cfg)
    assert all(a.weights[k].tobytes() == b.weights[k].tobytes() for k in a.weights)


def test_train_separable_toy_set():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, (40, 1, 8, 8)).astype(np.float32)
    y = rng.integers(0, 2, 40)
    x[y == 1, :, :4] += 1.0  # class 1 is brighter on top
    m = train_sgd(tiny_model(), x, y, SGDConfig(lr=0.05, epochs=30, batch=8))
    assert evaluate(m, x, y).accuracy == 1.0


def test_memorised_single_sample():
    x = np.random.default_rng(1).uniform(0, 1, (1, 1, 8, 8)).astype(np.float32)
    m = train_sgd(tiny_model(), x, [2], SGDConfig(lr=0.1, epochs=20, batch=1))
    assert evaluate(m, np.repeat(x, 3, 0), [2, 2, 2]).accuracy == 1.0


def test_train_errors(tiny):
    with pytest.raises(ContractError):
        train_sgd(tiny, np.zeros((0, 1, 8, 8)), np.zeros(0, int))
    with pytest.raises(UnsupportedPolicyError):
        train_sgd(tiny_model(policy=PrecisionPolicy(MulBackend.AXFPM)), np.zeros((1, 1, 8, 8)), [0])
    with pytest.raises(ContractError):
        evaluate(tiny, np.zeros((0, 1, 8, 8)), np.zeros(0, int))
