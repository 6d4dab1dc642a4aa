"""Layer forward semantics, SGD arithmetic, and registry bookkeeping.

Gradient correctness for every layer is covered by the finite-difference
units in lctnet.gradcheck (exercised at the bottom); the tests here pin the
forward definitions and the optimizer/update bookkeeping with hand-computed
values.
"""

import numpy as np
import pytest

from lctnet import gradcheck
from lctnet.layers import (AvgPool2d, BatchNorm2d, Conv2d, GlobalAvgPool,
                           Linear, MissingGradError, ModeError, ParamRegistry,
                           ReLU, Sigmoid, sgd_step, softmax_cross_entropy)
from lctnet.rng import Rng
from lctnet.tensor import ShapeError, conv2d


# ------------------------------------------------------------- activations

def test_relu_values_and_gradient_mask():
    r = ReLU()
    x = np.array([[-1.0, 0.0, 2.0]])
    np.testing.assert_array_equal(r.forward(x), [[0.0, 0.0, 2.0]])
    dy = np.array([[5.0, 5.0, 5.0]])
    np.testing.assert_array_equal(r.backward(dy), [[0.0, 0.0, 5.0]])


def test_sigmoid_values_and_gradient():
    s = Sigmoid()
    y = s.forward(np.array([0.0, 1.0]))
    np.testing.assert_allclose(y, [0.5, 0.7310585786300049], rtol=0, atol=1e-15)
    dy = np.array([1.0, 1.0])
    np.testing.assert_allclose(s.backward(dy), y * (1 - y), rtol=0, atol=1e-15)


def test_layer_protocol_rejects_backward_without_forward():
    r = ReLU()
    with pytest.raises(ModeError):
        r.backward(np.ones((1, 3)))
    r.forward(np.ones((1, 3)))
    r.backward(np.ones((1, 3)))
    with pytest.raises(ModeError):  # cache consumed, second backward invalid
        r.backward(np.ones((1, 3)))


# --------------------------------------------------------------- batchnorm

def test_batchnorm_train_standardizes_with_biased_variance():
    reg = ParamRegistry()
    bn = BatchNorm2d(reg, "bn", 3, dtype=np.float64)
    x = Rng(1).normal((8, 3, 5, 5), mu=2.0, sigma=3.0)
    y = bn.forward(x, train=True)
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    # unit *biased* variance up to the epsilon in the denominator
    var = y.var(axis=(0, 2, 3))  # numpy var is biased by default
    batch_var = x.var(axis=(0, 2, 3))
    np.testing.assert_allclose(var, batch_var / (batch_var + bn.eps), rtol=1e-10)


def test_batchnorm_running_stats_single_step_formula():
    reg = ParamRegistry()
    bn = BatchNorm2d(reg, "bn", 2, dtype=np.float64)
    np.testing.assert_array_equal(bn.running_mean, [0.0, 0.0])
    np.testing.assert_array_equal(bn.running_var, [1.0, 1.0])
    x = Rng(2).normal((4, 2, 3, 3), mu=1.0)
    bn.forward(x, train=True)
    m, v = x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3))
    np.testing.assert_allclose(bn.running_mean, 0.1 * m, rtol=1e-12)
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * v, rtol=1e-12)


def test_batchnorm_eval_on_fresh_layer_is_near_identity():
    reg = ParamRegistry()
    bn = BatchNorm2d(reg, "bn", 3, dtype=np.float64)
    x = Rng(3).normal((2, 3, 4, 4))
    y = bn.forward(x, train=False)
    np.testing.assert_allclose(y, x / np.sqrt(1.0 + bn.eps), rtol=1e-12)


def test_batchnorm_eval_mode_ignores_batch_statistics():
    reg = ParamRegistry()
    bn = BatchNorm2d(reg, "bn", 2, dtype=np.float64)
    rng = Rng(4)
    for _ in range(50):  # converge running stats toward N(1, 4)
        bn.forward(rng.normal((16, 2, 4, 4), mu=1.0, sigma=2.0), train=True)
    a = bn.forward(rng.normal((2, 2, 4, 4), mu=1.0, sigma=2.0), train=False)
    single = bn.forward(rng.normal((1, 2, 4, 4), mu=1.0, sigma=2.0), train=False)
    # eval statistics are frozen: outputs roughly standardized even for n=1
    assert abs(np.concatenate([a.ravel(), single.ravel()]).mean()) < 0.5


def test_batchnorm_rejects_wrong_channel_count():
    reg = ParamRegistry()
    bn = BatchNorm2d(reg, "bn", 3)
    with pytest.raises(ShapeError):
        bn.forward(np.ones((1, 4, 2, 2)))


# ------------------------------------------------------------ conv / linear

def test_conv2d_layer_wraps_kernel_and_registers_weight():
    reg = ParamRegistry()
    rng = Rng(5)
    layer = Conv2d(reg, "c", 3, 8, 3, stride=2, rng=rng, dtype=np.float64)
    assert reg.get("c.weight").data.shape == (8, 3, 3, 3)
    x = Rng(6).normal((2, 3, 9, 9))
    np.testing.assert_array_equal(layer.forward(x),
                                  conv2d(x, layer.weight.data, 2, 1))


def test_conv2d_he_init_scale():
    reg = ParamRegistry()
    layer = Conv2d(reg, "c", 16, 64, 3, rng=Rng(7), dtype=np.float64)
    std = layer.weight.data.std()
    expect = np.sqrt(2.0 / (9 * 16))
    assert abs(std - expect) / expect < 0.05
    assert abs(layer.weight.data.mean()) < 0.01


def test_linear_matches_affine_oracle():
    reg = ParamRegistry()
    layer = Linear(reg, "fc", 4, 3, rng=Rng(8), dtype=np.float64)
    x = Rng(9).normal((5, 4))
    y = layer.forward(x)
    want = np.array([[layer.weight.data[o] @ x[i] + layer.bias.data[o]
                      for o in range(3)] for i in range(5)])
    np.testing.assert_allclose(y, want, rtol=1e-12, atol=1e-12)
    with pytest.raises(ShapeError):
        layer.forward(Rng(10).normal((5, 6)))


def test_linear_without_bias_has_single_param():
    reg = ParamRegistry()
    Linear(reg, "fc", 4, 3, bias=False)
    assert [n for n, _ in reg.named_params()] == ["fc.weight"]


# ----------------------------------------------------------------- pooling

def test_global_avg_pool_forward_and_even_backward():
    g = GlobalAvgPool()
    x = Rng(11).normal((2, 3, 4, 5))
    np.testing.assert_allclose(g.forward(x), x.mean(axis=(2, 3)), rtol=1e-12)
    dy = np.ones((2, 3))
    dx = g.backward(dy)
    np.testing.assert_allclose(dx, np.full_like(x, 1.0 / 20), rtol=1e-12)


def test_avgpool_matches_window_oracle():
    pool = AvgPool2d(3, 2, 1)
    x = Rng(12).normal((2, 4, 7, 7))
    y = pool.forward(x)
    assert y.shape == (2, 4, 4, 4)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    for oy in range(4):
        for ox in range(4):
            window = xp[:, :, 2 * oy:2 * oy + 3, 2 * ox:2 * ox + 3]
            np.testing.assert_allclose(y[:, :, oy, ox], window.mean(axis=(2, 3)),
                                       rtol=1e-12, atol=1e-12)


# ------------------------------------------------------------ cross-entropy

def test_cross_entropy_hand_values():
    loss, d = softmax_cross_entropy(np.array([[0.0, 0.0]]), np.array([0]))
    np.testing.assert_allclose(loss, np.log(2.0), rtol=1e-12)
    np.testing.assert_allclose(d, [[0.5 - 1.0, 0.5]], rtol=1e-12)
    loss10, _ = softmax_cross_entropy(np.zeros((3, 10)), np.array([0, 5, 9]))
    np.testing.assert_allclose(loss10, np.log(10.0), rtol=1e-12)


def test_cross_entropy_matches_log_softmax_oracle_and_shift_invariance():
    rng = Rng(13)
    logits = rng.normal((6, 7), sigma=3.0)
    labels = rng.integers(0, 7, (6,)).astype(np.int64)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    want = -np.log(p[np.arange(6), labels]).mean()
    loss, d = softmax_cross_entropy(logits, labels)
    np.testing.assert_allclose(loss, want, rtol=1e-10)
    onehot = np.zeros_like(logits)
    onehot[np.arange(6), labels] = 1.0
    np.testing.assert_allclose(d, (p - onehot) / 6.0, rtol=1e-10, atol=1e-12)
    shifted, _ = softmax_cross_entropy(logits + 1000.0, labels)
    np.testing.assert_allclose(shifted, loss, rtol=1e-9)
    big, _ = softmax_cross_entropy(np.array([[1e4, -1e4]]), np.array([0]))
    assert np.isfinite(big)


def test_cross_entropy_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        softmax_cross_entropy(np.zeros((2, 3)), np.array([0]))
    with pytest.raises(ShapeError):
        softmax_cross_entropy(np.zeros(3), np.array([0]))


# --------------------------------------------------------------- optimizer

def _one_param(value, decay=True):
    reg = ParamRegistry()
    p = reg.add_param("p", np.array([value], dtype=np.float64), decay=decay)
    return reg, p


def test_sgd_momentum_hand_iteration():
    reg, p = _one_param(1.0)
    p.accumulate(np.array([1.0]))
    sgd_step(reg, lr=0.1, momentum=0.9)
    np.testing.assert_allclose(p.data, [0.9], rtol=0, atol=1e-15)  # v=1
    p.accumulate(np.array([1.0]))
    sgd_step(reg, lr=0.1, momentum=0.9)
    # v = 0.9*1 + 1 = 1.9; p = 0.9 - 0.19
    np.testing.assert_allclose(p.data, [0.71], rtol=0, atol=1e-15)


def test_sgd_weight_decay_only_on_eligible_params():
    reg = ParamRegistry()
    a = reg.add_param("a", np.array([1.0]), decay=True)
    b = reg.add_param("b", np.array([1.0]), decay=False)
    a.accumulate(np.zeros(1))
    b.accumulate(np.zeros(1))
    sgd_step(reg, lr=0.1, momentum=0.0, weight_decay=1e-4)
    np.testing.assert_allclose(a.data, [1.0 - 0.1 * 1e-4], rtol=0, atol=1e-18)
    np.testing.assert_array_equal(b.data, [1.0])


def test_sgd_zero_lr_is_identity_and_grads_cleared():
    reg, p = _one_param(2.5)
    p.accumulate(np.array([7.0]))
    sgd_step(reg, lr=0.0, momentum=0.9, weight_decay=1e-4)
    np.testing.assert_array_equal(p.data, [2.5])
    np.testing.assert_array_equal(p.grad, [0.0])


def test_sgd_requires_gradients():
    reg, _ = _one_param(1.0)
    with pytest.raises(MissingGradError, match="'p'"):
        sgd_step(reg, lr=0.1)


def test_grad_accumulation_is_additive():
    _, p = _one_param(0.0)
    p.accumulate(np.array([1.5]))
    p.accumulate(np.array([2.5]))
    np.testing.assert_array_equal(p.grad, [4.0])


# ---------------------------------------------------------------- registry

def test_registry_rejects_duplicates_and_orders_tensors():
    reg = ParamRegistry()
    reg.add_param("w", np.ones(2))
    reg.add_buffer("rm", np.zeros(2))
    reg.add_param("b", np.zeros(3))
    with pytest.raises(ValueError):
        reg.add_param("w", np.ones(2))
    with pytest.raises(ValueError):
        reg.add_buffer("w", np.ones(2))
    names = [n for n, _ in reg.named_tensors()]
    assert names == ["w", "b", "rm"]  # params first, then buffers
    assert reg.total_size() == 5


def test_registry_load_tensor_in_place_keeps_layer_aliases_live():
    reg = ParamRegistry()
    layer = Linear(reg, "fc", 2, 2, dtype=np.float64)
    new_w = np.arange(4, dtype=np.float64).reshape(2, 2)
    reg.load_tensor("fc.weight", new_w)
    np.testing.assert_array_equal(layer.weight.data, new_w)
    with pytest.raises(ShapeError):
        reg.load_tensor("fc.weight", np.ones((3, 2)))
    with pytest.raises(KeyError):
        reg.load_tensor("nope", np.ones(1))


# ------------------------------------------------- finite-difference gate

def test_all_layer_gradcheck_units_pass():
    results = gradcheck.run_scope("layers")
    assert results, "layer scope is empty"
    for r in results:
        assert r.ok, f"{r.name}: max rel err {r.max_err:.3e} at {r.worst}"
        assert r.max_err < gradcheck.TOLERANCE
