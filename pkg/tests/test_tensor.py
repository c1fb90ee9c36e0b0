from src.core.schemas import ConfigError
from src.core.tensor import Tensor, Tape, DimensionError, GradientError, LabelError, RunningStats, matmul, \
                            depthwise_conv3d, layer_norm, batch_norm_no_affine, softmax_cross_entropy, softmax, \
                            gelu, tensor_sum, mul, add, linear, transpose, concat
from src.core import gradcheck

import numpy as np
import pytest
import math


def test_matmul_identity_and_projector():
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(Tensor(np.eye(2)), b).data, b.data)

    projected = matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(projected.data, [[5.0, 6.0], [0.0, 0.0]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(3, 4\).*\(5, 2\)"):
        matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((5, 2))))


def test_matmul_gradient_is_row_sum_of_b():
    rng = np.random.default_rng(0)
    a, b = Tensor(rng.normal(size=(3, 4)), requires_grad=True), Tensor(rng.normal(size=(4, 2)))
    with Tape() as tape:
        loss = tensor_sum(matmul(a, b))
    tape.backward(loss)
    assert np.allclose(a.grad, np.tile(b.data.sum(axis=1), (3, 1)), atol=1e-12)


def test_conv_counts_kernel_taps():
    x = Tensor(np.ones((5, 5, 5, 1)))
    out = depthwise_conv3d(x, Tensor(np.ones((3, 3, 3, 1))), Tensor(np.zeros(1)))
    assert out.shape == (5, 5, 5, 1)
    assert np.all(out.data[1:4, 1:4, 1:4, 0] == 27.0)
    assert out.data[0, 0, 0, 0] == 8.0


def test_conv_delta_kernel_is_identity():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(2, 3, 4, 4, 5)))
    kernel = np.zeros((3, 3, 3, 5))
    kernel[1, 1, 1] = 1.0
    out = depthwise_conv3d(x, Tensor(kernel), Tensor(np.zeros(5)))
    assert np.array_equal(out.data, x.data)


def test_conv_rejects_even_kernel():
    with pytest.raises(ConfigError):
        depthwise_conv3d(Tensor(np.ones((4, 4, 4, 1))), Tensor(np.ones((2, 3, 3, 1))), Tensor(np.zeros(1)))


def test_layer_norm_edge_cases():
    constant = layer_norm(Tensor(np.full((1, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.allclose(constant.data, 0.0)

    two_point = layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    assert np.allclose(two_point.data, [[-1.0, 1.0]], atol=1e-5)


def test_batch_norm_modes():
    stats = RunningStats(Tensor(np.zeros(3)), Tensor(np.ones(3)))
    x = Tensor(np.random.default_rng(2).normal(size=(4, 3)))
    assert np.allclose(batch_norm_no_affine(x, stats, mode='eval').data, x.data, atol=1e-5)

    flat = batch_norm_no_affine(Tensor(np.tile([[1.0, 2.0, 3.0]], (4, 1))), stats, mode='train')
    assert np.allclose(flat.data, 0.0)


def test_batch_norm_train_needs_two_samples():
    stats = RunningStats(Tensor(np.zeros(3)), Tensor(np.ones(3)))
    with pytest.raises(DimensionError):
        batch_norm_no_affine(Tensor(np.ones((1, 3))), stats, mode='train')


def test_batch_norm_updates_running_statistics():
    stats = RunningStats(Tensor(np.zeros(2)), Tensor(np.ones(2)))
    x = np.array([[0.0, 2.0], [2.0, 4.0]])
    batch_norm_no_affine(Tensor(x), stats, mode='train')
    assert np.allclose(stats.mean.data, 0.1 * x.mean(axis=0))
    assert np.allclose(stats.var.data, 0.9 + 0.1 * x.var(axis=0, ddof=1))


def test_cross_entropy_values():
    uniform = softmax_cross_entropy(Tensor(np.zeros((2, 10))), [3, 7])
    assert math.isclose(uniform.item(), math.log(10), rel_tol=1e-12)

    confident = softmax_cross_entropy(Tensor([[50.0, 0.0, 0.0]]), [0])
    assert confident.item() < 1e-12


def test_cross_entropy_rejects_out_of_range_label():
    with pytest.raises(LabelError):
        softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_backward_simple_graphs():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = tensor_sum(mul(x, x))
    tape.backward(loss)
    assert np.array_equal(x.grad, [2.0, 4.0])

    y = Tensor(np.ones((2, 3)), requires_grad=True)
    with Tape() as tape:
        loss = tensor_sum(y)
    tape.backward(loss)
    assert np.array_equal(y.grad, np.ones((2, 3)))


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        out = mul(x, x)
    with pytest.raises(GradientError):
        tape.backward(out)


def test_frozen_inputs_get_no_gradient():
    frozen, trainable = Tensor([1.0, 2.0]), Tensor([3.0, 4.0], requires_grad=True)
    with Tape() as tape:
        loss = tensor_sum(mul(add(frozen, trainable), frozen))
    tape.backward(loss)
    assert frozen.grad is None
    assert np.array_equal(trainable.grad, frozen.data)


def test_nothing_is_recorded_outside_a_tape():
    x = Tensor([1.0, -1.0], requires_grad=True)
    assert not gelu(x).requires_grad
    with Tape() as tape:
        gelu(x)
    assert len(tape) == 1


def test_softmax_rows_sum_to_one():
    out = softmax(Tensor(np.random.default_rng(3).normal(size=(4, 6))))
    assert np.allclose(out.data.sum(axis=1), 1.0)


@pytest.mark.parametrize('seed', [0, 1, 2])
def test_gradient_suite_passes(seed):
    frame = gradcheck.run_suite(seed=seed)
    assert len(frame) >= 20
    failing = frame[~frame['passed']]
    assert failing.empty, failing.to_string()


def test_gradient_cases_draw_their_shapes_from_the_seed():
    shapes = {seed: gradcheck.run_suite(seed=seed, names=['matmul', 'linear', 'concat'])['shapes']
              for seed in range(4)}
    assert len({tuple(column) for column in shapes.values()}) > 1


@pytest.mark.parametrize('seed', range(20))
def test_output_shapes_follow_input_shapes(seed):
    rng = np.random.default_rng(seed)
    m, k, n, b = (int(d) for d in rng.integers(1, 6, size=4))

    x, row = Tensor(rng.normal(size=(b, m, k))), Tensor(rng.normal(size=(k,)))
    assert add(x, row).shape == np.broadcast_shapes((b, m, k), (k,))
    assert mul(x, Tensor(rng.normal(size=(m, 1)))).shape == (b, m, k)

    w, bias = Tensor(rng.normal(size=(k, n))), Tensor(rng.normal(size=(n,)))
    assert matmul(x, w).shape == (b, m, n)
    assert linear(x, w, bias).shape == (b, m, n)
    assert softmax(x, axis=-1).shape == (b, m, k)
    assert layer_norm(x, Tensor(np.ones(k)), Tensor(np.zeros(k))).shape == (b, m, k)
    assert tensor_sum(x, axis=1).shape == (b, k)
    assert transpose(x, (2, 0, 1)).shape == (k, b, m)
    assert concat([x, x], axis=-1).shape == (b, m, 2 * k)

    video = Tensor(rng.normal(size=(b, m, k, n, 2)))
    kernel = Tensor(rng.normal(size=(3, 3, 3, 2)))
    assert depthwise_conv3d(video, kernel, Tensor(np.zeros(2))).shape == (b, m, k, n, 2)
