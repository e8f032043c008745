import numpy as np
import pytest

from src.boottod.errors import BackwardError, DimensionError, NumericalError, TargetIndexError
from src.boottod.tensor import (
    Tensor,
    add_bias,
    add_positions,
    backward,
    binary_cross_entropy_with_logits,
    compare_gradients,
    dropout,
    embedding,
    gelu,
    grad_check,
    l2_distance,
    l2_normalize,
    layer_norm,
    matmul,
    no_grad,
    relu,
    softmax,
    softmax_cross_entropy,
    squared_distance,
    stop_gradient,
    take,
    tensor_mean,
    tensor_sum,
)


# Gradient checks
def test_grad_check_matmul_chain(rng):
    w = Tensor(rng.normal(size=(4, 3)))
    err = grad_check(lambda x: tensor_sum(gelu(matmul(x, w))), rng.normal(size=(2, 4)))
    assert err < 1e-6


def test_grad_check_layer_norm(rng):
    gain = Tensor(rng.normal(size=5))
    bias = Tensor(rng.normal(size=5))
    target = rng.normal(size=(3, 5))
    err = grad_check(lambda x: tensor_sum(layer_norm(x, gain, bias) * Tensor(target)), rng.normal(size=(3, 5)))
    assert err < 1e-6


def test_grad_check_softmax_and_normalize(rng):
    weights = Tensor(rng.normal(size=(2, 6)))
    assert grad_check(lambda x: tensor_sum(softmax(x) * weights), rng.normal(size=(2, 6))) < 1e-6
    assert grad_check(lambda x: tensor_sum(l2_normalize(x) * weights), rng.normal(size=(2, 6))) < 1e-6


def test_grad_check_losses(rng):
    targets = np.array([0, 2, 1])
    assert grad_check(lambda x: softmax_cross_entropy(x, targets), rng.normal(size=(3, 4))) < 1e-6
    labels = (rng.random((3, 4)) > 0.5).astype(float)
    assert grad_check(lambda x: binary_cross_entropy_with_logits(x, labels), rng.normal(size=(3, 4))) < 1e-6


def test_grad_check_distances(rng):
    other = Tensor(rng.normal(size=(3, 4)))
    assert grad_check(lambda x: tensor_sum(l2_distance(x, other)), rng.normal(size=(3, 4))) < 1e-6
    assert grad_check(lambda x: tensor_mean(squared_distance(x, other)), rng.normal(size=(3, 4))) < 1e-6


def test_grad_check_sampled_coordinates(rng):
    err = grad_check(lambda x: tensor_sum(relu(x) * x), rng.normal(size=(20, 20)) + 0.1, max_coords=25)
    assert err < 1e-6


# Tape behaviour
def test_backward_accumulates_shared_inputs():
    x = Tensor([2.0, 3.0], requires_grad=True)
    loss = tensor_sum(x * x + x)
    grads = backward(loss, leaves=[x])
    np.testing.assert_allclose(grads[x], [5.0, 7.0])
    np.testing.assert_allclose(x.grad, [5.0, 7.0])


def test_backward_accumulates_into_grad_across_calls():
    x = Tensor([1.0], requires_grad=True)
    backward(tensor_sum(x * 3.0))
    backward(tensor_sum(x * 2.0))
    np.testing.assert_allclose(x.grad, [5.0])


def test_unused_leaf_gets_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    grads = backward(tensor_sum(x), leaves=[x, unused])
    np.testing.assert_array_equal(grads[unused], np.zeros((2, 2)))


def test_second_backward_over_consumed_graph_raises():
    x = Tensor([1.0], requires_grad=True)
    loss = tensor_sum(x * x)
    backward(loss)
    with pytest.raises(BackwardError):
        backward(loss)


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(BackwardError):
        backward(x * 2.0)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad
    assert y.is_leaf


def test_stop_gradient_blocks_flow():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0, 4.0], requires_grad=True)
    loss = tensor_sum(x * stop_gradient(y))
    grads = backward(loss, leaves=[x, y])
    np.testing.assert_allclose(grads[x], [3.0, 4.0])
    np.testing.assert_array_equal(grads[y], [0.0, 0.0])


def test_take_scatter_adds_repeated_rows():
    table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    grads = backward(tensor_sum(take(table, np.array([0, 0, 2]))), leaves=[table])
    np.testing.assert_allclose(grads[table], [[2, 2], [0, 0], [1, 1]])


def test_l2_distance_subgradient_zero_at_equal_points():
    a = Tensor([[1.0, 1.0]], requires_grad=True)
    grads = backward(tensor_sum(l2_distance(a, Tensor([[1.0, 1.0]]))), leaves=[a])
    np.testing.assert_array_equal(grads[a], [[0.0, 0.0]])


def test_l2_distance_three_four_five():
    dist = l2_distance(Tensor([[0.0, 0.0]]), Tensor([[3.0, 4.0]]))
    assert dist.data[0] == pytest.approx(5.0)


# Errors
def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_add_bias_shape_mismatch():
    with pytest.raises(DimensionError):
        add_bias(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))



def test_grad_check_add_positions(rng):
    x = Tensor(rng.normal(size=(3, 4, 2)))
    table = rng.normal(size=(4, 2))

    def squared(y):
        return tensor_sum(y * y)

    assert grad_check(lambda t: squared(add_positions(x, t)), table) < 1e-6
    assert grad_check(lambda v: squared(add_positions(v, Tensor(table))), x.data) < 1e-6


def test_add_positions_sums_table_gradient_over_batch():
    x = Tensor(np.zeros((3, 2, 2)), requires_grad=True)
    table = Tensor(np.zeros((2, 2)), requires_grad=True)
    grads = backward(tensor_sum(add_positions(x, table)), leaves=[x, table])
    np.testing.assert_array_equal(grads[table], np.full((2, 2), 3.0))
    np.testing.assert_array_equal(grads[x], np.ones((3, 2, 2)))


def test_add_positions_shape_mismatch():
    with pytest.raises(DimensionError):
        add_positions(Tensor(np.zeros((2, 5, 4))), Tensor(np.zeros((4, 4))))

def test_cross_entropy_target_out_of_range():
    with pytest.raises(TargetIndexError):
        softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_embedding_id_out_of_range():
    with pytest.raises(TargetIndexError):
        embedding(Tensor(np.zeros((4, 2))), np.array([1, 4]))


def test_dimension_error_is_value_error():
    with pytest.raises(ValueError):
        l2_distance(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_non_finite_output_raises():
    with pytest.raises(NumericalError):
        Tensor([1e308]) * Tensor([1e308])


def test_cross_entropy_uniform_logits():
    loss = softmax_cross_entropy(Tensor(np.zeros((2, 4))), [1, 3])
    assert loss.item() == pytest.approx(np.log(4.0))


def test_grad_check_flags_mismatch_from_stop_gradient(rng):
    c = rng.normal(size=(3,))
    result = compare_gradients(lambda x: tensor_sum(stop_gradient(x) * Tensor(c)), rng.normal(size=(3,)))
    np.testing.assert_array_equal(result.analytic, np.zeros(3))
    assert result.max_relative_error > 1e-4
    assert result.detached_mismatch


def test_grad_check_does_not_flag_plain_ops(rng):
    c = rng.normal(size=(3,))
    result = compare_gradients(lambda x: tensor_sum(x * Tensor(c)), rng.normal(size=(3,)))
    assert result.max_relative_error < 1e-6
    assert not result.detached_mismatch


def test_stop_gradient_still_blocks_after_grad_check(rng):
    compare_gradients(lambda x: tensor_sum(stop_gradient(x)), rng.normal(size=(2,)))
    x = Tensor([1.0, 2.0], requires_grad=True)
    assert not stop_gradient(x).requires_grad


# Statistics
def test_dropout_is_unbiased():
    out = dropout(Tensor(np.ones(100_000)), 0.2, np.random.default_rng(0), train=True)
    assert out.data.mean() == pytest.approx(1.0, abs=0.02)
    assert set(np.unique(out.data)) <= {0.0, 1.25}


def test_dropout_is_identity_in_eval_mode(rng):
    x = Tensor(rng.normal(size=(4, 5)))
    np.testing.assert_array_equal(dropout(x, 0.5, rng, train=False).data, x.data)


def test_layer_norm_output_statistics(rng):
    x = Tensor(rng.normal(loc=3.0, scale=5.0, size=(6, 32)))
    out = layer_norm(x, Tensor(np.ones(32)), Tensor(np.zeros(32))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-3)
