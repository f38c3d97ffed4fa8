"""Unit tests for the tensor engine: forward values, gradients, graphs and the container format."""

import io
import struct

import numpy as np
import pytest

import sketchDiffusion as sd
from sketchDiffusion import tensor_engine as te

# absolute floor of the relative gradient error
FD_ATOL = 1e-3


def _weighted_sum_graph(op, arrays, seed = 0):
    """Graph computing sum(op(*inputs) * W) for a fixed random W, with every input differentiable."""
    rng = np.random.default_rng(seed)
    weights = {}

    def builder(params, inputs):
        out = op(*[inputs["x{}".format(i)] for i in range(len(arrays))])
        if "w" not in weights:
            weights["w"] = rng.uniform(0.5, 1.5, out.shape)
        return te.reduce_sum(out * te.Tensor(weights["w"]))

    graph = te.ComputationGraph(builder, {}, name = "primitive")
    point = {"x{}".format(i): te.Tensor(a, requires_grad = True) for i, a in enumerate(arrays)}
    return graph, point


def _away_from_zero(rng, shape, low = 0.2):
    return rng.choice([-1.0, 1.0], size = shape) * rng.uniform(low, 1.0, shape)


## Forward values ###############

def test_affine_graph():
    graph = te.ComputationGraph(lambda params, inputs: inputs["x"] * 2.0 + 1.0, {})
    assert te.forward(graph, {"x": 3.0})["output"].item() == 7.0


def test_softmax_values():
    assert np.allclose(te.softmax(te.Tensor([0.0, 0.0, 0.0])).numpy(), [1 / 3] * 3)
    rows = te.softmax(te.Tensor(np.random.default_rng(0).normal(size = (5, 7))), axis = -1).numpy()
    assert np.allclose(rows.sum(axis = -1), 1.0, atol = 1e-12)


def test_layer_norm_values():
    x = te.Tensor(np.random.default_rng(1).normal(size = (4, 16)))
    y = te.layer_norm(x).numpy()
    assert np.max(np.abs(y.mean(axis = -1))) < 1e-9
    assert np.max(np.abs(y.var(axis = -1) - 1.0)) < 1e-9


def test_forward_is_deterministic():
    rng = np.random.default_rng(2)
    x, w = rng.normal(size = (1, 2, 8, 8)), rng.normal(size = (3, 2, 4, 4))
    first = te.conv2d(te.Tensor(x), te.Tensor(w)).numpy()
    assert np.array_equal(first, te.conv2d(te.Tensor(x), te.Tensor(w)).numpy())


def test_shape_error_names_the_node():
    with pytest.raises(te.ShapeError, match = "MatMul"):
        te.matmul(te.Tensor(np.ones((2, 3))), te.Tensor(np.ones((2, 3))))


def test_non_finite_values_are_rejected():
    with np.errstate(all = "ignore"):
        with pytest.raises(te.NonFiniteError):
            te.exp(te.Tensor([1000.0]))
        with pytest.raises(te.NonFiniteError):
            te.log(te.Tensor([-1.0]))
    assert issubclass(te.NonFiniteError, sd.NumericError)


def test_item_needs_one_value():
    assert te.Tensor([[2.5]]).item() == 2.5
    with pytest.raises(te.ShapeError):
        te.Tensor([1.0, 2.0]).item()


## Gradients ###############

def test_square_gradient():
    graph = te.ComputationGraph(lambda params, inputs: inputs["x"] ** 2, {})
    te.forward(graph, {"x": te.Tensor(3.0, requires_grad = True)})
    assert te.backward(graph)["x"].item() == pytest.approx(6.0)


def test_tensor_backward_accumulates_leaf_gradients():
    x = te.Tensor([1.0, 2.0], requires_grad = True)
    y = te.reduce_sum(x * x + x)
    y.backward()
    assert np.allclose(x.grad, [3.0, 5.0])


def test_product_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size = (3, 3)), rng.normal(size = (3, 3))
    graph = te.ComputationGraph(lambda params, inputs: te.reduce_sum(inputs["a"] * inputs["b"]), {})
    point = {"a": te.Tensor(a, requires_grad = True), "b": te.Tensor(b, requires_grad = True)}
    te.forward(graph, point)
    grads = te.backward(graph)
    assert np.allclose(grads["a"].numpy(), b) and np.allclose(grads["b"].numpy(), a)
    assert te.finite_difference_check(graph, point, atol = FD_ATOL).max_relative_error < 1e-6


def test_backward_before_forward():
    graph = te.ComputationGraph(lambda params, inputs: inputs["x"], {})
    with pytest.raises(te.GraphError):
        te.backward(graph)


def test_non_scalar_output_needs_a_gradient():
    graph = te.ComputationGraph(lambda params, inputs: inputs["x"] * 2.0, {})
    point = {"x": te.Tensor([1.0, 2.0], requires_grad = True)}
    te.forward(graph, point)
    with pytest.raises(te.GraphError):
        te.backward(graph)
    assert np.allclose(te.backward(graph, np.array([1.0, 3.0]))["x"].numpy(), [2.0, 6.0])
    with pytest.raises(te.GraphError):
        te.finite_difference_check(graph, point)


def test_graph_signature():
    graph = te.ComputationGraph(lambda params, inputs: te.reduce_sum(inputs["x"]), {}, signature = {"x": (None, 3)})
    te.forward(graph, {"x": np.ones((5, 3))})
    with pytest.raises(te.ShapeError):
        te.forward(graph, {"x": np.ones((5, 4))})


def test_primitives_match_finite_differences():
    rng = np.random.default_rng(4)
    n = lambda *shape: rng.normal(size = shape)
    positive = lambda *shape: rng.uniform(0.5, 2.0, shape)
    cases = [
        (te.add, [n(2, 3), n(3)]),
        (te.sub, [n(2, 3), n(2, 1)]),
        (te.mul, [n(2, 3), n(2, 3)]),
        (te.div, [n(2, 3), positive(2, 3)]),
        (lambda x: -x, [n(4)]),
        (lambda x: x ** 3, [n(4)]),
        (te.matmul, [n(3, 4), n(4, 2)]),
        (te.matmul, [n(2, 3, 4), n(4, 5)]),
        (te.bias_add, [n(2, 3, 4), n(4)]),
        (te.exp, [n(5)]),
        (te.log, [positive(5)]),
        (te.relu, [_away_from_zero(rng, (3, 4))]),
        (te.sigmoid, [n(5)]),
        (te.softplus, [n(5)]),
        (lambda x: te.softmax(x, axis = -1), [n(3, 4)]),
        (te.layer_norm, [n(3, 6)]),
        (lambda x: te.norm(x, axis = -1), [n(4, 2)]),
        (lambda x: te.reduce_sum(x, axis = 1), [n(2, 3, 4)]),
        (lambda x: te.reduce_mean(x, axis = 0, keepdims = True), [n(3, 4)]),
        (lambda x: te.reshape(x, (4, 3)), [n(2, 6)]),
        (lambda x: te.transpose(x, (1, 0, 2)), [n(2, 3, 4)]),
        (lambda x: x[:, 1:3], [n(3, 4)]),
        (lambda x: x[np.array([0, 2, 0])], [n(3, 2)]),
        (lambda x, y: te.concat([x, y], axis = -1), [n(2, 3), n(2, 2)]),
        (lambda x, w: te.conv2d(x, w), [n(1, 2, 6, 6), n(3, 2, 4, 4)]),
        (lambda x, w: te.conv2d(x, w, stride = 1, padding = 1), [n(2, 1, 5, 5), n(2, 1, 3, 3)]),
        (lambda x, w: te.conv_transpose2d(x, w), [n(1, 2, 3, 3), n(2, 3, 4, 4)]),
        (te.global_avg_pool, [n(2, 3, 4, 4)]),
        (te.attention_pool, [n(2, 5, 4), n(4)]),
        (lambda m, lv: te.gaussian_sample(m, lv, np.full((2, 3), 0.7)), [n(2, 3), n(2, 3)]),
    ]
    for index, (op, arrays) in enumerate(cases):
        graph, point = _weighted_sum_graph(op, arrays, seed = index)
        report = te.finite_difference_check(graph, point, atol = FD_ATOL)
        assert report.max_relative_error < 1e-6, (index, report)


def test_conv_transpose_is_the_adjoint_of_conv():
    rng = np.random.default_rng(5)
    x, w = rng.normal(size = (1, 2, 8, 8)), rng.normal(size = (3, 2, 4, 4))
    upstream = rng.normal(size = (1, 3, 4, 4))
    graph = te.ComputationGraph(lambda params, inputs: te.conv2d(inputs["x"], te.Tensor(w)), {})
    te.forward(graph, {"x": te.Tensor(x, requires_grad = True)})
    dx = te.backward(graph, upstream)["x"].numpy()
    assert np.allclose(te.conv_transpose2d(te.Tensor(upstream), te.Tensor(w)).numpy(), dx, atol = 1e-9)


def test_gaussian_sample_treats_noise_as_constant():
    mean, lv = te.Tensor([0.5, -0.5], requires_grad = True), te.Tensor([0.0, np.log(4.0)], requires_grad = True)
    te.reduce_sum(te.gaussian_sample(mean, lv, [1.0, 1.0])).backward()
    assert np.allclose(mean.grad, [1.0, 1.0])
    assert np.allclose(lv.grad, [0.5, 1.0])
    zero = te.gaussian_sample(mean, lv, np.zeros(2)).numpy()
    assert np.array_equal(zero, mean.numpy())


def test_attention_block_matches_finite_differences():
    block = sd.SelfAttention(4, 2).initialize(0)
    x = np.random.default_rng(6).normal(size = (2, 3, 4))
    weights = np.random.default_rng(7).uniform(0.5, 1.5, (2, 3, 4))
    graph = te.ComputationGraph(lambda params, inputs: te.reduce_sum(block(inputs["x"]) * te.Tensor(weights)),
                                block.named_parameters(), name = "attention")
    report = te.finite_difference_check(graph, {"x": te.Tensor(x, requires_grad = True)}, atol = FD_ATOL)
    assert set(report.errors) == set(block.named_parameters()) | {"x"}
    assert report.max_relative_error < 1e-4


def test_no_grad_builds_no_tape():
    x = te.Tensor([1.0, 2.0], requires_grad = True)
    with te.no_grad():
        y = x * 2.0
    assert not y.requires_grad


## Container ###############

def test_container_round_trip():
    entries = {"a": np.arange(6.0).reshape(2, 3), "scalar": np.array(2.5)}
    buffer = io.BytesIO()
    te.save_container(buffer, entries, "kind=test\n")
    loaded, header = te.load_container(io.BytesIO(buffer.getvalue()))
    assert header == "kind=test\n"
    assert list(loaded) == ["a", "scalar"]
    for name, array in entries.items():
        assert loaded[name].shape == array.shape
        assert np.array_equal(loaded[name], array)


def test_container_rejects_bad_files():
    buffer = io.BytesIO()
    te.save_container(buffer, {"a": np.ones(3)})
    payload = buffer.getvalue()
    newer = payload[:len(te.MAGIC)] + struct.pack("<I", te.FORMAT_VERSION + 1) + payload[len(te.MAGIC) + 4:]
    with pytest.raises(te.FormatVersionError):
        te.load_container(io.BytesIO(newer))
    with pytest.raises(te.CheckpointError):
        te.load_container(io.BytesIO(b"GARBAGE!" + payload[8:]))
    with pytest.raises(te.CheckpointError):
        te.load_container(io.BytesIO(payload[:-5]))
