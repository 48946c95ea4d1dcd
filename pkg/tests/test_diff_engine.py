"""
自動微分エンジン・ParameterSet・HVPのテスト
"""

import numpy as np
import pytest

import diff_engine as de
from diff_engine import Graph, ParameterSet
from pu_exceptions import ContractError, ShapeError


def _two_layer_params(seed: int = 0) -> ParameterSet:
    rng = np.random.default_rng(seed)
    return ParameterSet({
        "w1": rng.normal(size=(3, 4)) * 0.5, "b1": rng.normal(size=4) * 0.1,
        "w2": rng.normal(size=(4, 1)) * 0.5, "b2": rng.normal(size=1) * 0.1,
    })


def _two_layer_loss(params: ParameterSet, x: np.ndarray):
    graph = Graph()
    t = graph.parameters_from(params)
    h = de.tanh(de.linear(graph.constant(x), t["w1"], t["b1"]))
    out = de.linear(h, t["w2"], t["b2"])
    loss = de.reduce_mean(de.square(out))
    return loss, graph


def test_relu_linear_replicate_tile():
    graph = Graph()
    assert de.relu(graph.constant(np.array([-1.0, 0.0, 2.0]))).value.tolist() == [0.0, 0.0, 2.0]

    x = graph.constant(np.array([[1.0, 2.0, 3.0]]))
    y = de.linear(x, graph.constant(np.eye(3)), graph.constant(np.zeros(3)))
    assert np.array_equal(y.value, x.value)

    rows = graph.constant(np.array([[1.0, 2.0]]))
    assert de.replicate(rows, 3).value.tolist() == [[1, 2], [1, 2], [1, 2]]
    block = graph.constant(np.array([[1.0], [2.0]]))
    assert de.tile(block, 2).value.ravel().tolist() == [1, 2, 1, 2]
    assert de.replicate(block, 2).value.ravel().tolist() == [1, 1, 2, 2]


def test_shape_errors_name_both_shapes():
    graph = Graph()
    a = graph.constant(np.zeros((2, 3)))
    b = graph.constant(np.zeros((3, 2)))
    with pytest.raises(ShapeError) as info:
        de.add(a, b)
    assert info.value.shapes == [(2, 3), (3, 2)]
    with pytest.raises(ShapeError):
        de.linear(a, graph.constant(np.zeros((2, 2))), graph.constant(np.zeros(2)))
    with pytest.raises(ShapeError):
        de.concat([a, graph.constant(np.zeros((3, 3)))], axis=1)


def test_linear_gradient_is_outer_product():
    """sum(x·W) の ∂/∂W は x の行和を並べたもの"""
    x = np.array([[1.0, 2.0], [3.0, -1.0]])
    graph = Graph()
    w = graph.parameter("w", np.ones((2, 3)))
    b = graph.parameter("b", np.zeros(3))
    loss = de.sum_all(de.linear(graph.constant(x), w, b))
    grads = de.backward(graph, loss)
    assert np.allclose(grads["w"], np.outer(x.sum(axis=0), np.ones(3)))
    assert np.allclose(grads["b"], [2.0, 2.0, 2.0])


def test_backward_matches_finite_differences():
    """2層ネット（21パラメータ）で中心差分と一致"""
    x = np.random.default_rng(1).normal(size=(6, 3))
    params = _two_layer_params()
    loss, graph = _two_layer_loss(params, x)
    analytic = de.backward(graph, loss)
    numeric = de.finite_difference_grad(lambda p: float(_two_layer_loss(p, x)[0].value), params)
    assert params.size == 21
    assert de.relative_error(analytic, numeric) < 1e-6


def test_ops_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    params = ParameterSet({"a": rng.normal(size=(3, 2)), "b": rng.normal(size=(3, 2)), "c": rng.normal(size=(1, 2))})

    def build(p: ParameterSet):
        graph = Graph()
        t = graph.parameters_from(p)
        mixed = de.mul(de.sub(t["a"], t["b"]), de.add(t["a"], de.scale(t["b"], 0.5)))
        joined = de.concat([de.relu(mixed), de.replicate(t["c"], 3)], axis=1)
        pooled = de.reduce_mean(de.tile(joined, 2), axis=0)
        return de.sum_all(de.square(pooled)), graph

    loss, graph = build(params)
    analytic = de.backward(graph, loss)
    numeric = de.finite_difference_grad(lambda p: float(build(p)[0].value), params)
    assert de.relative_error(analytic, numeric) < 1e-6


def test_disconnected_parameter_gets_zero_gradient():
    graph = Graph()
    used = graph.parameter("used", np.array([2.0]))
    graph.parameter("unused", np.array([[1.0, 2.0]]))
    grads = de.backward(graph, de.sum_all(de.square(used)))
    assert grads["used"].tolist() == [4.0]
    assert np.array_equal(grads["unused"], np.zeros((1, 2)))


def test_backward_requires_scalar_loss():
    graph = Graph()
    p = graph.parameter("p", np.ones(3))
    with pytest.raises(ContractError):
        de.backward(graph, de.square(p))
    with pytest.raises(ContractError):
        de.backward(Graph())


def test_reduce_mean_is_order_independent():
    values = np.random.default_rng(3).normal(size=(1000, 4)) * 1e6
    perm = np.random.default_rng(4).permutation(1000)
    graph = Graph()
    a = de.reduce_mean(graph.constant(values), axis=0).value
    b = de.reduce_mean(graph.constant(values[perm]), axis=0).value
    assert np.array_equal(a, b)


def test_hvp_quadratic():
    """L = ½θᵀAθ → hvp(v) = A·v"""
    rng = np.random.default_rng(5)
    m = rng.normal(size=(5, 5))
    a = m + m.T
    params = ParameterSet({"theta": rng.normal(size=5)})

    def loss_grad(p: ParameterSet):
        theta = p["theta"]
        return 0.5 * float(theta @ a @ theta), ParameterSet({"theta": a @ theta})

    v = ParameterSet({"theta": rng.normal(size=5)})
    assert np.allclose(de.hvp(loss_grad, params, v)["theta"], a @ v["theta"], atol=1e-6)
    assert np.allclose(de.hvp(loss_grad, params, params.zeros_like())["theta"], 0.0)


def test_hvp_of_linear_loss_is_zero():
    c = np.array([1.0, -2.0, 3.0])
    params = ParameterSet({"theta": np.array([0.3, 0.1, -0.4])})
    v = ParameterSet({"theta": np.array([1.0, 1.0, 1.0])})
    result = de.hvp(lambda p: (float(c @ p["theta"]), ParameterSet({"theta": c})), params, v)
    assert np.max(np.abs(result["theta"])) <= 1e-8


def test_axpy():
    y = ParameterSet({"w": np.array([1.0, 2.0])})
    x = ParameterSet({"w": np.array([5.0, -1.0])})
    assert de.axpy(0.0, x, y).bit_equal(y)
    assert np.array_equal(de.axpy(1.0, y.scale(-1.0), y)["w"], [0.0, 0.0])
    assert np.allclose(de.axpy(-0.1, x, y)["w"], [0.5, 2.1])
    with pytest.raises(ContractError):
        de.axpy(1.0, ParameterSet({"v": np.zeros(2)}), y)


def test_parameter_set_helpers():
    params = _two_layer_params(7)
    flat = params.flatten()
    assert flat.shape == (params.size,)
    assert params.unflatten(flat).bit_equal(params)
    assert params.zeros_like().norm() == 0.0
    assert params.dot(params) == pytest.approx(params.norm() ** 2)
    assert params.first_nonfinite() is None
    broken = params.replace(b2=np.array([np.nan]))
    assert broken.first_nonfinite() == "b2"
    with pytest.raises(ValueError):
        params["w1"][0, 0] = 1.0
    with pytest.raises(ContractError):
        params.replace(missing=np.zeros(1))


def test_add_all_preserves_order():
    sets = [ParameterSet({"w": np.array([float(i)])}) for i in range(4)]
    assert de.add_all(sets)["w"].tolist() == [6.0]
    with pytest.raises(ContractError):
        de.add_all([])


def test_graphs_cannot_be_mixed():
    a = Graph().constant(np.ones(2))
    b = Graph().constant(np.ones(2))
    with pytest.raises(ContractError):
        de.add(a, b)
