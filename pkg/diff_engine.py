"""
MPU-TTA - Meta-learned Test-Time Adaptation for Point Cloud Upsampling
Copyright (c) 2026 MPU-TTA Project. All rights reserved.

密配列上の小さなリバースモード自動微分エンジン
バックボーンに必要な演算と、MAML外側勾配用のヘッセ行列ベクトル積を提供する
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from pu_exceptions import ContractError, ShapeError

logger = logging.getLogger("mpu_tta.engine")

# (損失, 勾配) を返す関数の型
LossGradFn = Callable[["ParameterSet"], Tuple[float, "ParameterSet"]]


class ParameterSet(Mapping[str, np.ndarray]):
    """
    名前付きの学習可能配列の集合（θ, θ_n, θ′）

    値は読み取り専用で、更新は常に新しいParameterSetを返す
    """

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        self._arrays: Dict[str, np.ndarray] = {}
        for name, value in arrays.items():
            array = np.array(value, dtype=np.float64)
            array.setflags(write=False)
            self._arrays[name] = array

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def __repr__(self) -> str:
        return f"ParameterSet({len(self)} tensors, {self.size} scalars)"

    @property
    def schema(self) -> Tuple[Tuple[str, Tuple[int, ...]], ...]:
        return tuple((name, array.shape) for name, array in self._arrays.items())

    @property
    def size(self) -> int:
        return int(sum(array.size for array in self._arrays.values()))

    def check_schema(self, other: "ParameterSet", op: str) -> None:
        if self.schema != other.schema:
            raise ContractError(f"{op}: parameter schemas differ ({self.schema} vs {other.schema})")

    def flatten(self) -> np.ndarray:
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([array.ravel() for array in self._arrays.values()])

    def unflatten(self, vector: np.ndarray) -> "ParameterSet":
        """このスキーマで1次元ベクトルを復元する"""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.size,):
            raise ContractError(f"unflatten: expected vector of length {self.size}, got {vector.shape}")
        arrays, offset = {}, 0
        for name, array in self._arrays.items():
            arrays[name] = vector[offset:offset + array.size].reshape(array.shape)
            offset += array.size
        return ParameterSet(arrays)

    def zeros_like(self) -> "ParameterSet":
        return ParameterSet({name: np.zeros_like(array) for name, array in self._arrays.items()})

    def scale(self, factor: float) -> "ParameterSet":
        return ParameterSet({name: factor * array for name, array in self._arrays.items()})

    def norm(self) -> float:
        return float(math.sqrt(sum(float((array * array).sum()) for array in self._arrays.values())))

    def dot(self, other: "ParameterSet") -> float:
        self.check_schema(other, "dot")
        return float(sum(float((self[name] * other[name]).sum()) for name in self._arrays))

    def first_nonfinite(self) -> Optional[str]:
        """NaN/Infを含む最初のパラメータ名（なければNone）"""
        for name, array in self._arrays.items():
            if not np.all(np.isfinite(array)):
                return name
        return None

    def replace(self, **arrays: np.ndarray) -> "ParameterSet":
        updated = dict(self._arrays)
        for name, value in arrays.items():
            if name not in updated:
                raise ContractError(f"replace: unknown parameter '{name}'")
            updated[name] = value
        return ParameterSet(updated)

    def bit_equal(self, other: "ParameterSet") -> bool:
        return self.schema == other.schema and all(
            np.array_equal(self[name], other[name]) for name in self._arrays
        )


def axpy(a: float, x: ParameterSet, y: ParameterSet) -> ParameterSet:
    """要素ごとの a·x + y（更新式 θ - α∇L の基本演算）"""
    x.check_schema(y, "axpy")
    if a == 0.0:
        return ParameterSet(y)
    return ParameterSet({name: a * x[name] + y[name] for name in y})


def add_all(sets: Sequence[ParameterSet]) -> ParameterSet:
    """ParameterSetを順番どおりに足し合わせる（決定的な集約順）"""
    if not sets:
        raise ContractError("add_all: nothing to add")
    total = sets[0]
    for item in sets[1:]:
        total = axpy(1.0, item, total)
    return total


# ---------------------------------------------------------------------------
# 計算グラフ
# ---------------------------------------------------------------------------

VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@dataclass
class Node:
    """計算グラフの1ノード（演算種別・入力ID・値・局所勾配関数）"""
    op: str
    inputs: Tuple[int, ...]
    value: np.ndarray
    vjp: Optional[VJP] = None
    name: Optional[str] = None


class Tensor:
    """グラフ上のノードへのハンドル"""

    __slots__ = ("graph", "id")

    def __init__(self, graph: "Graph", node_id: int):
        self.graph = graph
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.graph.nodes[self.id].value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(op={self.graph.nodes[self.id].op}, shape={self.shape})"


class Graph:
    """
    トポロジカル順に並んだノード列（テープ）

    ノードは追加順に並ぶので、入力は常に自分より前にある
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.parameters: Dict[str, int] = {}
        self.output: Optional[Tensor] = None

    def _append(self, node: Node) -> Tensor:
        self.nodes.append(node)
        return Tensor(self, len(self.nodes) - 1)

    def parameter(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.parameters:
            raise ContractError(f"parameter '{name}' registered twice")
        tensor = self._append(Node("parameter", (), np.asarray(value, dtype=np.float64), name=name))
        self.parameters[name] = tensor.id
        return tensor

    def parameters_from(self, params: ParameterSet) -> Dict[str, Tensor]:
        return {name: self.parameter(name, params[name]) for name in params}

    def constant(self, value: np.ndarray) -> Tensor:
        return self._append(Node("constant", (), np.asarray(value, dtype=np.float64)))

    def record(self, op: str, inputs: Sequence[Tensor], value: np.ndarray, vjp: VJP) -> Tensor:
        """任意の演算を記録する（vjpは出力勾配から各入力の勾配を返す）"""
        for tensor in inputs:
            if tensor.graph is not self:
                raise ContractError(f"{op}: input tensor belongs to a different graph")
        return self._append(Node(op, tuple(t.id for t in inputs), np.asarray(value, dtype=np.float64), vjp))


def _graph_of(*tensors: Tensor) -> Graph:
    graph = tensors[0].graph
    for tensor in tensors[1:]:
        if tensor.graph is not graph:
            raise ContractError("tensors from different graphs cannot be combined")
    return graph


# ---------------------------------------------------------------------------
# 順伝播演算
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ W + b（x: (n, in), W: (in, out), b: (out,)）"""
    graph = _graph_of(x, weight, bias)
    xv, wv, bv = x.value, weight.value, bias.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise ShapeError("linear", xv.shape, wv.shape)
    if bv.shape != (wv.shape[1],):
        raise ShapeError("linear(bias)", wv.shape, bv.shape)

    def vjp(g: np.ndarray):
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return graph.record("linear", [x, weight, bias], xv @ wv + bv, vjp)


def relu(x: Tensor) -> Tensor:
    xv = x.value
    mask = xv > 0

    def vjp(g: np.ndarray):
        return (g * mask,)

    return x.graph.record("relu", [x], np.where(mask, xv, 0.0), vjp)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.value)

    def vjp(g: np.ndarray):
        return (g * (1.0 - out * out),)

    return x.graph.record("tanh", [x], out, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    graph = _graph_of(a, b)
    if a.shape != b.shape:
        raise ShapeError("add", a.shape, b.shape)
    return graph.record("add", [a, b], a.value + b.value, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    graph = _graph_of(a, b)
    if a.shape != b.shape:
        raise ShapeError("sub", a.shape, b.shape)
    return graph.record("sub", [a, b], a.value - b.value, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    graph = _graph_of(a, b)
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    av, bv = a.value, b.value
    return graph.record("mul", [a, b], av * bv, lambda g: (g * bv, g * av))


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return x.graph.record("scale", [x], factor * x.value, lambda g: (factor * g,))


def square(x: Tensor) -> Tensor:
    xv = x.value
    return x.graph.record("square", [x], xv * xv, lambda g: (2.0 * xv * g,))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """列方向（axis=1）に連結する。連結軸以外の形状は一致が必要"""
    graph = _graph_of(*tensors)
    values = [t.value for t in tensors]
    ref = values[0].shape
    for value in values[1:]:
        if value.ndim != len(ref) or any(
            value.shape[d] != ref[d] for d in range(len(ref)) if d != axis
        ):
            raise ShapeError("concat", ref, value.shape)
    splits = np.cumsum([v.shape[axis] for v in values])[:-1]

    def vjp(g: np.ndarray):
        return tuple(np.split(g, splits, axis=axis))

    return graph.record("concat", list(tensors), np.concatenate(values, axis=axis), vjp)


def replicate(x: Tensor, r: int) -> Tensor:
    """各行を順序を保ってr回繰り返す（[[a],[b]] -> [[a]*r..., [b]*r...]）"""
    if r < 1:
        raise ShapeError("replicate", x.shape, (r,))
    xv = x.value
    n = xv.shape[0]

    def vjp(g: np.ndarray):
        return (g.reshape((n, r) + xv.shape[1:]).sum(axis=1),)

    return x.graph.record("replicate", [x], np.repeat(xv, r, axis=0), vjp)


def tile(x: Tensor, n: int) -> Tensor:
    """行ブロック全体をn回並べる（レプリカコード表の展開用）"""
    if n < 1:
        raise ShapeError("tile", x.shape, (n,))
    xv = x.value
    rows = xv.shape[0]
    reps = (n,) + (1,) * (xv.ndim - 1)

    def vjp(g: np.ndarray):
        return (g.reshape((n, rows) + xv.shape[1:]).sum(axis=0),)

    return x.graph.record("tile", [x], np.tile(xv, reps), vjp)


def reduce_mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    """
    平均。axis=0なら(1, F)を返す

    行の並び順によらず同じ値になるよう、列ごとにmath.fsumで正確に丸める
    """
    xv = x.value
    if axis is None:
        count = xv.size
        out = np.array(math.fsum(xv.ravel()) / count)

        def vjp(g: np.ndarray):
            return (np.full(xv.shape, float(g) / count),)

    elif axis == 0 and xv.ndim == 2:
        count = xv.shape[0]
        out = np.array([[math.fsum(column) / count for column in xv.T]])

        def vjp(g: np.ndarray):
            return (np.broadcast_to(g / count, xv.shape).copy(),)

    else:
        raise ShapeError("reduce_mean", xv.shape, (axis,))
    return x.graph.record("reduce_mean", [x], out, vjp)


def sum_all(x: Tensor) -> Tensor:
    xv = x.value
    return x.graph.record("sum", [x], np.array(xv.sum()), lambda g: (np.full(xv.shape, float(g)),))


# ---------------------------------------------------------------------------
# 逆伝播
# ---------------------------------------------------------------------------

def backward(graph: Graph, loss: Optional[Tensor] = None) -> ParameterSet:
    """
    スカラー損失から全パラメータへの勾配を求める

    Args:
        graph: 計算グラフ
        loss: 損失ノード（省略時はgraph.output）

    Returns:
        登録済みパラメータと同じスキーマの勾配（依存しないものはゼロ）
    """
    loss = loss if loss is not None else graph.output
    if loss is None:
        raise ContractError("backward: no loss node given and graph has no output")
    if loss.value.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.value.shape}")

    grads: List[Optional[np.ndarray]] = [None] * (loss.id + 1)
    grads[loss.id] = np.ones_like(loss.value)
    for node_id in range(loss.id, -1, -1):
        g = grads[node_id]
        node = graph.nodes[node_id]
        if g is None or node.vjp is None:
            continue
        for input_id, input_grad in zip(node.inputs, node.vjp(g)):
            if input_grad is None:
                continue
            if grads[input_id] is None:
                grads[input_id] = np.array(input_grad, dtype=np.float64)
            else:
                grads[input_id] = grads[input_id] + input_grad

    result = {}
    for name, node_id in graph.parameters.items():
        value = graph.nodes[node_id].value
        g = grads[node_id] if node_id <= loss.id else None
        result[name] = np.zeros_like(value) if g is None else g.reshape(value.shape)
    return ParameterSet(result)


def hvp(loss_grad_fn: LossGradFn, params: ParameterSet, vector: ParameterSet,
        eps: Optional[float] = None) -> ParameterSet:
    """
    ヘッセ行列ベクトル積 ∇²L(θ)·v を勾配の中心差分で求める

        (∇L(θ + εv) - ∇L(θ - εv)) / (2ε),  ε = 1e-4·(1 + |θ|∞)
    """
    params.check_schema(vector, "hvp")
    if eps is None:
        flat = params.flatten()
        eps = 1e-4 * (1.0 + (float(np.abs(flat).max()) if flat.size else 0.0))
    _, g_plus = loss_grad_fn(axpy(eps, vector, params))
    _, g_minus = loss_grad_fn(axpy(-eps, vector, params))
    return axpy(-1.0, g_minus, g_plus).scale(1.0 / (2.0 * eps))


def finite_difference_grad(loss_fn: Callable[[ParameterSet], float], params: ParameterSet,
                           eps: float = 1e-6) -> ParameterSet:
    """中心差分による勾配（勾配チェック用のオラクル）"""
    flat = params.flatten()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        upper = loss_fn(params.unflatten(bumped))
        bumped[i] = flat[i] - eps
        lower = loss_fn(params.unflatten(bumped))
        grad[i] = (upper - lower) / (2.0 * eps)
    return params.unflatten(grad)


def relative_error(analytic: ParameterSet, numeric: ParameterSet) -> float:
    """ノルムベースの相対誤差"""
    diff = axpy(-1.0, numeric, analytic).norm()
    denom = max(analytic.norm(), numeric.norm(), 1e-12)
    return diff / denom
