"""
KDSM Engine - 反向模式自动微分

职责：
1. Tensor：float64 稠密张量 + 计算图记录
2. Graph：按拓扑序排列的算子记录
3. backward：从标量 loss 反传到所有 requires_grad 叶子

设计原则：
- 全程 float64（梯度检验需要）
- 前向算子是纯函数，不修改输入
- 只有 requires_grad 的路径才记录父节点（常量不入图）
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from models.errors import DimensionError, UsageError

ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    """
    稠密张量

    data: 行主序 float64 数组；shape 与 data.shape 一致
    """

    __slots__ = ('data', 'requires_grad', 'grad', 'name', '_op', '_parents', '_backward')

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._op: str = "leaf"
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label}, requires_grad={self.requires_grad})"

    # ==========================================
    # 基本属性
    # ==========================================

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> 'Tensor':
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # ==========================================
    # 建图
    # ==========================================

    @staticmethod
    def from_op(data: np.ndarray, parents: Sequence['Tensor'], op: str,
                backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]) -> 'Tensor':
        """
        创建算子输出

        Args:
            data: 前向结果
            parents: 输入张量（顺序与 backward 返回的梯度一致）
            op: 算子名
            backward: g_out → 每个输入的梯度（不需要时可为 None）
        """
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._op = op
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # ==========================================
    # 逐元素算子
    # ==========================================

    def __add__(self, other: ArrayLike) -> 'Tensor':
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        try:
            out = self.data + other.data
        except ValueError:
            raise DimensionError("add", a_shape, b_shape)

        def _backward(g):
            return unbroadcast(g, a_shape), unbroadcast(g, b_shape)

        return Tensor.from_op(out, (self, other), "add", _backward)

    __radd__ = __add__

    def __neg__(self) -> 'Tensor':
        return Tensor.from_op(-self.data, (self,), "neg", lambda g: (-g,))

    def __sub__(self, other: ArrayLike) -> 'Tensor':
        return self + (-as_tensor(other))

    def __rsub__(self, other: ArrayLike) -> 'Tensor':
        return as_tensor(other) + (-self)

    def __mul__(self, other: ArrayLike) -> 'Tensor':
        other = as_tensor(other)
        a, b = self.data, other.data
        try:
            out = a * b
        except ValueError:
            raise DimensionError("mul", a.shape, b.shape)

        def _backward(g):
            return unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)

        return Tensor.from_op(out, (self, other), "mul", _backward)

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> 'Tensor':
        other = as_tensor(other)
        a, b = self.data, other.data

        def _backward(g):
            return unbroadcast(g / b, a.shape), unbroadcast(-g * a / (b * b), b.shape)

        return Tensor.from_op(a / b, (self, other), "div", _backward)

    def __matmul__(self, other: 'Tensor') -> 'Tensor':
        return matmul(self, other)

    def relu(self) -> 'Tensor':
        mask = self.data > 0
        return Tensor.from_op(np.where(mask, self.data, 0.0), (self,), "relu", lambda g: (g * mask,))

    def exp(self) -> 'Tensor':
        out = np.exp(self.data)
        return Tensor.from_op(out, (self,), "exp", lambda g: (g * out,))

    def log(self) -> 'Tensor':
        x = self.data
        return Tensor.from_op(np.log(x), (self,), "log", lambda g: (g / x,))

    # ==========================================
    # 形状算子
    # ==========================================

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old_shape = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError:
            raise DimensionError("reshape", old_shape, shape)
        return Tensor.from_op(out, (self,), "reshape", lambda g: (g.reshape(old_shape),))

    def transpose(self, *axes) -> 'Tensor':
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))
        return Tensor.from_op(self.data.transpose(axes), (self,), "transpose",
                              lambda g: (g.transpose(inverse),))

    @property
    def T(self) -> 'Tensor':
        return self.transpose()

    # ==========================================
    # 归约算子
    # ==========================================

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        in_shape = self.shape

        def _backward(g):
            if axis is not None and not keepdims:
                axes = (axis,) if isinstance(axis, int) else tuple(axis)
                axes = sorted(a % len(in_shape) for a in axes)
                for a in axes:
                    g = np.expand_dims(g, a)
            return (np.broadcast_to(g, in_shape).copy(),)

        return Tensor.from_op(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum", _backward)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def as_tensor(value: ArrayLike) -> Tensor:
    """常量包装（不需要梯度）"""
    return value if isinstance(value, Tensor) else Tensor(value)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """把广播后的梯度求和回原形状"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, extent in enumerate(shape):
        if extent == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    矩阵乘法（支持前导批维度）

    Raises:
        DimensionError: 内维不一致
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", a.shape, b.shape)
    x, y = a.data, b.data

    def _backward(g):
        ga = g @ np.swapaxes(y, -1, -2)
        gb = np.swapaxes(x, -1, -2) @ g
        return unbroadcast(ga, x.shape), unbroadcast(gb, y.shape)

    return Tensor.from_op(x @ y, (a, b), "matmul", _backward)


# ==========================================
# 计算图与反传
# ==========================================

@dataclass(frozen=True)
class OpRecord:
    """图中一个算子节点"""
    op: str
    inputs: Tuple[int, ...]   # 输入节点 id（叶子也有 id）
    output: Tensor


class Graph:
    """
    以 loss 为根追溯出的计算图

    nodes 为拓扑序（输入先于输出）；leaves 为需要梯度的叶子
    """

    def __init__(self, nodes: List[OpRecord], leaves: List[Tensor], ids: Dict[int, int]):
        self.nodes = nodes
        self.leaves = leaves
        self._ids = ids

    def node_id(self, tensor: Tensor) -> int:
        return self._ids[id(tensor)]

    @classmethod
    def trace(cls, root: Tensor) -> 'Graph':
        """迭代式 DFS 拓扑排序（父节点按输入顺序访问，保证确定性）"""
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            for parent in reversed(tensor._parents):
                if id(parent) not in visited and parent.requires_grad:
                    stack.append((parent, False))

        ids = {id(t): i for i, t in enumerate(order)}
        nodes, leaves = [], []
        for tensor in order:
            if tensor.is_leaf:
                leaves.append(tensor)
            else:
                inputs = tuple(ids[id(p)] for p in tensor._parents if id(p) in ids)
                nodes.append(OpRecord(op=tensor._op, inputs=inputs, output=tensor))
        return cls(nodes, leaves, ids)


def backward(loss: Tensor, graph: Optional[Graph] = None) -> Dict[Tensor, np.ndarray]:
    """
    反向传播

    梯度累加到叶子的 .grad 上，并返回 {叶子: 本次梯度}

    Raises:
        UsageError: loss 不是标量
    """
    if loss.size != 1:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    graph = graph or Graph.trace(loss)

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for record in reversed(graph.nodes):
        out = record.output
        g = grads.pop(id(out), None)
        if g is None:
            continue
        parent_grads = out._backward(g)
        for parent, pg in zip(out._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise DimensionError(f"backward[{out._op}]", pg.shape, parent.shape)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg

    result: Dict[Tensor, np.ndarray] = {}
    for leaf in graph.leaves:
        g = grads.get(id(leaf))
        if g is None:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    return result
