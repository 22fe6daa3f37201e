# app/services/autodiff.py
"""按运行定义的反向模式自动微分引擎。

每个训练步重新建图；每个原语在前向时登记精确的向量-雅可比积 (VJP)。
参数存放在 ParamStore 中，按名称读取得到的始终是同一份存储，
参考分支与目标分支的参数共享就是靠这一点实现的。
"""
import logging
import math
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from app.models.errors import InvalidArgumentError, NonFiniteError, ShapeError
from app.models.schemas import GradCheckReport, OptimizerConfig

logger = logging.getLogger(__name__)

Axis = Union[None, int, Tuple[int, ...]]
Vjp = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    """计算图节点"""
    __slots__ = ("values", "grad", "op_kind", "parents", "_vjp", "requires_grad")

    def __init__(self, values, parents: Sequence["Node"] = (), op_kind: str = "const", vjp: Optional[Vjp] = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.parents = tuple(parents)
        self.op_kind = op_kind
        self._vjp = vjp
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = any(p.requires_grad for p in self.parents)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def backward(self):
        backward(self)

    def __add__(self, other: "Node") -> "Node":
        return add(self, other)

    def __sub__(self, other: "Node") -> "Node":
        return sub(self, other)

    def __neg__(self) -> "Node":
        return scale(self, -1.0)

    def __matmul__(self, other: "Node") -> "Node":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Node({self.op_kind}, shape={self.shape})"


class Parameter(Node):
    """可训练参数，同时携带 AdamW 的一阶/二阶矩与步数"""
    __slots__ = ("name", "m", "v", "step")

    def __init__(self, name: str, values: np.ndarray):
        super().__init__(np.array(values, dtype=np.float64, copy=True), op_kind="param")
        self.name = name
        self.requires_grad = True
        self.grad = np.zeros_like(self.values)
        self.m = np.zeros_like(self.values)
        self.v = np.zeros_like(self.values)
        self.step = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.shape})"


def constant(values) -> Node:
    return Node(values)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


# ---------------------------------------------------------------- 原语

def matmul(x: Node, w: Node) -> Node:
    """(..., n) @ (n, m)"""
    if w.values.ndim != 2 or x.values.shape[-1] != w.values.shape[0]:
        raise ShapeError("matmul 形状不匹配", x.shape, w.shape)
    n, m = w.values.shape

    def vjp(g):
        gx = g @ w.values.T
        gw = x.values.reshape(-1, n).T @ g.reshape(-1, m)
        return gx, gw

    return Node(x.values @ w.values, (x, w), "matmul", vjp)


def add(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeError("add 形状不匹配", a.shape, b.shape)
    return Node(a.values + b.values, (a, b), "add", lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeError("sub 形状不匹配", a.shape, b.shape)
    return Node(a.values - b.values, (a, b), "sub", lambda g: (g, -g))


def bias_add(x: Node, b: Node) -> Node:
    """沿最后一维加偏置"""
    if b.values.ndim != 1 or x.shape[-1:] != b.shape:
        raise ShapeError("bias_add 形状不匹配", x.shape, b.shape)
    width = b.shape[0]
    return Node(x.values + b.values, (x, b), "bias_add", lambda g: (g, g.reshape(-1, width).sum(axis=0)))


def shift(x: Node, c: float) -> Node:
    return Node(x.values + c, (x,), "shift", lambda g: (g,))


def scale(x: Node, c: float) -> Node:
    return Node(x.values * c, (x,), "scale", lambda g: (g * c,))


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    """沿通道轴（默认最后一维）拼接"""
    if not nodes:
        raise InvalidArgumentError("concat 至少需要一个输入")
    ndim = nodes[0].values.ndim
    ax = axis % ndim
    for node in nodes[1:]:
        a, b = list(nodes[0].shape), list(node.shape)
        if len(a) != len(b) or a[:ax] + a[ax + 1:] != b[:ax] + b[ax + 1:]:
            raise ShapeError("concat 形状不匹配", nodes[0].shape, node.shape)
    splits = np.cumsum([node.shape[ax] for node in nodes])[:-1]

    def vjp(g):
        return np.split(g, splits, axis=ax)

    return Node(np.concatenate([node.values for node in nodes], axis=ax), nodes, "concat", vjp)


def relu(x: Node) -> Node:
    mask = x.values > 0
    return Node(np.where(mask, x.values, 0.0), (x,), "relu", lambda g: (g * mask,))


def leaky_relu(x: Node, slope: float = 0.2) -> Node:
    factor = np.where(x.values > 0, 1.0, slope)
    return Node(x.values * factor, (x,), "leaky_relu", lambda g: (g * factor,))


def max_reduce(x: Node, axis: int) -> Node:
    """沿点轴取最大值，反向只传给 argmax（并列取第一个）"""
    ax = axis % x.values.ndim
    arg = np.expand_dims(np.argmax(x.values, axis=ax), ax)
    out = np.take_along_axis(x.values, arg, axis=ax).squeeze(ax)

    def vjp(g):
        gx = np.zeros_like(x.values)
        np.put_along_axis(gx, arg, np.expand_dims(g, ax), axis=ax)
        return (gx,)

    return Node(out, (x,), "max_reduce", vjp)


def gather_rows(x: Node, indices: np.ndarray) -> Node:
    """x: (..., N, C)，indices: (..., K) → (..., K, C)；下标本身不参与求导"""
    idx = np.asarray(indices, dtype=np.int64)
    if x.values.ndim < 2 or idx.shape[:-1] != x.shape[:-2]:
        raise ShapeError("gather 形状不匹配", x.shape, idx.shape)
    n, c = x.shape[-2:]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise InvalidArgumentError(f"gather 下标越界 [0, {n})")
    out = np.take_along_axis(x.values, idx[..., None], axis=-2)

    def vjp(g):
        gx = np.zeros_like(x.values).reshape(-1, n, c)
        flat_idx = idx.reshape(-1, idx.shape[-1])
        flat_g = g.reshape(-1, idx.shape[-1], c)
        for b in range(gx.shape[0]):
            np.add.at(gx[b], flat_idx[b], flat_g[b])
        return (gx.reshape(x.shape),)

    return Node(out, (x,), "gather", vjp)


def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis: Axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else axis
    axes = tuple(sorted(a % len(shape) for a in axes))
    for a in axes:
        g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum_reduce(x: Node, axis: Axis = None) -> Node:
    return Node(x.values.sum(axis=axis), (x,), "sum", lambda g: (_expand_reduced(g, x.shape, axis).copy(),))


def mean_reduce(x: Node, axis: Axis = None) -> Node:
    out = x.values.mean(axis=axis)
    count = x.values.size // max(1, np.asarray(out).size)
    return Node(out, (x,), "mean", lambda g: (_expand_reduced(g, x.shape, axis) / count,))


def square(x: Node) -> Node:
    return Node(x.values * x.values, (x,), "square", lambda g: (2.0 * x.values * g,))


def sqrt(x: Node) -> Node:
    """平方根；在 0 处取次梯度 0"""
    out = np.sqrt(x.values)

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return Node(out, (x,), "sqrt", vjp)


def reshape(x: Node, shape: Tuple[int, ...]) -> Node:
    return Node(x.values.reshape(shape), (x,), "reshape", lambda g: (g.reshape(x.shape),))


# ---------------------------------------------------------------- 反向传播

def _topological_order(root: Node) -> List[Node]:
    order: List[Node] = []
    visited: Set[int] = set()
    stack: List[Tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Node):
    """从标量损失反向传播。参数梯度累加（不自动清零），训练器每步先清零"""
    if loss.values.size != 1:
        raise InvalidArgumentError(f"backward 需要标量损失，实际形状 {loss.shape}")
    if not loss.requires_grad:
        return
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(_topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
            continue
        node.grad = g
        if node._vjp is None:
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


def reachable_parameters(root: Node) -> Set[str]:
    """图中可达的参数名集合"""
    names: Set[str] = set()
    stack, seen = [root], set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if isinstance(node, Parameter):
            names.add(node.name)
        stack.extend(node.parents)
    return names


def check_finite(node: Node, what: str, batch_ids: Sequence[str] = ()):
    if not np.all(np.isfinite(node.values)):
        raise NonFiniteError(f"{what} 出现非有限值", batch_ids)


# ---------------------------------------------------------------- 参数存储与优化器

class ParamStore:
    """按名称存放可训练参数；同名读取永远返回同一份存储"""

    def __init__(self):
        self._params: Dict[str, Parameter] = {}

    def create(self, name: str, values: np.ndarray) -> Parameter:
        if name in self._params:
            raise InvalidArgumentError(f"参数名重复: {name}")
        param = Parameter(name, values)
        self._params[name] = param
        return param

    def get(self, name: str) -> Parameter:
        try:
            return self._params[name]
        except KeyError:
            raise InvalidArgumentError(f"参数不存在: {name}")

    __getitem__ = get

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix: Optional[str] = None) -> List[str]:
        return [n for n in self._params if prefix is None or n.startswith(prefix)]

    def count(self, prefixes: Optional[Sequence[str]] = None) -> int:
        """参数标量总数，可按前缀过滤"""
        return sum(p.values.size for n, p in self._params.items()
                   if prefixes is None or any(n.startswith(prefix) for prefix in prefixes))

    def zero_grad(self, names: Optional[Sequence[str]] = None):
        for name in names if names is not None else self._params:
            self._params[name].grad[...] = 0.0

    def snapshot(self) -> Dict[str, np.ndarray]:
        """只读副本，供评估线程使用"""
        return {name: p.values.copy() for name, p in self._params.items()}


def cosine_factor(step: int, total_steps: Optional[int]) -> float:
    """余弦调度系数 ½(1+cos(π·step/total))"""
    if not total_steps:
        return 1.0
    ratio = min(max(step, 0), total_steps) / total_steps
    return 0.5 * (1.0 + math.cos(math.pi * ratio))


def learning_rate_at(config: OptimizerConfig, step: int) -> float:
    return config.learning_rate * cosine_factor(step, config.total_steps)


def optimizer_step(store: ParamStore, config: OptimizerConfig, step: int,
                   names: Optional[Sequence[str]] = None) -> float:
    """AdamW（解耦权重衰减）原地更新，返回本步学习率"""
    lr = learning_rate_at(config, step)
    beta1, beta2 = config.betas
    for name in names if names is not None else list(store):
        p = store.get(name)
        g = p.grad
        p.step += 1
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        if config.weight_decay:
            p.values *= 1.0 - lr * config.weight_decay
        p.values -= lr * m_hat / (np.sqrt(v_hat) + config.epsilon)
    return lr


def grad_check(builder: Callable[[ParamStore], Node], store: ParamStore, tolerance: float = 1e-4, h: float = 1e-5,
               names: Optional[Sequence[str]] = None, max_entries: Optional[int] = None, seed: int = 0,
               abs_floor: float = 1e-6) -> GradCheckReport:
    """解析梯度与中心差分的逐参数最大相对误差

    Args:
        builder: 由参数构造标量损失的确定性函数
        max_entries: 每个参数最多抽查的元素个数，None 表示全部
        abs_floor: 相对误差分母的下限，避免极小梯度放大舍入误差
    """
    names = list(names) if names is not None else list(store)
    store.zero_grad(names)
    loss = builder(store)
    check_finite(loss, "梯度检查损失")
    backward(loss)
    analytic = {name: store.get(name).grad.copy() for name in names}
    store.zero_grad(names)

    rng = np.random.default_rng(seed)
    errors: Dict[str, float] = {}
    for name in names:
        param = store.get(name)
        flat = param.values.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for i in entries:
            original = flat[i]
            flat[i] = original + h
            plus = builder(store).item()
            flat[i] = original - h
            minus = builder(store).item()
            flat[i] = original
            if not (math.isfinite(plus) and math.isfinite(minus)):
                raise NonFiniteError(f"参数 {name} 扰动后损失非有限")
            numeric = (plus - minus) / (2.0 * h)
            exact = analytic[name].reshape(-1)[i]
            denom = max(abs(exact), abs(numeric), abs_floor)
            worst = max(worst, abs(exact - numeric) / denom)
        errors[name] = worst
    max_error = max(errors.values(), default=0.0)
    return GradCheckReport(errors=errors, tolerance=tolerance, max_error=max_error, passed=bool(max_error < tolerance))
