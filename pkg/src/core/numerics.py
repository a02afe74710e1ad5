# -*- coding: utf-8 -*-
"""
数值计算基础模块

提供带反向自动微分的稠密张量（基于 numpy）、可复现的随机数流，
以及带预热学习率调度的 AdamW 优化器。其余所有模块都构建在此之上。

主要内容：
- Tensor：float32 行主序数据 + 可选梯度，记录计算图
- grad_of：对任意参数集合求标量损失的梯度
- Rng：(seed, position) 唯一决定后续抽样的随机数流
- AdamW / adamw_step / lr_schedule
- gradient_check：中心差分梯度校验（float64 参考模式）
"""

import logging
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.core.errors import ContractViolation, NumericError

logger = logging.getLogger('MaskGCT')

_state = threading.local()


def _dtype():
    return getattr(_state, 'dtype', np.float32)


def is_grad_enabled() -> bool:
    return getattr(_state, 'grad_enabled', True)


@contextmanager
def no_grad():
    """推理时关闭计算图记录（线程局部）"""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def reference_precision():
    """float64 参考模式，仅供梯度校验使用"""
    prev = _dtype()
    _state.dtype = np.float64
    try:
        yield
    finally:
        _state.dtype = prev


# ==================== 张量与计算图 ====================

class Tensor:
    """
    稠密张量

    Attributes:
        data: numpy 数组（默认 float32）
        grad: 与 data 同形状的梯度累加器，backward() 之后可用
        requires_grad: 是否参与求导
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[Callable] = None
        self._op = 'leaf'

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # 运算符重载
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return absolute(self)

    def detach(self) -> 'Tensor':
        """梯度阻断标记（stop-gradient）：数值不变，不再向上游传播梯度"""
        return Tensor(self.data.copy())

    def backward(self):
        """从本张量反传，把梯度累加到所有叶子参数的 .grad"""
        grads, order = _backprop(self)
        for node in order:
            if node._backward is None and node.requires_grad:
                g = grads.get(id(node))
                if g is None:
                    continue
                node.grad = g.copy() if node.grad is None else node.grad + g


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data, parents: Sequence[Tensor], op: str, backward: Callable) -> Tensor:
    data = np.asarray(data, dtype=_dtype())
    if not np.all(np.isfinite(data)):
        raise NumericError(op, "non-finite forward value")
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """把广播后的梯度求和还原到原形状"""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _backprop(root: Tensor) -> Tuple[Dict[int, np.ndarray], List[Tensor]]:
    # 迭代式拓扑排序，避免深图递归
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        if node._backward is None:
            continue
        g = grads.get(id(node))
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if not np.all(np.isfinite(pg)):
                raise NumericError(node._op, "non-finite gradient")
            pg = np.asarray(pg, dtype=parent.data.dtype)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return grads, order


def grad_of(loss: Tensor, params: Sequence[Tensor]) -> List[np.ndarray]:
    """
    计算 ∂loss/∂p

    Args:
        loss: 标量损失
        params: 参数（或图中任意中间张量）列表

    Returns:
        与 params 一一对应的梯度；未被损失触及的参数得到全零梯度
    """
    if loss.size != 1:
        raise ContractViolation("E_NON_SCALAR_LOSS", f"loss must be scalar, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise NumericError(loss._op, "non-finite loss")
    if not loss.requires_grad:
        return [np.zeros_like(p.data) for p in params]
    grads, _ = _backprop(loss)
    return [grads[id(p)] if id(p) in grads else np.zeros_like(p.data) for p in params]


# ==================== 基本运算 ====================

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), 'add', backward)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), 'sub', backward)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), 'mul', backward)


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), 'div', backward)


def power(a: TensorLike, exponent: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * exponent * np.power(a.data, exponent - 1),)

    return _make(np.power(a.data, exponent), (a,), 'pow', backward)


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation("E_SHAPE", f"matmul needs ndim >= 2, got {a.shape} @ {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), 'matmul', backward)


def reduce_sum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), 'sum', backward)


def reduce_mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return reduce_sum(a, axis, keepdims) * (1.0 / max(count, 1))


def reshape(a: TensorLike, shape) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), 'reshape', backward)


def transpose(a: TensorLike, axes) -> Tensor:
    a = as_tensor(a)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _make(np.transpose(a.data, axes), (a,), 'transpose', backward)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(p is None or p is Ellipsis or isinstance(p, (slice, int, np.integer)) for p in parts)


def getitem(a: TensorLike, index) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(index)

    def backward(g):
        z = np.zeros_like(a.data)
        if basic:
            z[index] += g
        else:
            np.add.at(z, index, g)
        return (z,)

    return _make(a.data[index], (a,), 'getitem', backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """按整数 ID 查表：weight[ids]"""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ContractViolation("E_RANGE", f"embedding id out of range [0, {weight.shape[0]})")

    def backward(g):
        z = np.zeros_like(weight.data)
        np.add.at(z, ids, g)
        return (z,)

    return _make(weight.data[ids], (weight,), 'embedding', backward)


def concat(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), 'concat', backward)


def stack(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), 'stack', backward)


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        return (g * out_data,)

    return _make(out_data, (a,), 'exp', backward)


def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g / a.data,)

    with np.errstate(divide='ignore', invalid='ignore'):
        out_data = np.log(a.data)
    return _make(out_data, (a,), 'log', backward)


def sqrt(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid='ignore'):
        out_data = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out_data,)

    return _make(out_data, (a,), 'sqrt', backward)


def absolute(a: TensorLike) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * np.sign(a.data),)

    return _make(np.abs(a.data), (a,), 'abs', backward)


def relu(a: TensorLike) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * (a.data > 0),)

    return _make(np.maximum(a.data, 0), (a,), 'relu', backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _make(s, (a,), 'sigmoid', backward)


def silu(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)

    def backward(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return _make(a.data * s, (a,), 'silu', backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: TensorLike) -> Tensor:
    """tanh 近似的 GELU"""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner),)

    return _make(0.5 * x * (1.0 + th), (a,), 'gelu', backward)


def softmax(a: TensorLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), 'softmax', backward)


def log_softmax(a: TensorLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    probs = np.exp(y)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(y, (a,), 'log_softmax', backward)


def straight_through(z: Tensor, e: Tensor) -> Tensor:
    """直通估计：前向取 e 的数值，梯度原样拷贝给 z"""
    return z + (e - z).detach()


# ==================== 随机数流 ====================

@dataclass
class RngState:
    seed: int
    position: int = 0


class Rng:
    """
    可复现随机数流

    每次抽样都由 SeedSequence([seed, position]) 派生独立生成器，
    因此 (seed, position) 完全决定之后的所有抽样结果。
    """

    def __init__(self, seed: int, position: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.position = int(position)

    @classmethod
    def from_state(cls, state: RngState) -> 'Rng':
        return cls(state.seed, state.position)

    def state(self) -> RngState:
        return RngState(self.seed, self.position)

    def _next(self) -> np.random.Generator:
        gen = np.random.default_rng(np.random.SeedSequence([self.seed, self.position]))
        self.position += 1
        return gen

    def split(self, *keys: int) -> 'Rng':
        """派生独立子流；相同 keys 与相同父状态得到相同子流"""
        words = [self.seed, self.position] + [int(k) & 0xFFFFFFFF for k in keys]
        self.position += 1
        child = np.random.SeedSequence(words).generate_state(2, np.uint32)
        return Rng((int(child[0]) << 32) | int(child[1]))

    @staticmethod
    def derive(seed: int, *keys: int) -> 'Rng':
        """不推进任何流，直接由 (seed, keys) 派生"""
        words = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(k) & 0xFFFFFFFF for k in keys]
        child = np.random.SeedSequence(words).generate_state(2, np.uint32)
        return Rng((int(child[0]) << 32) | int(child[1]))

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        return self._next().uniform(low, high, size)

    def normal(self, size=None, loc: float = 0.0, scale: float = 1.0):
        return self._next().normal(loc, scale, size)

    def integers(self, low: int, high: int = None, size=None):
        return self._next().integers(low, high, size)

    def bernoulli(self, p: float, size=None) -> np.ndarray:
        return self._next().random(size) < p

    def gumbel(self, size=None):
        return self._next().gumbel(0.0, 1.0, size)

    def choice(self, n: int, size=None, p=None, replace: bool = True):
        return self._next().choice(n, size=size, p=p, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._next().permutation(n)


# ==================== 优化器 ====================

def lr_schedule(step: int, base: float, warmup: int) -> float:
    """
    线性预热 + 平方根倒数衰减

    lr = base · min(step / warmup, sqrt(warmup / step))，在 step == warmup 处取峰值 base。
    """
    if step < 1:
        raise ContractViolation("E_RANGE", f"lr_schedule step must be >= 1, got {step}")
    warmup = max(int(warmup), 1)
    return base * min(step / warmup, math.sqrt(warmup / step))


@dataclass
class OptimizerState:
    """AdamW 状态：一阶/二阶矩与步数"""
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    base_lr: float = 1e-4
    warmup: int = 32000
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    last_lr: float = field(default=0.0, compare=False)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kwargs) -> 'OptimizerState':
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **kwargs)


def adamw_step(state: OptimizerState, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> Sequence[Tensor]:
    """
    解耦权重衰减的 AdamW 一步更新（原地修改 params）

    Raises:
        ContractViolation: 参数/梯度/矩的数量或形状不一致
        NumericError: 梯度含非有限值
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractViolation("E_SHAPE", f"adamw_step got {len(params)} params, {len(grads)} grads, "
                                           f"{len(state.m)} moments")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise ContractViolation("E_SHAPE", f"adamw_step shape mismatch {p.shape} vs {np.shape(g)}")
        if not np.all(np.isfinite(g)):
            raise NumericError("adamw_step", "non-finite gradient")

    state.step += 1
    lr = lr_schedule(state.step, state.base_lr, state.warmup)
    state.last_lr = lr
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.data.dtype)
    return params


class AdamW:
    """AdamW 优化器的薄封装，持有参数列表与 OptimizerState"""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, warmup: int = 32000,
                 weight_decay: float = 0.01, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = OptimizerState.for_params(self.params, base_lr=lr, warmup=warmup,
                                               weight_decay=weight_decay, beta1=betas[0],
                                               beta2=betas[1], eps=eps)

    def step(self, grads: Sequence[np.ndarray]):
        adamw_step(self.state, self.params, grads)

    @property
    def lr(self) -> float:
        return self.state.last_lr


# ==================== 梯度校验 ====================

def gradient_check(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-3) -> float:
    """
    中心差分梯度校验

    在 float64 参考模式下重放 fn，比较解析梯度与 (f(p+ε) − f(p−ε)) / 2ε。

    Returns:
        所有参数中最大的相对误差 ||a − n|| / (||a|| + ||n||)
    """
    originals = [p.data for p in params]
    worst = 0.0
    try:
        with reference_precision():
            for p in params:
                p.data = p.data.astype(np.float64)
            analytic = grad_of(fn(), params)
            for p, a in zip(params, analytic):
                numeric = np.zeros_like(p.data)
                flat = p.data.reshape(-1)
                num_flat = numeric.reshape(-1)
                with no_grad():
                    for i in range(flat.size):
                        orig = flat[i]
                        flat[i] = orig + eps
                        f_plus = float(fn().data.sum())
                        flat[i] = orig - eps
                        f_minus = float(fn().data.sum())
                        flat[i] = orig
                        num_flat[i] = (f_plus - f_minus) / (2 * eps)
                denom = np.linalg.norm(a) + np.linalg.norm(numeric)
                if denom > 1e-12:
                    worst = max(worst, float(np.linalg.norm(a - numeric) / denom))
    finally:
        for p, data in zip(params, originals):
            p.data = data
    return worst
