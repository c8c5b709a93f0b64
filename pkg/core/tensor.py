# Copyright 2026 The rasp-dg Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Dense tensors with reverse-mode automatic differentiation.

Every primitive computes its value eagerly with numpy and, when any input
requires a gradient, records a closure mapping the output gradient to the
gradients of its inputs. `backward` replays the closures in reverse
topological order.
"""

import logging
from collections import Counter
from contextlib import contextmanager

import numpy as np

from .errors import GradientError, ShapeError

logger = logging.getLogger("rasp.dg.tensor")


class _State:
    dtype = np.float32
    grad_enabled = True
    counters = []


_dtypes = {
    "f32": np.float32,
    "float32": np.float32,
    "f64": np.float64,
    "float64": np.float64,
}


def get_precision():
    return _State.dtype


def set_precision(precision):
    try:
        _State.dtype = _dtypes[precision] if isinstance(precision, str) else np.dtype(precision).type
    except KeyError:
        raise ValueError(f"unsupported precision: {precision}") from None


@contextmanager
def precision(precision):
    previous = _State.dtype
    set_precision(precision)
    try:
        yield _State.dtype
    finally:
        _State.dtype = previous


@contextmanager
def no_grad():
    previous = _State.grad_enabled
    _State.grad_enabled = False
    try:
        yield
    finally:
        _State.grad_enabled = previous


@contextmanager
def frozen(tensors):
    """Treat the given leaves as constants for the duration of the block."""

    tensors = list(tensors)
    flags = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in zip(tensors, flags):
            t.requires_grad = flag


@contextmanager
def count_ops():
    """Count the forward primitives executed within the block, by kind."""

    counter = Counter()
    _State.counters.append(counter)
    try:
        yield counter
    finally:
        _State.counters.remove(counter)


class Tensor:
    def __init__(self, data, requires_grad=False, *, name=None):
        if isinstance(data, Tensor):
            raise TypeError("cannot wrap a Tensor, use detach()")
        self.data = np.asarray(data, dtype=_State.dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self.op = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def detach(self):
        return Tensor(self.data, name=self.name)

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def backward(self, inputs=None):
        backward(self, inputs)

    def __repr__(self):
        flags = ", requires_grad=True" if self.requires_grad else ""
        op = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flags}{op})"

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
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def var(self, axis=None, keepdims=False):
        return var(self, axis, keepdims)

    def sqrt(self):
        return sqrt(self)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)

    def relu(self):
        return relu(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)

    def softmax(self, axis=-1):
        return softmax(self, axis)

    def log_softmax(self, axis=-1):
        return log_softmax(self, axis)


class Graph:
    """Topologically ordered record of the operations reaching a tensor."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def trace(cls, root):
        visited = set()
        order = []
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    @property
    def leaves(self):
        return [node for node in self.nodes if node.is_leaf and node.requires_grad]

    def __len__(self):
        return len(self.nodes)


def backward(loss, inputs=None):
    """Populate ``grad`` of the differentiable leaves reachable from ``loss``.

    Gradients accumulate into existing ``grad`` arrays. When ``inputs`` is
    given only those leaves are populated, and those unreachable from the
    loss receive zeros.
    """

    if loss.size != 1:
        raise GradientError(f"backward: loss must be a scalar, got shape {loss.shape}")

    wanted = None if inputs is None else {id(t) for t in inputs}
    grads = {id(loss): np.ones_like(loss.data)}

    for node in reversed(Graph.trace(loss).nodes):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node.is_leaf:
            if node.requires_grad and (wanted is None or id(node) in wanted):
                node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad

    for leaf in inputs or ():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


def _lift(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(kind, data, parents, backward_fn):
    for counter in _State.counters:
        counter[kind] += 1
    out = Tensor(data)
    if _State.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = kind
        out._parents = parents
        out._backward = backward_fn
    return out


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _expand(grad, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(grad.reshape((1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        grad = np.expand_dims(grad, tuple(a % len(shape) for a in axes))
    return np.broadcast_to(grad, shape)


def _count(shape, axis):
    if axis is None:
        return int(np.prod(shape))
    axes = (axis,) if isinstance(axis, int) else axis
    return int(np.prod([shape[a] for a in axes]))


def add(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_shape("add", a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), _backward)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_shape("sub", a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), _backward)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_shape("mul", a, b)

    def _backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", a.data * b.data, (a, b), _backward)


def div(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_shape("div", a, b)

    def _backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _make("div", a.data / b.data, (a, b), _backward)


def neg(a):
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def power(a, exponent):
    if isinstance(exponent, Tensor):
        raise TypeError("power: only scalar exponents are supported")

    def _backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make("pow", a.data**exponent, (a,), _backward)


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def _backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), _backward)


def _windows(padded, kh, kw, stride, ho, wo):
    win = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride][:, :, :ho, :wo]


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlation of (N, Cin, H, W) input with a (Cout, Cin, kh, kw) kernel."""

    x, w = _lift(x), _lift(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    n, _, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = _windows(padded, kh, kw, stride, ho, wo)
    out = np.ascontiguousarray(np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2))

    need_x, need_w = x.requires_grad, w.requires_grad

    def _backward(g):
        gx = gw = None
        if need_w:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if need_x:
            gp = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    part = np.tensordot(g, w.data[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                    gp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += part
            gx = gp[:, :, padding : padding + h, padding : padding + wd]
        return gx, gw

    return _make("conv2d", out, (x, w), _backward)


def relu(a):
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0), (a,), lambda g: (np.where(mask, g, 0),))


def sqrt(a):
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g / (2 * out),))


def log(a):
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a):
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def sum_(a, axis=None, keepdims=False):
    def _backward(g):
        return (np.array(_expand(g, a.shape, axis, keepdims)),)

    return _make("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), _backward)


def mean(a, axis=None, keepdims=False):
    count = _count(a.shape, axis)

    def _backward(g):
        return (_expand(g, a.shape, axis, keepdims) / count,)

    return _make("mean", a.data.mean(axis=axis, keepdims=keepdims), (a,), _backward)


def var(a, axis=None, keepdims=False):
    """Population variance (no Bessel correction)."""

    count = _count(a.shape, axis)
    centered = a.data - a.data.mean(axis=axis, keepdims=True)

    def _backward(g):
        return (_expand(g, a.shape, axis, keepdims) * 2 * centered / count,)

    return _make("var", (centered * centered).mean(axis=axis, keepdims=keepdims), (a,), _backward)


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: incompatible shapes {a.shape} and {tuple(shape)}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a, shape):
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: incompatible shapes {a.shape} and {tuple(shape)}") from None
    return _make("broadcast", out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def _softmax(data, axis):
    shifted = data - data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax(data, axis):
    shifted = data - data.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(a, axis=-1):
    out = _softmax(a.data, axis)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), _backward)


def log_softmax(a, axis=-1):
    out = _log_softmax(a.data, axis)

    def _backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (a,), _backward)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of (N, K) logits against integer labels."""

    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: incompatible shapes {logits.shape} and {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError(f"cross_entropy: labels out of range for {k} classes")
    logp = _log_softmax(logits.data, axis=1)
    rows = np.arange(n)

    def _backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1
        return (grad * (g / n),)

    return _make("cross_entropy", -logp[rows, labels].mean(), (logits,), _backward)
