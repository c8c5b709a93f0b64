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

import re

import numpy as np
import pytest

from core.errors import GradientError, ShapeError
from core.tensor import (
    Graph,
    Tensor,
    backward,
    conv2d,
    count_ops,
    cross_entropy,
    frozen,
    get_precision,
    no_grad,
    precision,
)


def test_square_gradient():
    w = Tensor([1.0, 2.0], requires_grad=True)
    backward((w * w).sum())
    assert w.grad.tolist() == [2.0, 4.0]


def test_unreachable_leaf():
    w = Tensor([1.0, 2.0], requires_grad=True)
    v = Tensor([3.0], requires_grad=True)
    backward((w * w).sum(), inputs=[w, v])
    assert v.grad.tolist() == [0.0]


def test_gradients_accumulate():
    w = Tensor([1.0, 2.0], requires_grad=True)
    backward((w * w).sum())
    backward(w.sum())
    assert w.grad.tolist() == [3.0, 5.0]


def test_non_scalar_loss():
    w = Tensor([1.0, 2.0], requires_grad=True)
    msg = re.escape("backward: loss must be a scalar, got shape (2,)")
    with pytest.raises(GradientError, match=msg):
        backward(w * w)


def test_cross_entropy_gradient():
    with precision("float64"):
        logits = Tensor([[0.5, -1.0, 2.0]], requires_grad=True)
        backward(cross_entropy(logits, [0]))
        p = np.exp(logits.data) / np.exp(logits.data).sum()
        expected = p - np.array([[1.0, 0.0, 0.0]])
        np.testing.assert_allclose(logits.grad, expected, rtol=1e-10)


@pytest.mark.parametrize(
    "op,a,b",
    [
        ("add", (2, 3), (4,)),
        ("mul", (2, 3), (3, 2)),
        ("sub", (5,), (4,)),
    ],
)
def test_incompatible_shapes(op, a, b):
    x, y = Tensor(np.ones(a)), Tensor(np.ones(b))
    fn = {"add": lambda: x + y, "mul": lambda: x * y, "sub": lambda: x - y}[op]
    msg = re.escape(f"{op}: incompatible shapes {a} and {b}")
    with pytest.raises(ShapeError, match=msg):
        fn()


def test_matmul_shapes():
    msg = re.escape("matmul: incompatible shapes (2, 3) and (2, 3)")
    with pytest.raises(ShapeError, match=msg):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_broadcast_gradient():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.arange(3.0), requires_grad=True)
    backward((a * b).sum())
    assert b.grad.tolist() == [2.0, 2.0, 2.0]
    assert a.grad.tolist() == [[0.0, 1.0, 2.0]] * 2


def test_linearity():
    with precision("float64"):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)

        def f():
            return (x * x * x).sum()

        def g():
            return x.exp().mean()

        backward(f())
        grad_f = x.grad
        x.grad = None
        backward(g())
        grad_g = x.grad
        x.grad = None
        backward(f() * 2.5 + g() * -1.5)
        np.testing.assert_allclose(x.grad, 2.5 * grad_f - 1.5 * grad_g, rtol=0, atol=1e-12)


def test_conv2d_forward():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    with precision("float64"):
        out = conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data

    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros((2, 4, 3, 3))
    for n in range(2):
        for o in range(4):
            for i in range(3):
                for j in range(3):
                    expected[n, o, i, j] = (padded[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]).sum()
    np.testing.assert_allclose(out, expected, rtol=1e-10, atol=1e-12)


def test_conv2d_shapes():
    msg = re.escape("conv2d: incompatible shapes (1, 2, 4, 4) and (3, 3, 3, 3)")
    with pytest.raises(ShapeError, match=msg):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 3, 3, 3))))


def test_determinism():
    rng = np.random.default_rng(2)
    x, w = rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(4, 3, 3, 3))
    a = conv2d(Tensor(x), Tensor(w), padding=1).relu().mean()
    b = conv2d(Tensor(x), Tensor(w), padding=1).relu().mean()
    assert a.data.tobytes() == b.data.tobytes()


def test_no_grad():
    w = Tensor([1.0], requires_grad=True)
    with no_grad():
        out = w * w
    assert not out.requires_grad
    assert out.is_leaf


def test_frozen():
    w = Tensor([1.0], requires_grad=True)
    x = Tensor([2.0], requires_grad=True)
    with frozen([w]):
        assert not w.requires_grad
        backward((w * x).sum())
    assert w.requires_grad
    assert w.grad is None
    assert x.grad.tolist() == [1.0]


def test_graph_order():
    a = Tensor([1.0], requires_grad=True)
    b = a * a
    c = b + a
    nodes = Graph.trace(c).nodes
    assert nodes[-1] is c
    assert nodes.index(a) < nodes.index(b)
    assert Graph.trace(c).leaves == [a]


def test_count_ops():
    x = Tensor(np.ones((2, 2)))
    with count_ops() as ops:
        (x + x).relu().sum()
    assert ops == {"add": 1, "relu": 1, "sum": 1}


def test_precision():
    assert get_precision() is np.float32
    with precision("f64"):
        assert Tensor([1]).dtype == np.float64
    assert Tensor([1]).dtype == np.float32

    with pytest.raises(ValueError, match="unsupported precision: f16"):
        with precision("f16"):
            pass


def test_cross_entropy_labels():
    logits = Tensor(np.zeros((2, 3)))
    msg = re.escape("cross_entropy: labels out of range for 3 classes")
    with pytest.raises(ShapeError, match=msg):
        cross_entropy(logits, [0, 3])
