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

"""Finite-difference verification of the reverse-mode gradients."""

import logging
from typing import Callable, NamedTuple

import numpy as np

from .attack import style_loss
from .backbone import ChannelPlan, Mode, batch_norm, forward_from, init_params
from .mixup import nfm_mix
from .style import InstanceNorm, StyleStats, adain, denormalize, instance_normalize
from .tensor import Tensor, backward, conv2d, cross_entropy, no_grad, precision

logger = logging.getLogger("rasp.dg.gradcheck")

TOLERANCE = 1e-6

# small enough to verify exhaustively in seconds
TINY_PLAN = ChannelPlan(stem=4, widths=(4, 4, 6, 6), strides=(1, 2, 1, 1), num_classes=3)


def relative_error(analytic, numeric):
    """Max of |a - n| / max(|a|, |n|, 1e-12); infinite when either side is not finite."""

    if not (np.isfinite(analytic).all() and np.isfinite(numeric).all()):
        return float("inf")
    if not analytic.size:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float((np.abs(analytic - numeric) / denom).max())


def numeric_gradient(loss_fn, leaf, h=1e-5):
    data = leaf.data
    numeric = np.empty_like(data)
    with no_grad():
        for idx in np.ndindex(data.shape):
            orig = data[idx]
            data[idx] = orig + h
            plus = loss_fn().item()
            data[idx] = orig - h
            minus = loss_fn().item()
            data[idx] = orig
            numeric[idx] = (plus - minus) / (2 * h)
    return numeric


def finite_diff_check(loss_fn, leaf, h=1e-5, *, tamper=None):
    """Max relative error between the analytic and central-difference gradients of ``leaf``."""

    leaf.grad = None
    backward(loss_fn(), inputs=[leaf])
    analytic = leaf.grad.copy()
    if tamper is not None:
        analytic = tamper(analytic)
    return relative_error(analytic, numeric_gradient(loss_fn, leaf, h))


class GradCheck(NamedTuple):
    name: str
    build: Callable
    h: float = 1e-5


class CheckResult(NamedTuple):
    name: str
    error: float
    passed: bool


def _leaf(rng, *shape, low=None, high=None):
    if low is None:
        data = rng.normal(size=shape)
    else:
        data = rng.uniform(low, high, size=shape)
    return Tensor(data, requires_grad=True)


def _projection(rng, shape):
    weights = Tensor(rng.normal(size=shape))
    return lambda t: (t * weights).sum()


def _elementwise(op, shapes, low=None, high=None):
    def build(rng):
        leaves = [_leaf(rng, *s, low=low, high=high) for s in shapes]
        with no_grad():
            out_shape = op(*leaves).shape
        project = _projection(rng, out_shape)
        return (lambda: project(op(*leaves))), leaves

    return build


def _conv(stride, padding):
    def build(rng):
        x = _leaf(rng, 2, 3, 5, 5)
        w = _leaf(rng, 4, 3, 3, 3)
        out = conv2d(x, w, stride, padding)
        project = _projection(rng, out.shape)
        return (lambda: project(conv2d(x, w, stride, padding))), [x, w]

    return build


def _reduction(op):
    def build(rng):
        x = _leaf(rng, 2, 3, 4, 4)
        project = _projection(rng, op(x).shape)
        return (lambda: project(op(x))), [x]

    return build


def _cross_entropy(rng):
    logits = _leaf(rng, 4, 3)
    labels = rng.integers(0, 3, size=4)
    return (lambda: cross_entropy(logits, labels)), [logits]


def _instance_normalize(rng):
    x = _leaf(rng, 2, 3, 4, 4)
    pc, pm, ps = _projection(rng, x.shape), _projection(rng, (2, 3)), _projection(rng, (2, 3))

    def loss():
        content, stats = instance_normalize(x)
        return pc(content) + pm(stats.mu) + ps(stats.sigma)

    return loss, [x]


def _denormalize(rng):
    content = _leaf(rng, 2, 3, 4, 4)
    mu = _leaf(rng, 2, 3)
    sigma = _leaf(rng, 2, 3, low=0.5, high=1.5)
    project = _projection(rng, content.shape)
    return (lambda: project(denormalize(content, StyleStats(mu, sigma)))), [content, mu, sigma]


def _adain(rng):
    x = _leaf(rng, 2, 3, 4, 4)
    x_style = _leaf(rng, 2, 3, 4, 4)
    project = _projection(rng, x.shape)
    return (lambda: project(adain(x, x_style))), [x, x_style]


def _instance_norm_layer(rng):
    layer = InstanceNorm(3)
    layer.affine.gamma.data[:] = rng.uniform(0.5, 1.5, size=3)
    layer.affine.beta.data[:] = rng.normal(size=3)
    x = _leaf(rng, 2, 3, 4, 4)
    project = _projection(rng, x.shape)
    return (lambda: project(layer(x))), [x, layer.affine.gamma, layer.affine.beta]


def _batch_norm(rng):
    params = init_params(int(rng.integers(1 << 31)), TINY_PLAN)
    gamma, beta = params["block2.bn1.gamma"], params["block2.bn1.beta"]
    gamma.data[:] = rng.uniform(0.5, 1.5, size=gamma.shape)
    beta.data[:] = rng.normal(size=beta.shape)
    x = _leaf(rng, 2, 4, 4, 4)
    project = _projection(rng, x.shape)
    return (lambda: project(batch_norm(params, "block2.bn1", x, Mode.BATCH))), [x, gamma, beta]


def _style_pipeline(rng):
    """Targeted style loss through the tail of the network, w.r.t. mu and sigma."""

    params = init_params(int(rng.integers(1 << 31)), TINY_PLAN)
    with no_grad():
        content, stats = instance_normalize(Tensor(rng.normal(size=(2, 4, 4, 4))))
    content = Tensor(content.data)
    mu = Tensor(stats.mu.data + rng.normal(size=(2, 4)), requires_grad=True)
    sigma = Tensor(stats.sigma.data * rng.uniform(0.5, 1.5, size=(2, 4)), requires_grad=True)
    target = np.array([1, 2])

    def loss():
        x = denormalize(content, StyleStats(mu, sigma))
        return style_loss(forward_from(params, x, 3, Mode.BATCH), target)

    return loss, [mu, sigma]


def _nfm(rng):
    x_in = _leaf(rng, 2, 3, 4, 4)
    x_clean = _leaf(rng, 2, 3, 4, 4)
    project = _projection(rng, x_in.shape)
    return (lambda: project(nfm_mix(x_in, x_clean, 0.3))), [x_in, x_clean]


SUITE = [
    GradCheck("add", _elementwise(lambda a, b: a + b, [(3, 4), (4,)])),
    GradCheck("sub", _elementwise(lambda a, b: a - b, [(2, 3, 4), (3, 1)])),
    GradCheck("mul", _elementwise(lambda a, b: a * b, [(2, 3, 4), (1, 3, 4)])),
    GradCheck("div", _elementwise(lambda a, b: a / b, [(3, 4), (3, 4)], low=0.5, high=2.0)),
    GradCheck("pow", _elementwise(lambda a: a**3, [(5,)])),
    GradCheck("matmul", _elementwise(lambda a, b: a @ b, [(3, 4), (4, 2)])),
    GradCheck("relu", _elementwise(lambda a: a.relu(), [(4, 5)])),
    GradCheck("sqrt", _elementwise(lambda a: a.sqrt(), [(4, 5)], low=0.5, high=2.0)),
    GradCheck("log", _elementwise(lambda a: a.log(), [(4, 5)], low=0.5, high=2.0)),
    GradCheck("exp", _elementwise(lambda a: a.exp(), [(4, 5)])),
    GradCheck("conv2d", _conv(1, 1)),
    GradCheck("conv2d-strided", _conv(2, 1)),
    GradCheck("conv2d-unpadded", _conv(2, 0)),
    GradCheck("mean", _reduction(lambda x: x.mean(axis=(2, 3)))),
    GradCheck("var", _reduction(lambda x: x.var(axis=(0, 2, 3), keepdims=True))),
    GradCheck("sum", _reduction(lambda x: x.sum(axis=1))),
    GradCheck("reshape", _reduction(lambda x: x.reshape(2, -1))),
    GradCheck("softmax", _reduction(lambda x: x.reshape(2, -1).softmax())),
    GradCheck("log_softmax", _reduction(lambda x: x.reshape(6, -1).log_softmax())),
    GradCheck("cross_entropy", _cross_entropy),
    GradCheck("instance_normalize", _instance_normalize),
    GradCheck("denormalize", _denormalize),
    GradCheck("adain", _adain),
    GradCheck("instance_norm_layer", _instance_norm_layer),
    GradCheck("batch_norm", _batch_norm),
    GradCheck("style_loss", _style_pipeline, h=1e-6),
    GradCheck("nfm_mix", _nfm),
]


def run_suite(seed=0, *, tolerance=TOLERANCE, corrupt=None, checks=None):
    """Run the gradient checks in 64-bit, one result per (check, leaf).

    ``corrupt`` names a check whose analytic gradients get skewed, a
    negative control for the verification itself.
    """

    results = []
    with precision("float64"):
        for n, check in enumerate(checks or SUITE):
            rng = np.random.default_rng([seed, n])
            loss_fn, leaves = check.build(rng)
            tamper = (lambda g: g * 1.01 + 1e-3) if check.name == corrupt else None
            for k, leaf in enumerate(leaves):
                name = check.name if len(leaves) == 1 else f"{check.name}[{k}]"
                error = finite_diff_check(loss_fn, leaf, check.h, tamper=tamper)
                passed = error <= tolerance
                results.append(CheckResult(name, error, passed))
                logger.debug(f"{name}: max relative error {error:.3e}")
                if not passed:
                    logger.warning(f"{name}: max relative error {error:.3e} exceeds {tolerance:.0e}")
    return results
