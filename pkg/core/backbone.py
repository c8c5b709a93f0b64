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

"""Block-decomposed residual CNN with a linear classifier head.

The feature extractor is ``f = f4 o f3 o f2 o f1`` where block 1 carries the
stem convolution, so the input of block 1 is the image itself.
"""

import json
import logging
from enum import Enum
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import NUM_BLOCKS
from .errors import Error, GradientError, ShapeError
from .tensor import Tensor, conv2d, cross_entropy, get_precision

logger = logging.getLogger("rasp.dg.backbone")

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Mode(str, Enum):
    TRAIN = "train"  # batch statistics, running statistics updated
    BATCH = "batch"  # batch statistics, running statistics untouched
    EVAL = "eval"  # running statistics


class ChannelPlan(NamedTuple):
    in_channels: int = 3
    stem: int = 16
    widths: tuple = (16, 32, 64, 64)
    strides: tuple = (1, 2, 2, 1)
    num_classes: int = 10

    def block_in(self, i):
        return self.in_channels if i == 1 else self.widths[i - 2]

    def block_out(self, i):
        return self.widths[i - 1]

    def block_io(self, i):
        cin = self.stem if i == 1 else self.widths[i - 2]
        return cin, self.block_out(i), self.strides[i - 1]

    def has_projection(self, i):
        cin, cout, stride = self.block_io(i)
        return cin != cout or stride != 1


DEFAULT_PLAN = ChannelPlan()


class BlockFeature(NamedTuple):
    tensor: Tensor
    index: int
    mode: Mode


class BackboneParams:
    """Learnable weights and running statistics of the backbone and head."""

    def __init__(self, plan, tensors, buffers):
        if len(plan.widths) != NUM_BLOCKS or len(plan.strides) != NUM_BLOCKS:
            raise ShapeError(f"backbone: expected {NUM_BLOCKS} blocks, got {len(plan.widths)}")
        self.plan = plan
        self.tensors = tensors
        self.buffers = buffers

    def __getitem__(self, name):
        return self.tensors[name]

    def parameters(self):
        return list(self.tensors.values())

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def grads(self):
        return {name: t.grad if t.grad is not None else np.zeros_like(t.data) for name, t in self.tensors.items()}

    def snapshot(self):
        tensors = {name: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=name) for name, t in self.tensors.items()}
        buffers = {name: b.copy() for name, b in self.buffers.items()}
        return BackboneParams(self.plan, tensors, buffers)

    def state(self):
        state = {name: t.data for name, t in self.tensors.items()}
        state.update(self.buffers)
        return state


def _kaiming(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _conv_names(i):
    prefix = f"block{i}"
    return [f"{prefix}.conv1", f"{prefix}.bn1", f"{prefix}.conv2", f"{prefix}.bn2"]


def init_params(seed, plan=DEFAULT_PLAN):
    rng = np.random.default_rng(seed)
    tensors = {}
    buffers = {}

    def _conv(name, cout, cin, k):
        tensors[name] = Tensor(_kaiming(rng, (cout, cin, k, k), cin * k * k), requires_grad=True, name=name)

    def _bn(name, channels):
        tensors[f"{name}.gamma"] = Tensor(np.ones(channels), requires_grad=True, name=f"{name}.gamma")
        tensors[f"{name}.beta"] = Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.beta")
        buffers[f"{name}.running_mean"] = np.zeros(channels, dtype=get_precision())
        buffers[f"{name}.running_var"] = np.ones(channels, dtype=get_precision())

    _conv("stem.conv", plan.stem, plan.in_channels, 3)
    _bn("stem.bn", plan.stem)
    for i in range(1, NUM_BLOCKS + 1):
        cin, cout, _ = plan.block_io(i)
        _conv(f"block{i}.conv1", cout, cin, 3)
        _bn(f"block{i}.bn1", cout)
        _conv(f"block{i}.conv2", cout, cout, 3)
        _bn(f"block{i}.bn2", cout)
        if plan.has_projection(i):
            _conv(f"block{i}.proj", cout, cin, 1)
            _bn(f"block{i}.bnp", cout)

    width = plan.widths[-1]
    tensors["head.weight"] = Tensor(rng.normal(0.0, np.sqrt(1.0 / width), size=(width, plan.num_classes)), requires_grad=True, name="head.weight")
    tensors["head.bias"] = Tensor(np.zeros(plan.num_classes), requires_grad=True, name="head.bias")

    logger.debug(f"initialized {len(tensors)} tensors, {sum(t.size for t in tensors.values())} weights, seed {seed}")
    return BackboneParams(plan, tensors, buffers)


def batch_norm(params, name, x, mode):
    channels = x.shape[1]
    gamma = params[f"{name}.gamma"].reshape(1, channels, 1, 1)
    beta = params[f"{name}.beta"].reshape(1, channels, 1, 1)

    if mode is Mode.EVAL:
        mean = params.buffers[f"{name}.running_mean"].reshape(1, channels, 1, 1)
        var = params.buffers[f"{name}.running_var"].reshape(1, channels, 1, 1)
        return (x - mean) / np.sqrt(var + BN_EPS) * gamma + beta

    mean = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    if mode is Mode.TRAIN:
        count = x.size // channels
        unbiased = var.data.reshape(channels) * count / max(count - 1, 1)
        rm, rv = f"{name}.running_mean", f"{name}.running_var"
        params.buffers[rm] = (1 - BN_MOMENTUM) * params.buffers[rm] + BN_MOMENTUM * mean.data.reshape(channels)
        params.buffers[rv] = (1 - BN_MOMENTUM) * params.buffers[rv] + BN_MOMENTUM * unbiased
    return (x - mean) / (var + BN_EPS).sqrt() * gamma + beta


def _check_block(params, i):
    if not isinstance(i, (int, np.integer)) or not 1 <= i <= NUM_BLOCKS:
        raise Error(f"invalid block index: {i} (expected 1..{NUM_BLOCKS})")


def block_forward(params, x, i, mode):
    _check_block(params, i)
    plan = params.plan
    if x.ndim != 4 or x.shape[1] != plan.block_in(i):
        raise ShapeError(f"block{i}: expected {plan.block_in(i)} input channels, got shape {x.shape}")
    mode = Mode(mode)

    if i == 1:
        x = batch_norm(params, "stem.bn", conv2d(x, params["stem.conv"], 1, 1), mode).relu()

    _, _, stride = plan.block_io(i)
    conv1, bn1, conv2, bn2 = _conv_names(i)
    h = batch_norm(params, bn1, conv2d(x, params[conv1], stride, 1), mode).relu()
    h = batch_norm(params, bn2, conv2d(h, params[conv2], 1, 1), mode)
    if plan.has_projection(i):
        skip = batch_norm(params, f"block{i}.bnp", conv2d(x, params[f"block{i}.proj"], stride, 0), mode)
    else:
        skip = x
    return (h + skip).relu()


def head(params, x):
    pooled = x.mean(axis=(2, 3))
    return pooled @ params["head.weight"] + params["head.bias"]


def forward_from(params, x, i, mode):
    """Logits of ``g o fL o ... o fi`` applied to ``x``; i = L+1 is the head alone."""

    if not isinstance(i, (int, np.integer)) or not 1 <= i <= NUM_BLOCKS + 1:
        raise Error(f"invalid block index: {i} (expected 1..{NUM_BLOCKS + 1})")
    if i == NUM_BLOCKS + 1 and (x.ndim != 4 or x.shape[1] != params.plan.widths[-1]):
        raise ShapeError(f"head: expected {params.plan.widths[-1]} input channels, got shape {x.shape}")
    for j in range(i, NUM_BLOCKS + 1):
        x = block_forward(params, x, j, mode)
    return head(params, x)


def forward(params, images, mode):
    return forward_from(params, images, 1, mode)


def forward_features(params, images, mode):
    """Full forward keeping the output feature of every block."""

    features = []
    x = images
    for i in range(1, NUM_BLOCKS + 1):
        x = block_forward(params, x, i, mode)
        features.append(BlockFeature(x, i, Mode(mode)))
    return features, head(params, x)


def classification_loss(logits, labels):
    return cross_entropy(logits, labels)


def learning_rate(epoch, base, decay, decay_epoch):
    return base * decay if epoch >= decay_epoch else base


class SGD:
    """Classical momentum: v <- m * v + g; p <- p - lr * v."""

    def __init__(self, momentum=0.9):
        self.momentum = momentum
        self.velocity = {}

    def step(self, params, grads, lr):
        sgd_step(params, grads, lr, self.momentum, self.velocity)


def sgd_step(params, grads, lr, momentum, velocity=None):
    if velocity is None:
        velocity = {}
    for name, grad in grads.items():
        if name not in params.tensors:
            raise GradientError(f"sgd: unknown tensor '{name}'")
        if grad.shape != params[name].shape:
            raise ShapeError(f"sgd: incompatible shapes {params[name].shape} and {grad.shape}")
        if not np.all(np.isfinite(grad)):
            raise GradientError(f"sgd: non-finite gradient for '{name}', step rejected")

    for name, grad in grads.items():
        tensor = params[name]
        v = momentum * velocity[name] + grad if name in velocity else grad
        velocity[name] = v
        tensor.data = (tensor.data - lr * v).astype(tensor.dtype, copy=False)
    return params


def save_checkpoint(path, params, *, epoch, config_hash):
    names = list(params.tensors) + list(params.buffers)
    state = params.state()
    header = {
        "format": "rasp-dg-checkpoint",
        "epoch": epoch,
        "config-hash": config_hash,
        "dtype": "<f4",
        "plan": params.plan._asdict(),
        "tensors": [{"name": name, "shape": list(state[name].shape), "buffer": name in params.buffers} for name in names],
    }
    path = Path(path)
    with path.open("wb") as f:
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        for name in names:
            f.write(np.ascontiguousarray(state[name], dtype="<f4").tobytes())
    logger.debug(f"checkpoint written to '{path}' (epoch {epoch})")


def _read_tensors(f, entries, offset, path):
    tensors = {}
    buffers = {}
    for entry in entries:
        count = int(np.prod(entry["shape"]))
        blob = f.read(4 * count)
        if len(blob) != 4 * count:
            raise Error(f"invalid checkpoint '{path}': truncated tensor '{entry['name']}' at byte offset {offset + len(blob)}")
        offset += len(blob)
        array = np.frombuffer(blob, dtype="<f4").reshape(entry["shape"]).astype(get_precision())
        if entry["buffer"]:
            buffers[entry["name"]] = array
        else:
            tensors[entry["name"]] = Tensor(array, requires_grad=True, name=entry["name"])
    return tensors, buffers


def load_checkpoint(path):
    path = Path(path)
    try:
        f = path.open("rb")
    except OSError as e:
        raise Error(f"cannot read checkpoint '{path}': {e.strerror}") from None
    with f:
        line = f.readline()
        try:
            header = json.loads(line)
        except ValueError as e:
            raise Error(f"invalid checkpoint '{path}': bad header: {e}") from e
        try:
            tensors, buffers = _read_tensors(f, header["tensors"], len(line), path)
            plan = header["plan"]
            plan = ChannelPlan(**{**plan, "widths": tuple(plan["widths"]), "strides": tuple(plan["strides"])})
        except (KeyError, TypeError) as e:
            raise Error(f"invalid checkpoint '{path}': malformed header: {e!r}") from None
    return BackboneParams(plan, tensors, buffers), header
