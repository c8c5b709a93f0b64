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

"""Instance-level style statistics and (de)normalization."""

from typing import NamedTuple

import numpy as np

from .errors import ShapeError
from .tensor import Tensor

STABILIZER = 1e-5


class StyleStats(NamedTuple):
    """Per-instance, per-channel mean and standard deviation, both (N, C)."""

    mu: Tensor
    sigma: Tensor


def _check_feature(kind, x):
    if x.ndim != 4:
        raise ShapeError(f"{kind}: expected a (N, C, H, W) feature, got shape {x.shape}")


def _spread(t):
    n, c = t.shape
    return t.reshape(n, c, 1, 1)


def instance_stats(x, eps=STABILIZER):
    _check_feature("instance_stats", x)
    mu = x.mean(axis=(2, 3))
    sigma = (x.var(axis=(2, 3)) + eps).sqrt()
    return StyleStats(mu, sigma)


def instance_normalize(x, eps=STABILIZER):
    """Split ``x`` into its content (instance-normalized feature) and style."""

    stats = instance_stats(x, eps)
    content = (x - _spread(stats.mu)) / _spread(stats.sigma)
    return content, stats


def denormalize(content, stats):
    _check_feature("denormalize", content)
    if stats.mu.shape != content.shape[:2] or stats.sigma.shape != content.shape[:2]:
        raise ShapeError(f"denormalize: incompatible shapes {content.shape} and {stats.mu.shape}")
    return content * _spread(stats.sigma) + _spread(stats.mu)


def adain(x, x_style, eps=STABILIZER):
    """Restyle the content of ``x`` with the statistics of ``x_style``."""

    _check_feature("adain", x)
    _check_feature("adain", x_style)
    if x.shape[:2] != x_style.shape[:2]:
        raise ShapeError(f"adain: incompatible shapes {x.shape} and {x_style.shape}")
    content, _ = instance_normalize(x, eps)
    return denormalize(content, instance_stats(x_style, eps))


class AffineParams(NamedTuple):
    gamma: Tensor
    beta: Tensor


class InstanceNorm:
    """Instance normalization layer with learnable affine parameters."""

    def __init__(self, channels, eps=STABILIZER):
        self.channels = channels
        self.eps = eps
        self.affine = AffineParams(
            Tensor(np.ones(channels), requires_grad=True, name="gamma"),
            Tensor(np.zeros(channels), requires_grad=True, name="beta"),
        )

    def __call__(self, x):
        _check_feature("instance_norm", x)
        if x.shape[1] != self.channels:
            raise ShapeError(f"instance_norm: incompatible shapes {x.shape} and {self.affine.gamma.shape}")
        content, _ = instance_normalize(x, self.eps)
        gamma = self.affine.gamma.reshape(1, self.channels, 1, 1)
        beta = self.affine.beta.reshape(1, self.channels, 1, 1)
        return content * gamma + beta
