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

"""Mixing of augmented and clean block outputs."""

import logging
from enum import Enum

import numpy as np
from typing_extensions import Annotated

from .config import Config
from .errors import ConfigError, ShapeError
from .style import StyleStats, denormalize, instance_normalize, instance_stats
from .tensor import Tensor

logger = logging.getLogger("rasp.dg.mixup")


class Variant(str, Enum):
    NFM = "nfm"
    STYLE_MIXUP = "style_mixup"
    FEATURE_MIXUP = "feature_mixup"


class MixConfig(Config):
    beta_a: Annotated[
        float,
        Config.Node("beta-a"),
        Config.Help("first shape parameter of the Beta distribution of alpha"),
    ] = 0.1
    beta_b: Annotated[
        float,
        Config.Node("beta-b"),
        Config.Help("second shape parameter of the Beta distribution of alpha"),
    ] = 0.1
    variant: Annotated[
        Variant,
        Config.Node("variant"),
        Config.Help("what gets mixed: 'nfm' content, 'style_mixup' statistics, 'feature_mixup' raw features"),
    ] = Variant.NFM
    per_example: Annotated[
        bool,
        Config.Node("per-example"),
        Config.Help("draw one alpha per example instead of one per batch"),
    ] = False

    def validate(self):
        for name in ("beta_a", "beta_b"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"param '{name}': out of range: {getattr(self, name)} (expected > 0)")


def sample_alpha(cfg, rng, size=None):
    return rng.beta(cfg.beta_a, cfg.beta_b, size=size)


def _check(kind, x_in, x_clean, alpha):
    if x_in.ndim != 4 or x_in.shape != x_clean.shape:
        raise ShapeError(f"{kind}: incompatible shapes {x_in.shape} and {x_clean.shape}")
    alpha = np.asarray(alpha)
    if alpha.ndim == 0:
        return float(alpha)
    if alpha.shape != (x_in.shape[0],):
        raise ShapeError(f"{kind}: expected one alpha per example, got shape {alpha.shape}")
    return alpha


def _weights(alpha, ndim):
    if isinstance(alpha, float):
        return alpha, 1.0 - alpha
    shape = (-1,) + (1,) * (ndim - 1)
    return Tensor(alpha.reshape(shape)), Tensor((1.0 - alpha).reshape(shape))


def nfm_mix(x_in, x_clean, alpha):
    """Mix the normalized contents, keep the (adversarial) style of ``x_in``."""

    alpha = _check("nfm_mix", x_in, x_clean, alpha)
    content_in, stats_in = instance_normalize(x_in)
    content_clean, _ = instance_normalize(x_clean)
    a, b = _weights(alpha, 4)
    return denormalize(content_clean * a + content_in * b, stats_in)


def style_mixup(x_in, x_clean, alpha):
    """Keep the content of ``x_in``, mix the style statistics."""

    alpha = _check("style_mixup", x_in, x_clean, alpha)
    content_in, stats_in = instance_normalize(x_in)
    stats_clean = instance_stats(x_clean)
    a, b = _weights(alpha, 2)
    mixed = StyleStats(stats_clean.mu * a + stats_in.mu * b, stats_clean.sigma * a + stats_in.sigma * b)
    return denormalize(content_in, mixed)


def feature_mixup(x_in, x_clean, alpha):
    alpha = _check("feature_mixup", x_in, x_clean, alpha)
    a, b = _weights(alpha, 4)
    return x_clean * a + x_in * b


_mixers = {
    Variant.NFM: nfm_mix,
    Variant.STYLE_MIXUP: style_mixup,
    Variant.FEATURE_MIXUP: feature_mixup,
}


def mix(variant, x_in, x_clean, alpha):
    return _mixers[Variant(variant)](x_in, x_clean, alpha)
