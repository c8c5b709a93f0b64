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

"""Randomized adversarial perturbation of feature style statistics.

The content of a block input is kept fixed while its per-instance mean and
standard deviation take sign-gradient steps towards a randomly drawn wrong
class. Examples whose ground-truth confidence drops below ``tau`` stop early.
"""

import logging
from enum import Enum
from typing import List, NamedTuple, Optional

import numpy as np
from typing_extensions import Annotated

from . import TRACE
from .backbone import Mode, forward_from
from .config import Config
from .errors import ConfigError, Error
from .style import StyleStats, denormalize, instance_normalize
from .tensor import Tensor, _softmax, backward, cross_entropy, frozen, no_grad

logger = logging.getLogger("rasp.dg.attack")


class Objective(str, Enum):
    RANDOM_TARGET = "random_target"
    GT_ASCENT = "gt_ascent"


class AttackConfig(Config):
    epsilon: Annotated[
        float,
        Config.Node("epsilon"),
        Config.Help("base sign-step size"),
        Config.Notes("The step applied to a C-channel feature is epsilon * channel-ref / C."),
    ] = 2 / 255
    iterations: Annotated[
        int,
        Config.Node("iterations"),
        Config.Help("maximum number of attack iterations"),
    ] = 5
    tau: Annotated[
        float,
        Config.Node("tau"),
        Config.Help("ground-truth confidence below which an example stops"),
        Config.Notes("0 never stops early, 1 stops every example before its first step."),
    ] = 0.8
    objective: Annotated[
        Objective,
        Config.Node("objective"),
        Config.Help("'random_target' descends towards a wrong class, 'gt_ascent' ascends the true-class loss"),
    ] = Objective.RANDOM_TARGET
    channel_ref: Annotated[
        int,
        Config.Node("channel-ref"),
        Config.Help("channel count at which the step equals epsilon"),
    ] = 64
    sigma_floor: Annotated[
        float,
        Config.Node("sigma-floor"),
        Config.Help("lower clamp of the perturbed standard deviation"),
    ] = 1e-4

    def validate(self):
        if self.epsilon <= 0:
            raise ConfigError(f"param 'epsilon': out of range: {self.epsilon} (expected > 0)")
        if self.iterations < 1:
            raise ConfigError(f"param 'iterations': out of range: {self.iterations} (expected >= 1)")
        if not 0 <= self.tau <= 1:
            raise ConfigError(f"param 'tau': out of range: {self.tau} (expected 0 <= tau <= 1)")
        if self.channel_ref < 1:
            raise ConfigError(f"param 'channel_ref': out of range: {self.channel_ref} (expected >= 1)")
        if self.sigma_floor <= 0:
            raise ConfigError(f"param 'sigma_floor': out of range: {self.sigma_floor} (expected > 0)")


class AttackTrace(NamedTuple):
    iterations_run: int
    steps: np.ndarray
    initial_gt_confidence: float
    final_gt_confidence: float
    content: np.ndarray
    aborted: bool = False
    stats_path: Optional[List[StyleStats]] = None


def sample_target(y, num_classes, rng):
    """Draw a wrong class uniformly for every label in ``y``."""

    if num_classes < 2:
        raise Error(f"sample_target: need at least 2 classes, got {num_classes}")
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise Error(f"sample_target: labels out of range for {num_classes} classes")
    draw = rng.integers(0, num_classes - 1, size=y.shape)
    return draw + (draw >= y)


def step_scale(channels, cfg):
    return cfg.epsilon * cfg.channel_ref / channels


def style_loss(logits, y_target):
    return cross_entropy(logits, y_target)


def gt_confidence(logits, y):
    return _softmax(logits.data, axis=1)[np.arange(len(y)), y]


def _aborted(rounds, steps, initial, content, path):
    initial = float("nan") if initial is None else initial
    return AttackTrace(rounds, steps, initial, initial, content.data, aborted=True, stats_path=path)


def rasp_perturb(params, x, i, y, y_target, cfg, mode=Mode.BATCH, *, record_path=False):
    """Restyle the block-``i`` input ``x`` adversarially.

    Returns the perturbed feature and an :class:`AttackTrace`. The returned
    feature is differentiable with respect to ``x`` through its content; the
    perturbed statistics enter as constants.
    """

    # running statistics never move during the attack
    mode = Mode(mode)
    if mode is Mode.TRAIN:
        mode = Mode.BATCH

    y = np.asarray(y)
    y_target = np.asarray(y_target)
    n, c = x.shape[:2]
    if y.shape != (n,) or y_target.shape != (n,):
        raise Error(f"rasp_perturb: expected {n} labels and targets, got {y.shape} and {y_target.shape}")

    with no_grad():
        content, stats = instance_normalize(x.detach())
    content = Tensor(content.data)
    mu0, sigma0 = stats.mu.data, stats.sigma.data

    eps = step_scale(c, cfg)
    mu_step = eps * np.linalg.norm(mu0, axis=1, keepdims=True)
    sigma_step = eps * np.linalg.norm(sigma0, axis=1, keepdims=True)

    if cfg.objective is Objective.GT_ASCENT:
        target, direction = y, -1.0
    else:
        target, direction = y_target, 1.0

    mu, sigma = mu0.copy(), sigma0.copy()
    active = np.ones(n, dtype=bool)
    steps = np.zeros(n, dtype=int)
    path = [StyleStats(Tensor(mu), Tensor(sigma))] if record_path else None
    rounds = 0
    initial = final = None

    with frozen(params.parameters()):
        for t in range(cfg.iterations):
            mu_t = Tensor(mu, requires_grad=True)
            sigma_t = Tensor(sigma, requires_grad=True)
            logits = forward_from(params, denormalize(content, StyleStats(mu_t, sigma_t)), i, mode)
            if not np.isfinite(logits.data).all():
                logger.warning(f"block {i}: non-finite logits at iteration {t}, attack aborted")
                return x, _aborted(rounds, steps, initial, content, path)
            confidence = gt_confidence(logits, y)
            if t == 0:
                initial = float(confidence.mean())
            active &= confidence >= cfg.tau
            if not active.any():
                final = float(confidence.mean())
                break

            backward(style_loss(logits, target), inputs=[mu_t, sigma_t])
            g_mu, g_sigma = mu_t.grad, sigma_t.grad
            if not (np.isfinite(g_mu).all() and np.isfinite(g_sigma).all()):
                logger.warning(f"block {i}: non-finite style gradient at iteration {t}, attack aborted")
                return x, _aborted(rounds, steps, initial, content, path)

            rows = active[:, None]
            mu = np.where(rows, mu - direction * mu_step * np.sign(g_mu), mu)
            sigma = np.where(rows, np.maximum(sigma - direction * sigma_step * np.sign(g_sigma), cfg.sigma_floor), sigma)
            mu, sigma = mu.astype(mu0.dtype), sigma.astype(sigma0.dtype)
            steps += active
            rounds += 1
            if record_path:
                path.append(StyleStats(Tensor(mu), Tensor(sigma)))
            logger.log(TRACE, f"block {i}: iteration {t}, {int(active.sum())}/{n} active, gt confidence {confidence.mean():.4f}")

        if final is None:
            with no_grad():
                logits = forward_from(params, denormalize(content, StyleStats(Tensor(mu), Tensor(sigma))), i, mode)
            final = float(gt_confidence(logits, y).mean())

    logger.debug(f"block {i}: {rounds} rounds, gt confidence {initial:.4f} -> {final:.4f}")

    attached, _ = instance_normalize(x)
    x_adv = denormalize(attached, StyleStats(Tensor(mu), Tensor(sigma)))
    return x_adv, AttackTrace(rounds, steps, initial, final, content.data, stats_path=path)
