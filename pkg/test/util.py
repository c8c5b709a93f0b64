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

import logging
import sys

import numpy as np

from core.backbone import ChannelPlan
from core.config import merge
from core.glyphs import DomainDataset
from core.trainer import TrainConfig
from core.util import setup_logging

logger = logging.getLogger("rasp.dg")
set_level = setup_logging()

verbosity = sum(arg.count("v") for arg in sys.argv if arg.startswith("-") and not arg.startswith("--"))
if verbosity > 2:
    set_level(logging.DEBUG)
elif verbosity > 1:
    set_level(logging.INFO)

TINY_PLAN = ChannelPlan(stem=4, widths=(4, 4, 6, 6), strides=(1, 2, 2, 1), num_classes=3)


def tiny_config(**overrides):
    state = {
        "epochs": 2,
        "batch-size": 8,
        "eval-batch-size": 16,
        "lr": 0.05,
        "model": {"stem-width": TINY_PLAN.stem, "widths": list(TINY_PLAN.widths)},
    }
    return TrainConfig(merge(state, overrides))


def toy_dataset(seed=0, domains=("a", "b", "c"), num_classes=3, per_class=(4, 2, 2), size=8):
    """Small in-memory dataset: the class lights up a channel, the domain shifts brightness."""

    rng = np.random.default_rng(seed)
    data = {}
    for d, domain in enumerate(domains):
        for split, count in zip(("train", "val", "test"), per_class):
            labels = np.repeat(np.arange(num_classes), count)
            images = rng.uniform(0.0, 0.3, size=(len(labels), 3, size, size)) + 0.2 * d
            images[np.arange(len(labels)), labels % 3] += 0.5
            data[(domain, split)] = (images.astype("<f4"), labels)
    return DomainDataset(data, domains, num_classes)
