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

"""Dual-path training, evaluation and the leave-one-domain-out protocol."""

import itertools
import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from enum import Enum
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional

import numpy as np
from typing_extensions import Annotated

from . import NUM_BLOCKS
from .attack import AttackConfig, rasp_perturb, sample_target
from .backbone import (
    DEFAULT_PLAN,
    SGD,
    Mode,
    block_forward,
    classification_loss,
    forward,
    forward_features,
    head,
    init_params,
    learning_rate,
    save_checkpoint,
)
from .config import Config, merge
from .errors import ConfigError, DatasetError, Error
from .mixup import MixConfig, mix, sample_alpha
from .tensor import Tensor, backward, cross_entropy, no_grad
from .util import batched, canonical_hash, serialize_json, worker_cap

logger = logging.getLogger("rasp.dg.trainer")

METRIC_COLUMNS = ["epoch", "phase", "domain", "loss", "accuracy", "attacks_applied", "mean_attack_iters"]


class Method(str, Enum):
    ERM = "erm"
    RASP = "rasp"
    RASP_NFM = "rasp_nfm"


class TrainConfig(Config):
    method: Annotated[
        Method,
        Config.Node("method"),
        Config.Help("'erm' clean path only, 'rasp' adds the attacked path, 'rasp_nfm' mixes it back"),
    ] = Method.RASP_NFM
    attack: Annotated[
        AttackConfig,
        Config.Node("attack"),
        Config.Help("style attack"),
    ] = None
    mix: Annotated[
        MixConfig,
        Config.Node("mix"),
        Config.Help("mixing of attacked and clean features"),
    ] = None
    rasp_blocks: Annotated[
        tuple,
        Config.Node("rasp-blocks"),
        Config.Help("blocks whose input may be attacked"),
        Config.Notes("Block 1 starts with the stem, attacking it perturbs the image statistics."),
    ] = (2, 3, 4)
    p_rasp: Annotated[
        float,
        Config.Node("p-rasp"),
        Config.Help("probability of attacking a block in a step"),
    ] = 0.5
    p_nfm: Annotated[
        float,
        Config.Node("p-nfm"),
        Config.Help("probability of mixing after an attacked block"),
    ] = 0.5
    lr: Annotated[
        float,
        Config.Node("lr"),
        Config.Help("base learning rate"),
    ] = 0.0005
    momentum: Annotated[
        float,
        Config.Node("momentum"),
        Config.Help("SGD momentum"),
    ] = 0.9
    lr_decay: Annotated[
        float,
        Config.Node("lr-decay"),
        Config.Help("learning rate factor applied from lr-decay-epoch on"),
    ] = 0.1
    lr_decay_epoch: Annotated[
        int,
        Config.Node("lr-decay-epoch"),
        Config.Help("first (0-based) epoch with the decayed learning rate"),
    ] = 30
    epochs: Annotated[
        int,
        Config.Node("epochs"),
        Config.Help("number of epochs"),
    ] = 60
    batch_size: Annotated[
        int,
        Config.Node("batch-size"),
        Config.Help("training batch size"),
    ] = 32
    eval_batch_size: Annotated[
        int,
        Config.Node("eval-batch-size"),
        Config.Help("evaluation batch size"),
    ] = 200
    seed: Annotated[
        int,
        Config.Node("seed"),
        Config.Help("seed of weight init, shuffling and augmentation draws"),
    ] = 0
    holdout_domain: Annotated[
        str,
        Config.Node("holdout-domain"),
        Config.Help("domain excluded from training, name or index"),
    ] = None
    stem_width: Annotated[
        int,
        Config.Node("model.stem-width"),
        Config.Help("channels of the stem convolution"),
    ] = DEFAULT_PLAN.stem
    widths: Annotated[
        tuple,
        Config.Node("model.widths"),
        Config.Help("output channels of the residual blocks"),
    ] = DEFAULT_PLAN.widths

    def validate(self):
        for name in ("p_rasp", "p_nfm"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ConfigError(f"param '{name}': out of range: {value} (expected 0 <= {name} <= 1)")
        blocks = self.rasp_blocks
        if any(not isinstance(i, int) or not 1 <= i <= NUM_BLOCKS for i in blocks) or len(set(blocks)) != len(blocks):
            raise ConfigError(f"param 'rasp_blocks': invalid block set: {list(blocks)} (expected distinct indices in 1..{NUM_BLOCKS})")
        for name in ("epochs", "batch_size", "eval_batch_size", "stem_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"param '{name}': out of range: {getattr(self, name)} (expected >= 1)")
        if len(self.widths) != NUM_BLOCKS or any(not isinstance(w, int) or w < 1 for w in self.widths):
            raise ConfigError(f"param 'widths': invalid widths: {list(self.widths)} (expected {NUM_BLOCKS} positive integers)")
        if self.lr <= 0:
            raise ConfigError(f"param 'lr': out of range: {self.lr} (expected > 0)")

    def plan(self, num_classes):
        return DEFAULT_PLAN._replace(stem=self.stem_width, widths=tuple(self.widths), num_classes=num_classes)


ARMS = {
    "erm": {"method": "erm"},
    "rasp": {"method": "rasp"},
    "rasp_nfm": {"method": "rasp_nfm"},
    "rasp_gt": {"method": "rasp_nfm", "attack": {"objective": "gt_ascent"}},
    "style_mixup": {"method": "rasp_nfm", "mix": {"variant": "style_mixup"}},
    "feature_mixup": {"method": "rasp_nfm", "mix": {"variant": "feature_mixup"}},
}

DIRECTION_CHECKS = (("rasp_nfm", "rasp"), ("rasp_nfm", "rasp_gt"))
GRACE_POINTS = 0.5


def arm_config(cfg, arm, **overrides):
    try:
        arm_overrides = ARMS[arm]
    except KeyError:
        raise ConfigError(f"unknown method: '{arm}' (expected one of {', '.join(ARMS)})") from None
    return TrainConfig(merge(merge(cfg.to_dict(), arm_overrides), overrides))


class StepLog(NamedTuple):
    rasp_blocks: List[int]
    nfm_blocks: List[int]
    traces: list
    loss_labels: list
    aborted: bool = False


class StepResult(NamedTuple):
    loss: float
    correct: int
    grads: Dict[str, np.ndarray]
    log: StepLog


def _augmented_logits(params, x, labels, features, logits, cfg, rng, log):
    """Logits of the attacked path, None when an attack aborts."""

    # None while the augmented path still coincides with the clean one
    x_aug = None
    for i in range(1, NUM_BLOCKS + 1):
        attacked = i in cfg.rasp_blocks and rng.random() < cfg.p_rasp
        if attacked:
            x_in = x if i == 1 else (features[i - 2].tensor if x_aug is None else x_aug)
            y_target = sample_target(labels, params.plan.num_classes, rng)
            x_aug, trace = rasp_perturb(params, x_in, i, labels, y_target, cfg.attack, Mode.BATCH)
            if trace.aborted:
                return None
            log.rasp_blocks.append(i)
            log.traces.append((i, trace))
        elif x_aug is None:
            continue

        x_aug = block_forward(params, x_aug, i, Mode.BATCH)
        if attacked and cfg.method is Method.RASP_NFM and rng.random() < cfg.p_nfm:
            alpha = sample_alpha(cfg.mix, rng, size=len(labels) if cfg.mix.per_example else None)
            x_aug = mix(cfg.mix.variant, x_aug, features[i - 1].tensor, alpha)
            log.nfm_blocks.append(i)

    if x_aug is None:
        return logits
    return head(params, x_aug)


def train_step(params, images, labels, cfg, rng):
    """Loss and gradients of one batch, clean path plus the augmented path."""

    labels = np.asarray(labels)
    params.zero_grad()
    x = Tensor(images)
    features, logits = forward_features(params, x, Mode.TRAIN)
    loss = classification_loss(logits, labels)
    log = StepLog([], [], [], [labels])

    if cfg.method is not Method.ERM:
        aug = _augmented_logits(params, x, labels, features, logits, cfg, rng, log)
        if aug is None:
            log = log._replace(aborted=True)
            logger.warning("attack aborted, step continues on the clean path only")
        else:
            log.loss_labels.append(labels)
            loss = loss + classification_loss(aug, labels)

    backward(loss)
    correct = int((logits.data.argmax(axis=1) == labels).sum())
    return StepResult(float(loss.item()), correct, params.grads(), log)


def score(params, images, labels, batch_size=200):
    """Mean loss and accuracy (in percent) on the inference path."""

    labels = np.asarray(labels)
    if not len(labels):
        return float("nan"), float("nan")
    loss = 0.0
    correct = 0
    with no_grad():
        for batch in batched(range(len(labels)), batch_size):
            idx = np.asarray(batch)
            logits = forward(params, Tensor(images[idx]), Mode.EVAL)
            loss += cross_entropy(logits, labels[idx]).item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
    return loss / len(labels), 100.0 * correct / len(labels)


def evaluate(params, images, labels, batch_size=200):
    return score(params, images, labels, batch_size)[1]


class RunReport(NamedTuple):
    config: dict
    config_hash: str
    holdout_domain: Optional[str]
    source_domains: List[str]
    epochs: List[dict]
    selected_epoch: int
    best_val_accuracy: float
    test_accuracy: Optional[float]
    attack_counts: Dict[str, int]
    nfm_counts: Dict[str, int]
    mean_attack_iters: float
    aborted_attacks: int

    def to_dict(self):
        return self._asdict()


def _mean(values):
    return float(np.mean(values)) if len(values) else 0.0


def train(cfg, dataset, *, out_dir=None, on_epoch=None):
    """Train on every domain but the holdout, select by source validation.

    Returns the parameters of the selected epoch and the run report.
    """

    holdout = dataset.resolve(cfg.holdout_domain)
    sources = [d for d in dataset.domains if d != holdout]
    if not sources:
        raise ConfigError("empty source set: every domain is held out")
    if len(sources) < 2:
        logger.warning(f"training on a single source domain: {sources[0]}")
    for domain in sources:
        if not len(dataset.split(domain, "val")[1]):
            raise DatasetError(f"{domain}/val: empty validation split, model selection needs every source domain")

    images, labels = dataset.pooled(sources, "train")
    params = init_params(cfg.seed, cfg.plan(dataset.num_classes))
    optimizer = SGD(cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 1])
    config = cfg.to_dict()
    config_hash = canonical_hash(config)

    rows = []
    epochs = []
    best = None
    best_val = -1.0
    selected = -1
    selected_test = None
    attack_counts = Counter()
    nfm_counts = Counter()
    all_steps = []
    aborted = 0

    logger.info(f"training {cfg.method.value} on {', '.join(sources)}, holdout {holdout}")
    for epoch in range(cfg.epochs):
        lr = learning_rate(epoch, cfg.lr, cfg.lr_decay, cfg.lr_decay_epoch)
        loss_sum = 0.0
        correct = 0
        epoch_attacks = 0
        epoch_steps = []
        for batch in batched(rng.permutation(len(labels)), cfg.batch_size):
            idx = np.asarray(batch)
            result = train_step(params, images[idx], labels[idx], cfg, rng)
            optimizer.step(params, result.grads, lr)
            loss_sum += result.loss * len(idx)
            correct += result.correct
            attack_counts.update(result.log.rasp_blocks)
            nfm_counts.update(result.log.nfm_blocks)
            epoch_attacks += len(result.log.rasp_blocks)
            for _, trace in result.log.traces:
                epoch_steps.extend(trace.steps.tolist())
            aborted += result.log.aborted
            logger.debug(f"epoch {epoch}: batch loss {result.loss:.4f}, attacked blocks {result.log.rasp_blocks}")

        all_steps.extend(epoch_steps)
        train_loss = loss_sum / len(labels)
        train_accuracy = 100.0 * correct / len(labels)
        rows.append([epoch, "train", "+".join(sources), train_loss, train_accuracy, epoch_attacks, _mean(epoch_steps)])

        val = {}
        for domain in sources:
            val_loss, val[domain] = score(params, *dataset.split(domain, "val"), batch_size=cfg.eval_batch_size)
            rows.append([epoch, "val", domain, val_loss, val[domain], 0, 0.0])
        val_mean = _mean(list(val.values()))

        test = None
        if holdout is not None:
            test_loss, test = score(params, *dataset.split(holdout, "test"), batch_size=cfg.eval_batch_size)
            rows.append([epoch, "test", holdout, test_loss, test, 0, 0.0])

        if val_mean > best_val:
            best, best_val, selected, selected_test = params.snapshot(), val_mean, epoch, test

        summary = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": train_loss,
            "train_accuracy": train_accuracy,
            "val_accuracy": val,
            "val_mean": val_mean,
            "test_accuracy": test,
            "attacks_applied": epoch_attacks,
            "mean_attack_iters": _mean(epoch_steps),
        }
        epochs.append(summary)
        logger.info(f"epoch {epoch}: loss {train_loss:.4f}, train {train_accuracy:.2f}, val {val_mean:.2f}" + ("" if test is None else f", test {test:.2f}"))
        if on_epoch:
            on_epoch(summary)

    report = RunReport(
        config=config,
        config_hash=config_hash,
        holdout_domain=holdout,
        source_domains=sources,
        epochs=epochs,
        selected_epoch=selected,
        best_val_accuracy=best_val,
        test_accuracy=selected_test,
        attack_counts={str(i): attack_counts[i] for i in sorted(attack_counts)},
        nfm_counts={str(i): nfm_counts[i] for i in sorted(nfm_counts)},
        mean_attack_iters=_mean(all_steps),
        aborted_attacks=aborted,
    )
    if out_dir is not None:
        save_run(out_dir, best, report, rows)
    return best, report


def save_run(out_dir, params, report, rows):
    import pandas as pd

    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / "checkpoint.bin", params, epoch=report.selected_epoch, config_hash=report.config_hash)
        pd.DataFrame(rows, columns=METRIC_COLUMNS).to_csv(out_dir / "metrics.csv", index=False)
        with open(out_dir / "report.json", "w") as f:
            serialize_json(f, report.to_dict())
        with open(out_dir / "config.json", "w") as f:
            serialize_json(f, report.config)
    except OSError as e:
        raise Error(f"cannot write run artifacts to '{out_dir}': {e.strerror or e}") from None
    logger.debug(f"run artifacts written to '{out_dir}'")


class LooResult(NamedTuple):
    runs: object
    table: object


_datasets = {}


def _cached_dataset(path):
    from .glyphs import load_dataset

    if path not in _datasets:
        _datasets[path] = load_dataset(path)
    return _datasets[path]


def run_arm(cfg, dataset, arm, holdout, seed, out_dir=None):
    run_cfg = arm_config(cfg, arm, **{"seed": seed, "holdout-domain": holdout})
    if out_dir is not None:
        out_dir = Path(out_dir) / arm / holdout / f"seed-{seed}"
    _, report = train(run_cfg, dataset, out_dir=out_dir)
    return {
        "arm": arm,
        "holdout": holdout,
        "seed": seed,
        "val_accuracy": report.best_val_accuracy,
        "test_accuracy": report.test_accuracy,
        "selected_epoch": report.selected_epoch,
    }


def _run_arm_from_path(cfg_state, path, arm, holdout, seed, out_dir):
    return run_arm(TrainConfig(cfg_state), _cached_dataset(path), arm, holdout, seed, out_dir)


def loo_table(runs, arms, domains):
    """Held-out accuracy mean and std per domain and arm, plus the "Avg." row."""

    import pandas as pd

    table = {}
    for domain in domains:
        row = {}
        for arm in arms:
            acc = runs[(runs["arm"] == arm) & (runs["holdout"] == domain)]["test_accuracy"]
            row[f"{arm} mean"] = acc.mean()
            row[f"{arm} std"] = acc.std(ddof=0)
        table[domain] = row
    row = {}
    for arm in arms:
        per_seed = runs[runs["arm"] == arm].groupby("seed")["test_accuracy"].mean()
        row[f"{arm} mean"] = per_seed.mean()
        row[f"{arm} std"] = per_seed.std(ddof=0)
    table["Avg."] = row
    table = pd.DataFrame.from_dict(table, orient="index")
    table.index.name = "holdout"
    return table


def leave_one_domain_out(cfg, dataset, arms=("erm", "rasp_nfm"), seeds=(0,), *, holdouts=None, jobs=1, out_dir=None):
    import pandas as pd

    if len(dataset.domains) < 2:
        raise ConfigError(f"leave-one-domain-out needs at least 2 domains, got {len(dataset.domains)}")
    for arm in arms:
        if arm not in ARMS:
            raise ConfigError(f"unknown method: '{arm}' (expected one of {', '.join(ARMS)})")
    holdouts = dataset.domains if holdouts is None else [dataset.resolve(d) for d in holdouts]
    tasks = list(itertools.product(arms, holdouts, seeds))

    jobs = worker_cap(jobs)
    if jobs > 1 and dataset.path is not None:
        state = cfg.to_dict()
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_arm_from_path, state, dataset.path, a, h, s, out_dir) for a, h, s in tasks]
            results = [f.result() for f in futures]
    else:
        results = [run_arm(cfg, dataset, a, h, s, out_dir) for a, h, s in tasks]

    runs = pd.DataFrame(results, columns=["arm", "holdout", "seed", "val_accuracy", "test_accuracy", "selected_epoch"])
    return LooResult(runs, loo_table(runs, arms, holdouts))


class SweepResult(NamedTuple):
    table: object
    correlation: float


def sweep_points(cfg, grid):
    """Yield attack and block overrides for every point of the grid."""

    grid = grid or {}
    taus = grid.get("tau") or [cfg.attack.tau]
    epsilons = grid.get("epsilon") or [cfg.attack.epsilon]
    iterations = grid.get("iterations") or [cfg.attack.iterations]
    blocks = grid.get("blocks") or [list(cfg.rasp_blocks)]
    for tau, epsilon, iters, block_set in itertools.product(taus, epsilons, iterations, blocks):
        yield {"attack": {"tau": tau, "epsilon": epsilon, "iterations": iters}, "rasp-blocks": list(block_set)}


def sweep(cfg, dataset, grid, seeds=(0,), *, holdouts=None, jobs=1, out_dir=None):
    import pandas as pd

    rows = []
    for point in sweep_points(cfg, grid):
        point_cfg = TrainConfig(merge(cfg.to_dict(), point))
        blocks = "-".join(str(i) for i in point["rasp-blocks"])
        attack = point["attack"]
        point_dir = None
        if out_dir is not None:
            point_dir = Path(out_dir) / f"tau-{attack['tau']:g}_eps-{attack['epsilon']:.4g}_iters-{attack['iterations']}_blocks-{blocks}"
        result = leave_one_domain_out(point_cfg, dataset, [cfg.method.value], seeds, holdouts=holdouts, jobs=jobs, out_dir=point_dir)
        row = {
            "tau": attack["tau"],
            "epsilon": attack["epsilon"],
            "iterations": attack["iterations"],
            "blocks": blocks,
            "val_accuracy": result.runs["val_accuracy"].mean(),
            "test_accuracy": result.runs["test_accuracy"].mean(),
        }
        logger.info(f"sweep point {row}")
        rows.append(row)

    table = pd.DataFrame(rows, columns=["tau", "epsilon", "iterations", "blocks", "val_accuracy", "test_accuracy"])
    correlation = float(table["val_accuracy"].corr(table["test_accuracy"])) if len(table) > 1 else float("nan")
    if out_dir is not None:
        try:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            table.to_csv(Path(out_dir) / "sweep.csv", index=False)
        except OSError as e:
            raise Error(f"cannot write sweep results to '{out_dir}': {e.strerror or e}") from None
    return SweepResult(table, correlation)


class DirectionCheck(NamedTuple):
    better: str
    worse: str
    delta: float
    holds: bool


def direction_checks(table, checks=DIRECTION_CHECKS, grace=GRACE_POINTS):
    results = []
    for better, worse in checks:
        if f"{better} mean" not in table or f"{worse} mean" not in table:
            continue
        delta = float(table.loc["Avg.", f"{better} mean"] - table.loc["Avg.", f"{worse} mean"])
        check = DirectionCheck(better, worse, delta, delta >= -grace)
        if check.holds:
            logger.info(f"{better} vs {worse}: {delta:+.2f} points")
        else:
            logger.warning(f"{better} vs {worse}: {delta:+.2f} points, expected direction does not hold")
        results.append(check)
    return results


def ablate(cfg, dataset, seeds=(0,), *, arms=tuple(ARMS), holdouts=None, jobs=1, out_dir=None):
    result = leave_one_domain_out(cfg, dataset, arms, seeds, holdouts=holdouts, jobs=jobs, out_dir=out_dir)
    return result, direction_checks(result.table)
