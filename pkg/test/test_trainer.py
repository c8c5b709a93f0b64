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

import json
import logging

import numpy as np
import pandas as pd
import pytest

from core.backbone import init_params, load_checkpoint
from core.errors import ConfigError, DatasetError
from core.glyphs import SplitSizes, generate_dataset, load_dataset
from core.tensor import count_ops
from core.trainer import (
    ARMS,
    METRIC_COLUMNS,
    Method,
    TrainConfig,
    arm_config,
    direction_checks,
    evaluate,
    leave_one_domain_out,
    score,
    sweep,
    sweep_points,
    train,
    train_step,
)

from .util import TINY_PLAN, tiny_config, toy_dataset


def _batch(seed=0):
    dataset = toy_dataset(seed)
    return dataset.pooled(["a", "b"], "train")


def _step(cfg, seed=0):
    images, labels = _batch()
    params = init_params(0, TINY_PLAN)
    result = train_step(params, images[:8], labels[:8], cfg, np.random.default_rng(seed))
    return params, result


def test_erm_step():
    _, result = _step(tiny_config(method="erm"))
    assert result.log.rasp_blocks == []
    assert result.log.nfm_blocks == []
    assert len(result.log.loss_labels) == 1
    assert np.isfinite(result.loss)
    assert 0 <= result.correct <= 8


def test_unattacked_augmented_path():
    # with no attack drawn the augmented path is the clean one, counted twice
    _, erm = _step(tiny_config(method="erm"))
    _, rasp = _step(tiny_config(method="rasp", **{"p-rasp": 0.0}))
    assert rasp.log.rasp_blocks == []
    assert rasp.loss == pytest.approx(2 * erm.loss, rel=1e-6)
    for name, grad in erm.grads.items():
        np.testing.assert_allclose(rasp.grads[name], 2 * grad, rtol=1e-4, atol=1e-7)


def test_label_integrity():
    images, labels = _batch()
    _, result = _step(tiny_config(method="rasp", **{"p-rasp": 1.0}))
    assert len(result.log.loss_labels) == 2
    for used in result.log.loss_labels:
        np.testing.assert_array_equal(used, labels[:8])


@pytest.mark.parametrize(
    "method,p_nfm,nfm_blocks",
    [
        ("rasp", 1.0, []),
        ("rasp_nfm", 1.0, [2, 3, 4]),
        ("rasp_nfm", 0.0, []),
    ],
)
def test_attacked_blocks(method, p_nfm, nfm_blocks):
    _, result = _step(tiny_config(method=method, **{"p-rasp": 1.0, "p-nfm": p_nfm}))
    assert result.log.rasp_blocks == [2, 3, 4]
    assert [i for i, _ in result.log.traces] == [2, 3, 4]
    assert result.log.nfm_blocks == nfm_blocks
    assert not result.log.aborted


def test_custom_blocks():
    _, result = _step(tiny_config(method="rasp_nfm", **{"p-rasp": 1.0, "rasp-blocks": [1, 3]}))
    assert result.log.rasp_blocks == [1, 3]


def test_augmented_path_keeps_running_stats():
    erm_params, _ = _step(tiny_config(method="erm"))
    rasp_params, _ = _step(tiny_config(method="rasp_nfm", **{"p-rasp": 1.0, "p-nfm": 1.0}))
    assert set(erm_params.buffers) == set(rasp_params.buffers)
    for name, buffer in erm_params.buffers.items():
        np.testing.assert_array_equal(rasp_params.buffers[name], buffer)


def test_augmented_path_costs():
    images, labels = _batch()
    counts = {}
    for method in ("erm", "rasp_nfm"):
        cfg = tiny_config(method=method, **{"p-rasp": 1.0})
        with count_ops() as ops:
            train_step(init_params(0, TINY_PLAN), images[:8], labels[:8], cfg, np.random.default_rng(0))
        counts[method] = ops["conv2d"]
    assert counts["rasp_nfm"] > counts["erm"]


def test_aborted_attack(caplog):
    images, labels = _batch()
    params = init_params(0, TINY_PLAN)
    params["head.weight"].data[:] = np.nan
    cfg = tiny_config(method="rasp", **{"p-rasp": 1.0})
    with caplog.at_level(logging.WARNING, logger="rasp.dg"):
        result = train_step(params, images[:8], labels[:8], cfg, np.random.default_rng(0))
    assert result.log.aborted
    assert len(result.log.loss_labels) == 1
    assert "step continues on the clean path only" in caplog.text


def test_score():
    dataset = toy_dataset()
    params = init_params(0, TINY_PLAN)
    images, labels = dataset.split("a", "test")
    before = {name: b.copy() for name, b in params.buffers.items()}

    loss, accuracy = score(params, images, labels, batch_size=4)
    assert np.isfinite(loss)
    assert 0 <= accuracy <= 100
    assert evaluate(params, images, labels, batch_size=5) == pytest.approx(accuracy)
    for name, buffer in before.items():
        np.testing.assert_array_equal(params.buffers[name], buffer)

    assert all(np.isnan(score(params, images[:0], labels[:0])))


def test_train(tmp_path):
    dataset = toy_dataset()
    cfg = tiny_config(method="rasp_nfm", **{"holdout-domain": "c", "p-rasp": 1.0, "attack": {"tau": 0.0}})
    epochs = []
    params, report = train(cfg, dataset, out_dir=tmp_path, on_epoch=epochs.append)

    assert report.holdout_domain == "c"
    assert report.source_domains == ["a", "b"]
    assert len(report.epochs) == len(epochs) == 2
    assert 0 <= report.selected_epoch < 2
    assert report.best_val_accuracy == max(e["val_mean"] for e in report.epochs)
    assert report.test_accuracy == report.epochs[report.selected_epoch]["test_accuracy"]
    assert set(report.attack_counts) == {"2", "3", "4"}
    assert report.mean_attack_iters == cfg.attack.iterations
    assert report.aborted_attacks == 0

    metrics = pd.read_csv(tmp_path / "metrics.csv")
    assert list(metrics.columns) == METRIC_COLUMNS
    assert set(metrics["phase"]) == {"train", "val", "test"}
    assert len(metrics) == 2 * (1 + 2 + 1)
    for name in ("report.json", "config.json"):
        assert (tmp_path / name).exists()

    loaded, header = load_checkpoint(tmp_path / "checkpoint.bin")
    assert header["epoch"] == report.selected_epoch
    assert header["config-hash"] == report.config_hash
    images, labels = dataset.split("c", "test")
    assert evaluate(loaded, images, labels) == pytest.approx(report.test_accuracy)
    assert params.plan == loaded.plan


def test_train_deterministic():
    dataset = toy_dataset()
    cfg = tiny_config(method="rasp_nfm", **{"holdout-domain": "a"})
    params_a, report_a = train(cfg, dataset)
    params_b, report_b = train(cfg, dataset)
    assert report_a == report_b
    for name, value in params_a.state().items():
        np.testing.assert_array_equal(params_b.state()[name], value)


def test_train_without_holdout():
    _, report = train(tiny_config(method="erm", epochs=1), toy_dataset())
    assert report.holdout_domain is None
    assert report.test_accuracy is None
    assert report.attack_counts == {}


def test_single_source(caplog):
    dataset = toy_dataset(domains=("a", "b"))
    with caplog.at_level(logging.WARNING, logger="rasp.dg"):
        _, report = train(tiny_config(method="erm", epochs=1, **{"holdout-domain": "b"}), dataset)
    assert report.source_domains == ["a"]
    assert "training on a single source domain: a" in caplog.text


def test_empty_source_set():
    dataset = toy_dataset(domains=("a",))
    with pytest.raises(ConfigError, match="empty source set"):
        train(tiny_config(**{"holdout-domain": "a"}), dataset)


def test_empty_validation_split(tmp_path):
    dataset = toy_dataset(per_class=(4, 0, 2))
    with pytest.raises(DatasetError, match="b/val: empty validation split"):
        train(tiny_config(**{"holdout-domain": "a"}), dataset, out_dir=tmp_path / "run")
    assert not (tmp_path / "run").exists()


def test_arm_config():
    cfg = tiny_config()
    gt = arm_config(cfg, "rasp_gt")
    assert gt.method is Method.RASP_NFM
    assert gt.attack.objective.value == "gt_ascent"
    assert gt.epochs == cfg.epochs
    assert arm_config(cfg, "erm", seed=3).seed == 3
    assert arm_config(cfg, "style_mixup").mix.variant.value == "style_mixup"

    with pytest.raises(ConfigError, match="unknown method: 'mixstyle'"):
        arm_config(cfg, "mixstyle")


def test_leave_one_domain_out(tmp_path):
    dataset = toy_dataset()
    result = leave_one_domain_out(tiny_config(epochs=1), dataset, ("erm", "rasp_nfm"), seeds=(0,), out_dir=tmp_path)

    assert len(result.runs) == 6
    assert list(result.table.index) == ["a", "b", "c", "Avg."]
    assert list(result.table.columns) == ["erm mean", "erm std", "rasp_nfm mean", "rasp_nfm std"]
    assert (result.table["erm std"] == 0).all()
    avg = result.table.loc[["a", "b", "c"], "rasp_nfm mean"].mean()
    assert result.table.loc["Avg.", "rasp_nfm mean"] == pytest.approx(avg)
    assert (tmp_path / "erm" / "b" / "seed-0" / "report.json").exists()


def test_loo_seeds():
    dataset = toy_dataset()
    result = leave_one_domain_out(tiny_config(epochs=1), dataset, ("erm",), seeds=(0, 1), holdouts=["0"])
    assert list(result.runs["holdout"]) == ["a", "a"]
    assert list(result.table.index) == ["a", "Avg."]
    accs = result.runs["test_accuracy"]
    assert result.table.loc["a", "erm std"] == pytest.approx(np.std(accs))


def test_loo_invalid():
    with pytest.raises(ConfigError, match="needs at least 2 domains"):
        leave_one_domain_out(tiny_config(), toy_dataset(domains=("a",)))
    with pytest.raises(ConfigError, match="unknown method: 'dro'"):
        leave_one_domain_out(tiny_config(), toy_dataset(), ("erm", "dro"))


def test_direction_checks(caplog):
    table = pd.DataFrame(
        {"rasp_nfm mean": [70.0], "rasp mean": [68.0], "rasp_gt mean": [71.0]},
        index=pd.Index(["Avg."], name="holdout"),
    )
    with caplog.at_level(logging.WARNING, logger="rasp.dg"):
        checks = direction_checks(table)
    assert [(c.better, c.worse) for c in checks] == [("rasp_nfm", "rasp"), ("rasp_nfm", "rasp_gt")]
    assert checks[0].holds and checks[0].delta == pytest.approx(2.0)
    assert not checks[1].holds
    assert "rasp_nfm vs rasp_gt: -1.00 points" in caplog.text

    assert direction_checks(table[["rasp_nfm mean"]]) == []


def test_sweep_points():
    cfg = tiny_config()
    points = list(sweep_points(cfg, {"tau": [0.5, 0.9], "blocks": [[2], [3, 4]]}))
    assert len(points) == 4
    assert points[0] == {"attack": {"tau": 0.5, "epsilon": cfg.attack.epsilon, "iterations": 5}, "rasp-blocks": [2]}
    assert points[-1]["rasp-blocks"] == [3, 4]
    assert list(sweep_points(cfg, {})) == [{"attack": {"tau": 0.8, "epsilon": cfg.attack.epsilon, "iterations": 5}, "rasp-blocks": [2, 3, 4]}]


def test_sweep(tmp_path):
    cfg = tiny_config(epochs=1)
    result = sweep(cfg, toy_dataset(), {"tau": [0.0, 1.0]}, holdouts=["a"], out_dir=tmp_path)
    assert list(result.table["tau"]) == [0.0, 1.0]
    assert list(result.table["blocks"]) == ["2-3-4", "2-3-4"]
    assert (tmp_path / "sweep.csv").exists()
    for tau in ("0", "1"):
        point_dir = tmp_path / f"tau-{tau}_eps-{cfg.attack.epsilon:.4g}_iters-5_blocks-2-3-4"
        assert (point_dir / "rasp_nfm" / "a" / "seed-0" / "report.json").exists()


def test_arms():
    assert set(ARMS) == {"erm", "rasp", "rasp_nfm", "rasp_gt", "style_mixup", "feature_mixup"}
    for arm in ARMS:
        arm_config(tiny_config(), arm)


def test_shared_parameters():
    params, result = _step(tiny_config(method="rasp_nfm", **{"p-rasp": 1.0, "p-nfm": 1.0}))
    assert set(result.grads) == set(params.tensors)
    for name, grad in result.grads.items():
        assert grad.shape == params[name].shape


def test_inference_cost_parity():
    dataset = toy_dataset()
    images, labels = dataset.split("c", "test")
    counts = []
    for method in ("erm", "rasp", "rasp_nfm"):
        params, _ = train(tiny_config(method=method, epochs=1, **{"p-rasp": 1.0}), dataset)
        with count_ops() as ops:
            evaluate(params, images, labels)
        counts.append(dict(ops))
    assert counts[0] == counts[1] == counts[2]


def test_random_weights_accuracy():
    plan = TINY_PLAN._replace(num_classes=10)
    rng = np.random.default_rng(5)
    images = rng.uniform(size=(2000, 3, 8, 8)).astype("<f4")
    labels = np.repeat(np.arange(10), 200)
    accuracy = evaluate(init_params(0, plan), images, labels)
    assert 5 <= accuracy <= 15


def test_report_schema(tmp_path):
    _, report = train(tiny_config(method="erm", epochs=1, **{"holdout-domain": "b"}), toy_dataset(), out_dir=tmp_path)
    saved = json.loads((tmp_path / "report.json").read_text())
    assert list(saved) == list(report._fields)
    assert list(saved["epochs"][0]) == [
        "epoch",
        "lr",
        "train_loss",
        "train_accuracy",
        "val_accuracy",
        "val_mean",
        "test_accuracy",
        "attacks_applied",
        "mean_attack_iters",
    ]
    assert json.loads((tmp_path / "config.json").read_text()) == report.config


def test_erm_learns_glyphs(tmp_path):
    generate_dataset(tmp_path, seed=0, sizes=SplitSizes(30, 10, 10))
    dataset = load_dataset(tmp_path)
    state = {
        "method": "erm",
        "epochs": 10,
        "batch-size": 32,
        "eval-batch-size": 100,
        "lr": 0.05,
        "holdout-domain": "inverted",
        "model": {"stem-width": 8, "widths": [8, 16, 16, 16]},
    }
    _, report = train(TrainConfig(state), dataset)
    # well above the 10% of chance in domain, lower once the contrast flips
    assert report.best_val_accuracy >= 30
    assert report.test_accuracy < report.best_val_accuracy
