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
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

import typer
from typer.core import TyperGroup
from typing_extensions import Annotated

try:
    # typer >= 0.26 vendors its own copy of click
    from typer._click import exceptions as click_exceptions
except ImportError:
    from click import exceptions as click_exceptions

from .config import Config, merge, validate_logging_config
from .errors import ConfigError, Error
from .trainer import ARMS, TrainConfig
from .util import deserialize, fatal, guess_format, serialize_json, setup_logging

logger = logging.getLogger("rasp.dg.runner")

EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_VERIFICATION = 3


def _usage_exit(e):
    # bare invocation prints the help, keep its status
    if not isinstance(e, getattr(click_exceptions, "NoArgsIsHelpError", ())):
        e.exit_code = EXIT_CONFIG


class CommandGroup(TyperGroup):
    """Report command line usage errors with the configuration exit status."""

    def parse_args(self, ctx, args):
        try:
            return super().parse_args(ctx, args)
        except click_exceptions.UsageError as e:
            _usage_exit(e)
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click_exceptions.UsageError as e:
            _usage_exit(e)
            raise


main = typer.Typer(cls=CommandGroup, pretty_exceptions_enable=False)


class CliConfig(Config):
    train: Annotated[
        TrainConfig,
        Config.Node("train"),
        Config.Help("training"),
    ] = None
    data_dir: Annotated[
        str,
        Config.Node("data-dir"),
        Config.Help("dataset directory"),
    ] = "data"
    out_dir: Annotated[
        str,
        Config.Node("out-dir"),
        Config.Help("output directory"),
    ] = "runs"
    seeds: Annotated[
        tuple,
        Config.Node("seeds"),
        Config.Help("training seeds of leave-one-domain-out runs"),
    ] = (0,)
    methods: Annotated[
        tuple,
        Config.Node("methods"),
        Config.Help("methods compared by leave-one-domain-out"),
        Config.Notes(f"Any of: {', '.join(ARMS)}."),
    ] = ("erm", "rasp_nfm")
    jobs: Annotated[
        int,
        Config.Node("jobs"),
        Config.Help("parallel runs, capped by RASP_DG_THREADS"),
    ] = 1
    holdouts: Annotated[
        tuple,
        Config.Node("holdouts"),
        Config.Help("held-out domains of loo, sweep and ablate, name or index"),
        Config.Notes("Every domain when empty."),
    ] = ()
    sweep_tau: Annotated[
        tuple,
        Config.Node("sweep.tau"),
        Config.Help("sweep grid of tau"),
    ] = ()
    sweep_epsilon: Annotated[
        tuple,
        Config.Node("sweep.epsilon"),
        Config.Help("sweep grid of epsilon"),
    ] = ()
    sweep_iterations: Annotated[
        tuple,
        Config.Node("sweep.iterations"),
        Config.Help("sweep grid of attack iterations"),
    ] = ()
    sweep_blocks: Annotated[
        tuple,
        Config.Node("sweep.blocks"),
        Config.Help("sweep grid of attacked block sets"),
    ] = ()
    log_level: Annotated[
        str,
        Config.Node("logging.level"),
        Config.Help("log level, unless given on the command line"),
    ] = None
    minimum_version: Annotated[
        str,
        Config.Node("minimum-version"),
        Config.Help("oldest rasp-dg release able to run this configuration"),
    ] = None

    def validate(self):
        from semver import VersionInfo

        from . import __version__

        validate_logging_config(self.to_dict())
        for method in self.methods:
            if method not in ARMS:
                raise ConfigError(f"param 'methods': unknown method: '{method}' (expected one of {', '.join(ARMS)})")
        if self.jobs < 1:
            raise ConfigError(f"param 'jobs': out of range: {self.jobs} (expected >= 1)")
        if self.minimum_version is not None:
            if VersionInfo.parse(__version__) < VersionInfo.parse(self.minimum_version):
                raise ConfigError(f"current version is older than minimum version: {__version__} < {self.minimum_version}")

    def grid(self):
        return {
            "tau": list(self.sweep_tau),
            "epsilon": list(self.sweep_epsilon),
            "iterations": list(self.sweep_iterations),
            "blocks": [list(b) for b in self.sweep_blocks],
        }


def load_config(config_file):
    import yaml

    if config_file is None:
        return CliConfig()

    try:
        with open(config_file) as f:
            state = deserialize(f, format=guess_format(config_file)) or {}
    except FileNotFoundError as e:
        raise ConfigError(f"{e.strerror}: '{e.filename}'") from None
    except (ValueError, yaml.YAMLError) as e:
        raise ConfigError(f"invalid configuration file '{config_file}': {e}") from e

    cli = CliConfig(state)
    root = logging.getLogger("rasp.dg")
    if cli.log_level and not getattr(root, "overridden", False):
        root.setLevel(cli.log_level.upper())
    logger.debug(f"configuration loaded from '{config_file}'")
    return cli


@contextmanager
def reporting_errors():
    try:
        yield
    except ConfigError as e:
        logger.critical(e)
        sys.exit(EXIT_CONFIG)
    except Error as e:
        logger.critical(e)
        sys.exit(EXIT_RUNTIME)


def parse_list(value, type=str):
    if value is None:
        return None
    try:
        return [type(v.strip()) for v in value.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"invalid list: '{value}' (expected comma separated {type.__name__} values)") from None


def training_config(cli, *, method=None, **overrides):
    from .trainer import arm_config

    overrides = {k: v for k, v in overrides.items() if v is not None}
    if method is not None:
        return arm_config(cli.train, method, **overrides)
    return TrainConfig(merge(cli.train.to_dict(), overrides))


def _print_table(title, table):
    from rich import print
    from rich.table import Table

    out = Table(title=title, title_justify="left")
    out.add_column(table.index.name or "", style="bold cyan")
    for column in table.columns:
        out.add_column(str(column), justify="right")
    for index, row in table.iterrows():
        out.add_row(str(index), *(f"{v:.2f}" if isinstance(v, float) else str(v) for v in row))
    print(out)


def _write_results(out_dir, name, table, extra=None):
    out_dir = Path(out_dir)
    state = {"table": table.reset_index().to_dict(orient="records")}
    state.update(extra or {})
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        table.to_csv(out_dir / f"{name}.csv")
        with open(out_dir / f"{name}.json", "w") as f:
            serialize_json(f, state)
    except OSError as e:
        raise Error(f"cannot write results to '{out_dir}': {e.strerror or e}") from None
    logger.info(f"results written to '{out_dir / name}.csv'")


ConfigOption = Annotated[Optional[Path], typer.Option("--config", "-c", help="JSON or YAML configuration file.")]
DataOption = Annotated[Optional[Path], typer.Option("--data", help="Dataset directory.")]
OutOption = Annotated[Optional[Path], typer.Option("--out", help="Output directory.")]
LogLevelOption = Annotated[Optional[str], typer.Option(callback=setup_logging("INFO"))]


@main.command()
def gen(
    out_dir: Annotated[Path, typer.Option("--out", help="Dataset directory.")] = Path("data"),
    seed: Annotated[int, typer.Option(help="Dataset seed.")] = 0,
    train: Annotated[int, typer.Option(help="Training examples per class per domain.")] = 200,
    val: Annotated[int, typer.Option(help="Validation examples per class per domain.")] = 40,
    test: Annotated[int, typer.Option(help="Test examples per class per domain.")] = 60,
    jobs: Annotated[int, typer.Option(help="Parallel workers.")] = 1,
    log_level: LogLevelOption = None,
):
    """
    Generate the synthetic multi-domain dataset
    """
    from .glyphs import SplitSizes, generate_dataset, manifest_hash, split_totals

    with reporting_errors():
        manifest = generate_dataset(out_dir, seed, SplitSizes(train, val, test), jobs)
    totals = split_totals(manifest)
    print(f"{totals['train']} train, {totals['val']} val, {totals['test']} test images in '{out_dir}' (manifest {manifest_hash(manifest)[:12]})")


@main.command()
def train(
    config_file: ConfigOption = None,
    data_dir: DataOption = None,
    holdout: Annotated[Optional[str], typer.Option(help="Held-out domain, name or index.")] = None,
    method: Annotated[Optional[str], typer.Option(help=f"One of: {', '.join(ARMS)}.")] = None,
    seed: Annotated[Optional[int], typer.Option(help="Training seed.")] = None,
    epochs: Annotated[Optional[int], typer.Option(help="Number of epochs.")] = None,
    out_dir: OutOption = None,
    log_level: LogLevelOption = None,
):
    """
    Train one model, leaving a domain out
    """
    from .glyphs import load_dataset
    from .trainer import train

    def _echo(summary):
        test = summary["test_accuracy"]
        print(
            f"epoch {summary['epoch']}: loss {summary['train_loss']:.4f}, train {summary['train_accuracy']:.2f}, "
            f"val {summary['val_mean']:.2f}, test {'-' if test is None else f'{test:.2f}'}, attacks {summary['attacks_applied']}"
        )

    with reporting_errors():
        cli = load_config(config_file)
        cfg = training_config(cli, method=method, **{"holdout-domain": holdout, "seed": seed, "epochs": epochs})
        dataset = load_dataset(data_dir or cli.data_dir)
        holdout_dir = dataset.resolve(cfg.holdout_domain) or "none"
        out_dir = out_dir or Path(cli.out_dir) / cfg.method.value / holdout_dir / f"seed-{cfg.seed}"
        _, report = train(cfg, dataset, out_dir=out_dir, on_epoch=_echo)

    test = report.test_accuracy
    print(f"selected epoch {report.selected_epoch}: val {report.best_val_accuracy:.2f}, test {'-' if test is None else f'{test:.2f}'}")


@main.command("eval")
def evaluate(
    checkpoint: Annotated[Path, typer.Argument(help="Checkpoint file.")],
    data_dir: DataOption = None,
    domain: Annotated[Optional[str], typer.Option(help="Domain, name or index; every domain if omitted.")] = None,
    split: Annotated[str, typer.Option(help="Split to evaluate.")] = "test",
    log_level: LogLevelOption = None,
):
    """
    Evaluate a checkpoint on the inference path
    """
    from .backbone import load_checkpoint
    from .glyphs import load_dataset
    from .trainer import evaluate

    with reporting_errors():
        params, header = load_checkpoint(checkpoint)
        dataset = load_dataset(data_dir or "data")
        domains = dataset.domains if domain is None else [dataset.resolve(domain)]
        for d in domains:
            print(f"{d}/{split}: {evaluate(params, *dataset.split(d, split)):.2f}")


def _experiment_config(cli, data_dir=None, seeds=None, methods=None, jobs=None, out_dir=None, holdouts=None):
    """Fold the command line flags into the configuration recorded with the results."""

    overrides = {
        "data_dir": None if data_dir is None else str(data_dir),
        "seeds": parse_list(seeds, int) or None,
        "methods": parse_list(methods) or None,
        "jobs": jobs,
        "out_dir": None if out_dir is None else str(out_dir),
        "holdouts": parse_list(holdouts) or None,
    }
    return cli.replace(**{k: v for k, v in overrides.items() if v is not None})


def _write_snapshot(out_dir, cli):
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "config.json", "w") as f:
            serialize_json(f, cli.to_dict())
    except OSError as e:
        raise Error(f"cannot write configuration snapshot to '{out_dir}': {e.strerror or e}") from None
    logger.debug(f"configuration snapshot written to '{out_dir / 'config.json'}'")


SeedsOption = Annotated[Optional[str], typer.Option(help="Comma separated training seeds.")]
MethodsOption = Annotated[Optional[str], typer.Option(help=f"Comma separated methods, any of: {', '.join(ARMS)}.")]
JobsOption = Annotated[Optional[int], typer.Option(help="Parallel runs.")]
HoldoutsOption = Annotated[Optional[str], typer.Option("--holdout", help="Comma separated held-out domains; every domain if omitted.")]


@main.command()
def loo(
    config_file: ConfigOption = None,
    data_dir: DataOption = None,
    seeds: SeedsOption = None,
    methods: MethodsOption = None,
    holdouts: HoldoutsOption = None,
    jobs: JobsOption = None,
    out_dir: OutOption = None,
    log_level: LogLevelOption = None,
):
    """
    Leave-one-domain-out comparison of methods
    """
    from .glyphs import load_dataset
    from .trainer import leave_one_domain_out

    with reporting_errors():
        cli = _experiment_config(load_config(config_file), data_dir, seeds, methods, jobs, out_dir, holdouts)
        runs_dir = Path(cli.out_dir) / "loo"
        _write_snapshot(runs_dir, cli)
        dataset = load_dataset(cli.data_dir)
        result = leave_one_domain_out(
            cli.train, dataset, cli.methods, cli.seeds, holdouts=cli.holdouts or None, jobs=cli.jobs, out_dir=runs_dir
        )
        _write_results(cli.out_dir, "loo", result.table, {"runs": result.runs.to_dict(orient="records")})
    _print_table("Held-out accuracy", result.table)


@main.command()
def sweep(
    config_file: ConfigOption = None,
    data_dir: DataOption = None,
    seeds: SeedsOption = None,
    holdouts: HoldoutsOption = None,
    jobs: JobsOption = None,
    out_dir: OutOption = None,
    log_level: LogLevelOption = None,
):
    """
    Grid search of the attack over tau, epsilon, iterations and blocks
    """
    from .glyphs import load_dataset
    from .trainer import sweep

    with reporting_errors():
        cli = _experiment_config(load_config(config_file), data_dir, seeds, None, jobs, out_dir, holdouts)
        runs_dir = Path(cli.out_dir) / "sweep"
        _write_snapshot(runs_dir, cli)
        dataset = load_dataset(cli.data_dir)
        result = sweep(cli.train, dataset, cli.grid(), cli.seeds, holdouts=cli.holdouts or None, jobs=cli.jobs, out_dir=runs_dir)
        _write_results(cli.out_dir, "sweep", result.table.set_index("blocks"), {"correlation": result.correlation})
    _print_table("Sweep", result.table.set_index("blocks"))
    print(f"correlation of source validation and held-out accuracy: {result.correlation:.3f}")


@main.command()
def ablate(
    config_file: ConfigOption = None,
    data_dir: DataOption = None,
    seeds: SeedsOption = None,
    methods: MethodsOption = None,
    holdouts: HoldoutsOption = None,
    jobs: JobsOption = None,
    out_dir: OutOption = None,
    log_level: LogLevelOption = None,
):
    """
    Leave-one-domain-out over the ablation arms, with direction checks
    """
    from .glyphs import load_dataset
    from .trainer import ablate

    with reporting_errors():
        cli = _experiment_config(load_config(config_file), data_dir, seeds, methods or ",".join(ARMS), jobs, out_dir, holdouts)
        runs_dir = Path(cli.out_dir) / "ablation"
        _write_snapshot(runs_dir, cli)
        dataset = load_dataset(cli.data_dir)
        result, checks = ablate(
            cli.train, dataset, cli.seeds, arms=cli.methods, holdouts=cli.holdouts or None, jobs=cli.jobs, out_dir=runs_dir
        )
        _write_results(cli.out_dir, "ablation", result.table, {"checks": [c._asdict() for c in checks]})
    _print_table("Ablation", result.table)
    for check in checks:
        print(f"{check.better} vs {check.worse}: {check.delta:+.2f} points ({'holds' if check.holds else 'does not hold'})")


@main.command()
def gradcheck(
    precision: Annotated[str, typer.Option(help="Only 'f64' verifies to the tolerance.")] = "f64",
    seed: Annotated[int, typer.Option(help="Seed of the random inputs.")] = 0,
    corrupt: Annotated[Optional[str], typer.Option(hidden=True)] = None,
    log_level: LogLevelOption = None,
):
    """
    Verify every gradient against central differences
    """
    from .gradcheck import TOLERANCE, run_suite

    if precision not in ("f64", "float64"):
        fatal(f"unsupported precision: {precision} (gradients are verified in 'f64')", EXIT_CONFIG)

    results = run_suite(seed, corrupt=corrupt)
    for result in results:
        print(f"{'ok  ' if result.passed else 'FAIL'} {result.name}: {result.error:.3e}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        fatal(f"{len(failed)} of {len(results)} checks above {TOLERANCE:.0e}: {', '.join(failed)}", EXIT_VERIFICATION)
    print(f"all {len(results)} checks within {TOLERANCE:.0e}")


@main.command()
def describe():
    """
    Show every configuration parameter
    """
    from rich import print
    from rich.panel import Panel
    from rich.table import Table
    from rich.text import Text

    def _render_panel(title, entries):
        table = Table(show_header=False, box=None, expand=False)
        for entry in entries:
            table.add_row(
                Text(entry[0], style="bold cyan"),
                Text(entry[1], style="bold yellow"),
                entry[2],
                Text(entry[3], style="dim"),
            )
        return Panel(table, title=title, title_align="left", border_style="dim")

    sections = {}
    for path, type, help, notes, default in CliConfig.walk_nodes():
        if notes is None:
            notes = "" if default is None else f"default: {getattr(default, 'value', default)!r}"
        title = "Training" if path[0] == "train" else "Command line"
        sections.setdefault(title, []).append([".".join(path), type.__name__, help or "", notes])

    for title, entries in sections.items():
        print(_render_panel(title, entries))


@main.command()
def version():
    """
    Print the version
    """
    from . import __version__

    print(__version__)
