"""Command line entry point: one subcommand per experiment family, plus report and acceptance."""
import json
import os
import sys

import click

from . import harness as hs
from .errors import BoxlabError, ConfigInvalid


def _pairs(items, what):
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigInvalid(f"{what}: expected KEY=VALUE, got {item!r}", field=what)
        k, v = item.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def _resolve(experiment, config, seed, output_dir, task, criterion, params, tols, budgets):
    if config is None:
        cfg = hs.ExperimentConfig({"experiment": experiment, "seed": 0})
    else:
        cfg = hs.ExperimentConfig.load(config)
        if cfg.experiment != experiment:
            raise ConfigInvalid(f"experiment: config is for {cfg.experiment!r}, not {experiment!r}",
                                field="experiment")
    return cfg.override(seed=seed, output_dir=output_dir, task=task, criterion=criterion,
                        params=_pairs(params, "param") or None, tolerances=_pairs(tols, "tol") or None,
                        budgets=_pairs(budgets, "budget") or None)


def _experiment_command(experiment):
    @click.command(experiment, help=f"Run a {experiment} experiment.")
    @click.option("--config", "config", default=None, help="Config file or named config.")
    @click.option("--seed", type=int, default=None)
    @click.option("--output-dir", default=None, help=f"Output root (default ${hs.OUTPUT_ENV} or ./{hs.DEFAULT_OUTPUT}).")
    @click.option("--task", default=None)
    @click.option("--criterion", type=int, default=None)
    @click.option("--param", "params", multiple=True, help="KEY=JSON, merged into params.")
    @click.option("--tol", "tols", multiple=True, help="KEY=VALUE, merged into tolerances.")
    @click.option("--budget", "budgets", multiple=True, help="KEY=VALUE, merged into budgets.")
    @click.option("--dry-run", is_flag=True, help="Print the resolved plan and exit.")
    def cmd(config, seed, output_dir, task, criterion, params, tols, budgets, dry_run):
        try:
            cfg = _resolve(experiment, config, seed, output_dir, task, criterion, params, tols, budgets)
            if dry_run:
                click.echo(json.dumps(hs.plan(cfg), indent=1, sort_keys=True))
                return
            entry = hs.run(cfg)
        except ConfigInvalid as exc:
            click.echo(f"config invalid: {exc}", err=True)
            sys.exit(2)
        except BoxlabError as exc:
            click.echo(f"{type(exc).__name__}: {exc}", err=True)
            sys.exit(3)
        for a in entry["assertions"]:
            click.echo(f"{'PASS' if a['passed'] else 'FAIL'} {a['name']}: {a['detail']}")
        click.echo(f"results in {os.path.dirname(entry['files'][0])}")
        sys.exit(0 if entry["passed"] else 1)
    return cmd


@click.group()
def main():
    """Box spectra, quadratic-form counts and theta sums: experiment runner."""


for _exp in hs.EXPERIMENTS:
    main.add_command(_experiment_command(_exp))


@main.command("configs")
def configs_cmd():
    """List the shipped named configs."""
    for name, raw in hs.named_configs().items():
        click.echo(f"{name}: {raw.get('description', raw['experiment'])}")


@main.command("acceptance")
@click.option("--only", default=None, help="Comma-separated criterion numbers.")
@click.option("--output-dir", default=None)
def acceptance_cmd(only, output_dir):
    """Run the named acceptance configs and print one PASS/FAIL line each."""
    wanted = None if only is None else {int(x) for x in only.split(",")}
    ok = True
    for name, raw in hs.named_configs().items():
        k = raw.get("criterion")
        if k is None or (wanted is not None and k not in wanted):
            continue
        cfg = hs.ExperimentConfig(raw).override(output_dir=output_dir)
        entry = hs.run(cfg)
        for a in entry["assertions"]:
            click.echo(f"{'PASS' if a['passed'] else 'FAIL'} {k:2d} {a['name']}: {a['detail']}")
        ok &= entry["passed"]
    sys.exit(0 if ok else 1)


@main.command("report")
@click.option("--ledger", "ledger_path", default=None, help="Ledger file (default under the output root).")
@click.option("--format", "fmt", type=click.Choice(["csv", "json", "markdown"]), default="markdown")
@click.option("--out", "out_path", required=True)
def report_cmd(ledger_path, fmt, out_path):
    """Collate the run ledger into a csv, json or markdown report."""
    root = os.environ.get(hs.OUTPUT_ENV) or hs.DEFAULT_OUTPUT
    ledger = hs.RunLedger(ledger_path or os.path.join(root, hs.LEDGER_NAME))
    try:
        hs.report(ledger, fmt, out_path)
    except BoxlabError as exc:
        click.echo(f"{type(exc).__name__}: {exc}", err=True)
        sys.exit(3)
    click.echo(out_path)


if __name__ == "__main__":
    main()
