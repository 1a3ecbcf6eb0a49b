"""Command-line entry points for the experiment harness.

Every subcommand takes a JSON config (strict schema, see
`experiments.parse_config`) and writes CSV/JSON results into a
hash-named directory, so identical configs land in the same place and
resume instead of recomputing.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 resource
cap exceeded.
"""

import json

import click

from . import experiments as xp


def _common_options(f):
    for option in (
        click.option("--dry-run", is_flag=True,
                     help="Print grid sizes and cost estimates, then exit."),
        click.option("--threads", type=click.IntRange(min=1), default=1,
                     show_default=True,
                     help="Worker cap, recorded in the manifest."),
        click.option("--out", "out_dir",
                     type=click.Path(file_okay=False), default=None,
                     help="Override the config's output directory."),
        click.option("--config", "config_path", required=True,
                     type=click.Path(exists=True, dir_okay=False),
                     help="Path to the JSON experiment config."),
    ):
        f = option(f)
    return f


def _execute(kind, config_path, out_dir, threads, dry_run):
    try:
        cfg = xp.load_config(config_path)
        if kind is not None and cfg.experiment != kind:
            raise xp.ConfigError(
                f"config experiment {cfg.experiment!r} does not match "
                f"this subcommand ({kind!r})")
        if dry_run:
            click.echo(json.dumps(xp.plan(cfg), indent=2, sort_keys=True))
            return
        res = xp.run_experiment(cfg, out_dir=out_dir, threads=threads)
    except xp.ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        raise SystemExit(xp.EXIT_CONFIG)
    except xp.ResourceCapError as exc:
        click.echo(f"resource cap: {exc}", err=True)
        raise SystemExit(xp.EXIT_RESOURCE)
    except xp.NumericalFailure as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        raise SystemExit(xp.EXIT_NUMERICAL)
    click.echo(f"{res.experiment} run {res.run_hash}: "
               f"{len(res.outputs)} output file(s) in {res.run_dir} "
               f"({res.resumed_points} point(s) reused)")


@click.group()
@click.version_option(package_name="polaronlab")
def main():
    """Numerical laboratory for impurity dynamics in a dense Fermi gas."""


@main.command()
@_common_options
def potential(config_path, out_dir, threads, dry_run):
    """Tabulate the mediated pair potential over a k_F ladder."""
    _execute("potential", config_path, out_dir, threads, dry_run)


@main.command()
@_common_options
def scaling(config_path, out_dir, threads, dry_run):
    """Run the factorization-deficit ladder for the truncated dynamics."""
    _execute("scaling", config_path, out_dir, threads, dry_run)


@main.command()
@_common_options
def bounds(config_path, out_dir, threads, dry_run):
    """Evaluate the nine lattice error sums against their envelopes."""
    _execute("bounds", config_path, out_dir, threads, dry_run)


@main.command()
@_common_options
def prop2(config_path, out_dir, threads, dry_run):
    """Measure the short-time splitting rate of the propagator variants."""
    _execute("proposition2", config_path, out_dir, threads, dry_run)


@main.command()
@_common_options
def certify(config_path, out_dir, threads, dry_run):
    """Check the assumption certificate for the configured potential."""
    try:
        cfg = xp.load_config(config_path)
        if dry_run:
            click.echo(json.dumps(
                {"experiment": "certify", "spec_id": cfg.spec_id,
                 "spec_R": cfg.spec_R}, indent=2, sort_keys=True))
            return
        res = xp.run_certification(cfg, out_dir=out_dir, threads=threads)
    except xp.ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        raise SystemExit(xp.EXIT_CONFIG)
    except xp.NumericalFailure as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        raise SystemExit(xp.EXIT_NUMERICAL)
    click.echo(f"certificate written to {res.run_dir}")


if __name__ == "__main__":
    main()
