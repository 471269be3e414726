# License LGPL-3.0 or later (http://www.gnu.org/licenses/lgpl)
"""Numerical studies of mean field games where players control their acceleration.

Each sub-command reads a JSON configuration, runs one study and writes its
artifacts (CSV fields and traces, `manifest.json`) in the output directory:

    $ mfg-accel solve-hjb --config configs/lq.json --out out/lq
    $ mfg-accel solve-mfg --config configs/weak_coupling.json --sigma 0.05

The manifest records every checked quantity next to its threshold.

Exit codes
----------

    0   every assertion of the manifest passed
    1   at least one assertion failed (the artifacts are still written)
    2   invalid configuration (unknown key, out of range value, bad JSON)
    3   the run was aborted (CFL violation, non-finite value, leakage...)
"""

import logging

import click

from ..app import App
from ..exceptions import SolverAbort
from ..utils.misc import bcolors as bc

EXIT_ASSERTION = 1
EXIT_CONFIG = 2
EXIT_ABORT = 3


class ConfigError(click.ClickException):
    exit_code = EXIT_CONFIG


class AbortError(click.ClickException):
    exit_code = EXIT_ABORT


_COMMON_OPTIONS = (
    click.option(
        "--config",
        "config_path",
        type=click.Path(dir_okay=False),
        help="JSON configuration file. Defaults to the baseline problem.",
    ),
    click.option(
        "--out",
        "out_dir",
        default="mfg-accel-out",
        show_default=True,
        help="Output directory of the artifacts.",
    ),
    click.option(
        "--resolution-scale",
        type=float,
        default=1.0,
        show_default=True,
        help="Multiply nx, nv and nt by this factor.",
    ),
    click.option("--sigma", type=float, help="Override the diffusion coefficient."),
    click.option("--quiet", is_flag=True, help="Only report warnings and errors."),
    click.option("--no-fixtures", is_flag=True, help="Skip the regression fixtures."),
)


def common_options(func):
    """Add the options shared by every study."""
    for option in reversed(_COMMON_OPTIONS):
        func = option(func)
    return func


def run_study(study, config_path, out_dir, resolution_scale, sigma, quiet, no_fixtures):
    logging.basicConfig(
        level=logging.WARNING if quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        app = App(
            study=study,
            config_path=config_path,
            out_dir=out_dir,
            resolution_scale=resolution_scale,
            sigma=sigma,
            quiet=quiet,
            no_fixtures=no_fixtures,
            cli=True,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    # Run the app
    try:
        manifest = app.run()
    except SolverAbort as exc:
        raise AbortError(str(exc)) from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not manifest.passed:
        failed = ", ".join(a["name"] for a in manifest.assertions if not a["passed"])
        click.echo(f"{bc.FAIL}Failed assertions:{bc.END} {failed}", err=True)
        raise SystemExit(EXIT_ASSERTION)


@click.group()
def main():
    """Mean field games with control on the acceleration."""


@main.command("solve-hjb")
@common_options
def solve_hjb(**kwargs):
    """Solve the HJB equation (measure frozen at m0)."""
    run_study("solve_hjb", **kwargs)


@main.command("solve-mfg")
@common_options
def solve_mfg(**kwargs):
    """Solve the coupled HJB / transport system by damped fixed point."""
    run_study("solve_mfg", **kwargs)


@main.command("pmp-check")
@common_options
def pmp_check(**kwargs):
    """Compare Pontryagin shooting with the HJB value (sigma = 0)."""
    run_study("pmp_check", **kwargs)


@main.command("particles-check")
@common_options
def particles_check(**kwargs):
    """Compare a weighted particle cloud with the transported density."""
    run_study("particles_check", **kwargs)


@main.command("viscosity-sweep")
@common_options
def viscosity_sweep(**kwargs):
    """Solve for decreasing sigma and measure the vanishing viscosity limit."""
    run_study("viscosity_sweep", **kwargs)


@main.command("uniqueness-probe")
@common_options
def uniqueness_probe(**kwargs):
    """Solve from two starts and compare the limits."""
    run_study("uniqueness_probe", **kwargs)


if __name__ == "__main__":
    main()
