"""
Shared command options and the error-to-exit-code boundary
"""

import functools
import logging

import click

from services.config_service import apply_overrides, load_run_config
from services.errors import ConfigurationError, FracGpError
from services.experiment_service import RunReport, run

logger = logging.getLogger(__name__)


def parse_quad_2d(ctx, param, value):
    """`NxM` -> (radial, angular)."""
    if value is None:
        return None
    try:
        radial, angular = (int(part) for part in value.lower().split("x"))
    except ValueError:
        raise click.BadParameter("expected NxM, for example 64x64") from None
    if radial < 1 or angular < 4:
        raise click.BadParameter("need at least 1 radial and 4 angular nodes")
    return radial, angular


def run_options(command):
    """--config plus the flags that override config values."""
    decorators = [
        click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False),
                     help="JSON run configuration."),
        click.option("--out", default=None, help="Output directory (overrides output_dir)."),
        click.option("--seed", type=int, default=None, help="Random seed (overrides seed)."),
        click.option("--quad-1d", type=click.IntRange(min=1), default=None, help="Gauss-Laguerre nodes in 1D."),
        click.option("--quad-2d", default=None, callback=parse_quad_2d, help="Radial x angular nodes in 2D."),
        click.option("--threads", type=click.IntRange(min=1), default=None, help="Kernel assembly threads."),
    ]
    for decorator in reversed(decorators):
        command = decorator(command)
    return command


def fail(error: FracGpError):
    """Report a library error as one line on stderr and exit with its code."""
    click.echo(f"error: {error.kind}: {error}", err=True)
    raise SystemExit(error.exit_code)


def summarize(report: RunReport):
    for name, value in sorted(report.raw_params.items()):
        click.echo(f"{name} = {value:.6g}")
    for name, value in sorted(report.derived.items()):
        click.echo(f"{name} = {value:.6g}" if isinstance(value, float) else f"{name} = {value}")
    click.echo(f"results written to {report.output_dir}")


def execute(expected_mode: str, config_path: str, **overrides) -> RunReport:
    """Load, override and run a config; library errors become exit codes."""
    try:
        config = apply_overrides(load_run_config(config_path), **overrides)
        if config.mode != expected_mode:
            raise ConfigurationError(
                f"Config {config_path} is for mode {config.mode!r}, not {expected_mode!r}.")
        logger.info("Starting %s (seed %d, digest %s)", config.mode, config.seed, config.digest[:12])
        report = run(config)
    except FracGpError as exc:
        fail(exc)
    summarize(report)
    return report


def with_run(mode: str):
    """Build a command body that executes configs of one mode."""
    def decorate(func):
        @functools.wraps(func)
        def wrapper(config_path, out, seed, quad_1d, quad_2d, threads):
            execute(mode, config_path, out=out, seed=seed, quad_1d=quad_1d, quad_2d=quad_2d, threads=threads)
        return wrapper
    return decorate
