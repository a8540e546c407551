"""
Main entry point for fracgp.

This module provides the application factory for the command-line interface.
Commands are organized in separate modules in the commands package.
"""

import logging

import click

from commands import register_commands

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(verbosity: int):
    """WARNING by default, INFO with -v, DEBUG with -vv."""
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def create_cli():
    """
    Application factory function to create and configure the CLI group.

    Returns:
        click.Group: Configured command group
    """
    @click.group(name="fracgp")
    @click.option("-v", "--verbose", count=True, help="-v for INFO, -vv for DEBUG logging.")
    def cli(verbose):
        """Fractional PDE parameter discovery with Gaussian processes."""
        configure_logging(verbose)

    # Register all commands
    register_commands(cli)

    return cli


if __name__ == '__main__':
    create_cli()()
