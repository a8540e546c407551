"""
Experiment Commands - Parameter discovery and stable calibration runs
"""

import click

from commands.options import run_options, with_run


@click.command("discover")
@run_options
@with_run("discover")
def discover():
    """
    Learn C and alpha of a fractional elliptic equation from samples of u and f.
    """


@click.command("discover-evolution")
@run_options
@with_run("discover-evolution")
def discover_evolution():
    """
    Learn the terms of u_t = sum_j C_j D^{alpha_j} u from two snapshots.
    """


@click.command("calibrate-stable")
@run_options
@with_run("calibrate-stable")
def calibrate_stable():
    """
    Calibrate alpha-stable parameters from a time series via its increment densities.
    """
