"""
Tool Commands - Quadrature benchmarks, synthetic data and rule dumps
"""

import click
import pandas as pd

from commands.options import fail, run_options, with_run
from services.errors import FracGpError
from services.quadrature import DEFAULT_NODES_1D, gauss_laguerre_rule


@click.command("bench-quadrature")
@run_options
@with_run("bench-quadrature")
def bench_quadrature():
    """Sup-error tables of the quadrature kernel blocks against reference values."""


@click.command("synth")
@run_options
@with_run("synth")
def synth():
    """Write synthetic data sets (fractional Poisson, snapshots, stable paths)."""


@click.command("quadrature-rule")
@click.option("--nodes", type=click.IntRange(min=1), default=DEFAULT_NODES_1D, show_default=True)
@click.option("--alpha", "alpha_ggl", type=float, default=0.0, show_default=True,
              help="Exponent of the weight x^alpha e^-x.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="CSV path; stdout if omitted.")
def quadrature_rule(nodes, alpha_ggl, out):
    """Dump generalized Gauss-Laguerre nodes and weights as `node,weight` CSV."""
    try:
        rule = gauss_laguerre_rule(nodes, alpha_ggl)
    except FracGpError as exc:
        fail(exc)
    frame = pd.DataFrame({"node": rule.nodes, "weight": rule.weights})
    if out is None:
        click.echo(frame.to_csv(index=False, float_format="%.17g"), nl=False)
    else:
        frame.to_csv(out, index=False, float_format="%.17g")
        click.echo(f"rule written to {out}")
