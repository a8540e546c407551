"""
Commands Package - Register all command modules
"""

from .experiment_commands import calibrate_stable, discover, discover_evolution
from .tool_commands import bench_quadrature, quadrature_rule, synth


def register_commands(cli):
    """Register all commands with the CLI group."""
    cli.add_command(discover)
    cli.add_command(discover_evolution)
    cli.add_command(calibrate_stable)
    cli.add_command(bench_quadrature)
    cli.add_command(synth)
    cli.add_command(quadrature_rule)
