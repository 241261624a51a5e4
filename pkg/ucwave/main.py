"""
main.py

Command line entry point `ucwave`.

Responsibilities:
- Configure logging
- Load the experiment config through the shared RunStore
- Dispatch each subcommand to its service driver
- Map failures to exit codes (2 configuration / usage, 3 numerical)

for a quick run:
ucwave convergence --config run.json --out results/
"""

import functools
import logging

import click
from pydantic import ValidationError

from ucwave.clients.run_store import RunStore
from ucwave.services.errors import (
    AssemblyError,
    AssumptionError,
    ConfigurationError,
    NumericalError,
    UsageError,
)

# Service modules contain all non-trivial logic
from ucwave.services.experiments import (
    check_geometry,
    run_CM_study,
    run_convergence,
    run_noise_study,
    run_region_sweep,
    run_trace_experiment,
    run_worst_mode_study,
)

logger = logging.getLogger("ucwave")

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def experiment_command(fn):
    """
    Shared options of every subcommand plus error-to-exit-code mapping.

    The wrapped function receives the loaded config and returns a report.
    """

    @click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                  default=None, help="JSON experiment config (defaults apply when omitted).")
    @click.option("--out", "out_dir", type=click.Path(file_okay=False), default="ucwave-out",
                  show_default=True, help="Directory for report.json and table.csv.")
    @click.pass_context
    @functools.wraps(fn)
    def wrapper(ctx, config_path, out_dir, **kwargs):
        store = RunStore(out_dir)
        try:
            cfg = store.load_config(config_path)
            report = fn(cfg, **kwargs)
        except (ConfigurationError, UsageError, ValidationError, AssumptionError) as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(EXIT_CONFIG)
        except (NumericalError, AssemblyError) as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            ctx.exit(EXIT_NUMERICAL)

        path = store.write_report(report)
        click.echo(f"{report.kind}: results in {path}")
        failed = report.diagnostics.get("failed_checks")
        if failed:
            click.echo(f"error: failed checks: {', '.join(failed)}", err=True)
            ctx.exit(EXIT_CONFIG)

    return wrapper


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def cli(verbose):
    """Unique continuation for the wave equation: experiments."""
    _configure_logging(verbose)


@cli.command("check-geometry")
@experiment_command
def check_geometry_cmd(cfg):
    """
    Derived weight parameters, pseudoconvexity and (A1) checks.

    The report is written either way; a failed check exits with 2.
    """
    report = check_geometry(cfg)
    passed = report.diagnostics["pseudoconvexity"]["passed"]
    logger.info("pseudoconvexity %s", "passed" if passed else "FAILED")
    return report


@cli.command("convergence")
@experiment_command
def convergence_cmd(cfg):
    """Errors over uniform refinements with the configured noise."""
    return run_convergence(cfg)


@cli.command("region-sweep")
@click.option("--kappa", "kappas", type=float, multiple=True, help="Override the kappa list.")
@experiment_command
def region_sweep_cmd(cfg, kappas):
    """Convergence in B_kappa for a list of kappa values."""
    return run_region_sweep(cfg, list(kappas) or None)


@cli.command("noise")
@click.option("--theta", "thetas", type=float, multiple=True, help="Override the theta list.")
@experiment_command
def noise_cmd(cfg, thetas):
    """Smooth noise of size h^theta."""
    return run_noise_study(cfg, list(thetas) or None)


@cli.command("worst-mode")
@experiment_command
def worst_mode_cmd(cfg):
    """Noise along the smallest eigenmode of the stabilized system."""
    return run_worst_mode_study(cfg)


@cli.command("trace")
@click.option("--M", "M", type=int, default=None, help="Dimension of the trace space.")
@click.option("--eta", type=float, default=None, help="Size of the phi_3 perturbation.")
@experiment_command
def trace_cmd(cfg, M, eta):
    """Recovery with a finite dimensional trace space and gamma = 0."""
    return run_trace_experiment(cfg, M=M, eta=eta)


@cli.command("cm-study")
@click.option("--M", "M_list", type=int, multiple=True, help="Override the list of M.")
@experiment_command
def cm_study_cmd(cfg, M_list):
    """Constants C_M and C_M^opt at fixed h, k = q = 2."""
    return run_CM_study(cfg, list(M_list) or None)


if __name__ == "__main__":
    cli()
