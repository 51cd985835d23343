"""Command-line front end: ``hmsim run|sweep-ratio|calibrate|export-calibration|serve``.

Exit codes: 0 success, 1 a run aborted at runtime, 2 invalid configuration.
"""
import logging
import os
import sys

import click

from config import get_config
from errors import CalibrationError, ConfigError, SimulationError
from harness import (fit_calibration, load_experiment, run_experiment, sweep_ratio, write_measurements,
                     write_sweep)
from tier_model import export_calibration, load_calibration

logger = logging.getLogger("hmsim")

EXIT_OK, EXIT_ABORTED, EXIT_INVALID = 0, 1, 2


def setup_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format="ts=%(asctime)s level=%(levelname)s logger=%(name)s msg=%(message)s",
        stream=sys.stderr,
    )


def _parse_list(value, cast=float):
    if not value:
        return None
    try:
        return [cast(v) for v in str(value).split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected a comma separated list, got {value!r}")


def _invalid(ctx, exc: Exception):
    click.echo(f"invalid configuration: {exc}", err=True)
    for row in getattr(exc, "rows", []):
        click.echo(f"  {row}", err=True)
    ctx.exit(EXIT_INVALID)


@click.group()
@click.option("--log-level", default=None, help="Overrides HMSIM_LOG_LEVEL.")
@click.pass_context
def cli(ctx, log_level):
    """Tiered-memory placement simulator."""
    setup_logging(log_level or get_config().LOG_LEVEL)
    ctx.ensure_object(dict)


def _echo_sweep(levels):
    click.echo("demand_mbps  best_ratio  gain")
    for level in levels:
        ratio = level.best.ratio
        click.echo(f"{level.demand:11.0f}  {ratio * 100:3.0f}:{(1 - ratio) * 100:<3.0f}     {level.gain:.3f}")


@cli.command()
@click.argument("experiment", type=click.Path())
@click.option("--seeds", default=None, help="Comma separated seeds, overriding the experiment file.")
@click.option("--workers", type=int, default=None, help="Parallel cells (default HMSIM_WORKERS).")
@click.option("--out", "out_dir", default=None, help="Output directory (default HMSIM_OUTPUT_DIR).")
@click.option("--dry-run", is_flag=True, help="Validate and list cells without running them.")
@click.option("--no-timestamp", is_flag=True, help="Omit the timestamp header line from CSV files.")
@click.option("--no-store", is_flag=True, help="Do not record results in the results database.")
@click.pass_context
def run(ctx, experiment, seeds, workers, out_dir, dry_run, no_timestamp, no_store):
    """Run every cell of an experiment file."""
    cfg = get_config()
    try:
        exp = load_experiment(experiment)
        seed_list = _parse_list(seeds, int)
        if exp.kind == "ratio_sweep":
            if dry_run:
                click.echo(f"{exp.name}: ratio sweep over {exp.sweep.get('demands')}")
                ctx.exit(EXIT_OK)
            levels = sweep_ratio(exp, seed=(seed_list or exp.seeds)[0])
        else:
            cells = exp.validate() if dry_run else None
            if dry_run:
                for cell in exp.cells(seed_list):
                    click.echo(cell.cell_id)
                click.echo(f"{len(cells)} cells valid")
                ctx.exit(EXIT_OK)
    except (ConfigError, click.BadParameter) as exc:
        _invalid(ctx, exc)
        return

    out_dir = out_dir or cfg.OUTPUT_DIR
    if exp.kind == "ratio_sweep":
        os.makedirs(os.path.join(out_dir, exp.name), exist_ok=True)
        path = write_sweep(os.path.join(out_dir, exp.name, "sweep.csv"), levels, not no_timestamp)
        _echo_sweep(levels)
        click.echo(f"wrote {path}")
        ctx.exit(EXIT_OK)

    try:
        result = run_experiment(exp, out_dir, workers or cfg.WORKERS, seed_list, timestamp=not no_timestamp)
    except ConfigError as exc:
        _invalid(ctx, exc)
        return

    for row in result.comparison:
        click.echo(f"{row.workload:<16} {row.policy:<14} speedup={row.speedup:.3f} "
                   f"energy={row.energy_ratio:.3f} latency={row.mean_latency:.1f}ns")
    for policy, value in sorted(result.geomean.items()):
        click.echo(f"geomean {policy:<14} {value:.3f}")
    if result.correlation is not None:
        click.echo(f"energy/speedup rank correlation {result.correlation:.3f}")
    for name, path in sorted(result.files.items()):
        click.echo(f"wrote {path}")

    if not no_store:
        from run_services import save_result
        stored = save_result(result, source=experiment)
        if not stored["success"]:
            logger.warning("results not stored: %s", stored["error"])

    if result.aborted:
        for outcome in result.aborted:
            click.echo(f"aborted {outcome.cell.cell_id}: {outcome.error}", err=True)
        ctx.exit(EXIT_ABORTED)
    ctx.exit(EXIT_OK)


@cli.command("sweep-ratio")
@click.argument("experiment", type=click.Path())
@click.option("--grid", default=None, help="Comma separated FAST shares, e.g. 1.0,0.9,0.8.")
@click.option("--demands", default=None, help="Comma separated demand levels in MB/s.")
@click.option("--out", "out_dir", default=None)
@click.option("--no-timestamp", is_flag=True)
@click.pass_context
def sweep_ratio_cmd(ctx, experiment, grid, demands, out_dir, no_timestamp):
    """Static interleave ratio sweep; reports the best ratio per demand level."""
    try:
        exp = load_experiment(experiment)
        levels = sweep_ratio(exp, demands=_parse_list(demands), grid=_parse_list(grid))
    except (ConfigError, click.BadParameter) as exc:
        _invalid(ctx, exc)
        return
    _echo_sweep(levels)
    out_dir = os.path.join(out_dir or get_config().OUTPUT_DIR, exp.name)
    os.makedirs(out_dir, exist_ok=True)
    click.echo(f"wrote {write_sweep(os.path.join(out_dir, 'sweep.csv'), levels, not no_timestamp)}")


@cli.command()
@click.argument("measurements", type=click.Path())
@click.option("--base", default=None, help="Calibration providing capacities and energies.")
@click.option("--out", "out_path", default="calibration.yaml", show_default=True)
@click.pass_context
def calibrate(ctx, measurements, base, out_path):
    """Fit a calibration file from (tier, read_fraction, demand, latency, bandwidth) measurements."""
    try:
        base_cal = load_calibration(base or get_config().CALIBRATION_PATH)
        fitted = fit_calibration(measurements, base_cal)
    except (CalibrationError, ConfigError) as exc:
        _invalid(ctx, exc)
        return
    export_calibration(fitted, out_path)
    click.echo(f"wrote {out_path}")


@cli.command("export-calibration")
@click.argument("out_path", type=click.Path())
@click.option("--calibration", default=None, help="Calibration to export (default HMSIM_CALIBRATION).")
@click.option("--format", "fmt", type=click.Choice(["yaml", "csv"]), default="yaml", show_default=True)
@click.pass_context
def export_calibration_cmd(ctx, out_path, calibration, fmt):
    """Write the calibration as YAML or as a measurement CSV accepted by ``calibrate``."""
    try:
        cal = load_calibration(calibration or get_config().CALIBRATION_PATH)
    except ConfigError as exc:
        _invalid(ctx, exc)
        return
    if fmt == "csv":
        write_measurements(out_path, cal)
    else:
        export_calibration(cal, out_path)
    click.echo(f"wrote {out_path}")


@cli.command()
@click.option("--port", type=int, default=None)
def serve(port):
    """Serve the read-only results API."""
    from app import create_app
    app = create_app()
    app.run(host="0.0.0.0", port=port or app.config.get("PORT", 5001), debug=app.config.get("DEBUG", False))


def main():
    try:
        cli(obj={})
    except SimulationError as exc:
        logger.error("%s", exc)
        sys.exit(EXIT_ABORTED)


if __name__ == "__main__":
    main()
