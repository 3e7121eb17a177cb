#!/usr/bin/env python3
"""
Entry point of the ``rangeseg`` command.

Global options select and override the pipeline configuration; each
subcommand receives the effective configuration as its context object.

Exit codes:
    0  success
    1  usage or configuration error
    2  data error (malformed, missing or inconsistent inputs)
    3  a verification check failed
"""

import logging
import sys
from pathlib import Path
from typing import Optional

import click

from rangeseg.cli.analysis import bench, gradcheck
from rangeseg.cli.pipeline import (
    eval_cmd,
    freqs,
    infer,
    init_checkpoint,
    inspect,
    postprocess,
    project,
    synth,
)
from rangeseg.config import MULTI_SCAN, SINGLE_SCAN, load_config
from rangeseg.errors import CheckFailure, ConfigurationError, RangeSegError

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CHECK = 3


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, (click.ClickException, click.Abort, ConfigurationError)):
        return EXIT_USAGE
    if isinstance(error, CheckFailure):
        return EXIT_CHECK
    return EXIT_DATA


class RangeSegGroup(click.Group):
    """Click group that maps library exceptions onto the exit code contract."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            rv = super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
        except click.ClickException as e:
            e.show()
            sys.exit(EXIT_USAGE)
        except click.Abort:
            click.echo('Aborted!', err=True)
            sys.exit(EXIT_USAGE)
        except (RangeSegError, OSError) as e:
            click.echo(f'Error: {e}', err=True)
            sys.exit(exit_code_for(e))
        sys.exit(rv if isinstance(rv, int) else EXIT_OK)


def configure_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format='%(levelname)s %(name)s: %(message)s', force=True)


@click.group(cls=RangeSegGroup)
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False, path_type=Path),
              envvar='RANGESEG_CONFIG_FILE', default=None,
              help='YAML file merged over the packaged defaults')
@click.option('--set', 'overrides', type=str, multiple=True,
              help='Dotted override, e.g. --set projection.width=1024 (repeatable)')
@click.option('--seed', type=click.IntRange(0, 2 ** 64 - 1), default=None,
              help='Seed for weight initialization and augmentation')
@click.option('--workers', type=click.IntRange(min=0), default=None,
              help='Worker processes for per-scan loading (default: logical cores)')
@click.option('--single-scan/--multi-scan', 'single_scan', default=None,
              help='Evaluation protocol: 19 classes without residuals, or 25 classes')
@click.option('-v', '--verbose', is_flag=True, help='Debug logging')
@click.option('-q', '--quiet', is_flag=True, help='Only warnings and errors')
@click.version_option(package_name='rangeseg')
@click.pass_context
def cli(
    ctx: click.Context,
    config_path: Optional[Path],
    overrides: tuple,
    seed: Optional[int],
    workers: Optional[int],
    single_scan: Optional[bool],
    verbose: bool,
    quiet: bool,
):
    """Range-view LiDAR sequence segmentation.

    \b
    Examples:
        rangeseg synth demo/
        rangeseg init-checkpoint demo.mrsk
        rangeseg infer demo/ -c demo.mrsk -o preds/
        rangeseg eval preds/ demo/ --out miou.tsv
    """
    configure_logging(verbose, quiet)

    overrides = list(overrides)
    if seed is not None:
        overrides.append(f'runtime.seed={seed}')
    if workers is not None:
        overrides.append(f'runtime.workers={workers}')
    if single_scan is not None:
        overrides.append(f'evaluation.protocol={SINGLE_SCAN if single_scan else MULTI_SCAN}')

    ctx.obj = load_config(config_path, overrides)
    log.debug(f'effective configuration loaded ({len(overrides)} overrides)')


cli.add_command(project)
cli.add_command(infer)
cli.add_command(postprocess)
cli.add_command(eval_cmd, name='eval')
cli.add_command(gradcheck)
cli.add_command(bench)
cli.add_command(freqs)
cli.add_command(inspect)
cli.add_command(synth)
cli.add_command(init_checkpoint, name='init-checkpoint')


if __name__ == '__main__':
    cli()
