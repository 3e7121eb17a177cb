#!/usr/bin/env python3

"""
Pytest configuration file for command-line tests.
"""

import tempfile
from pathlib import Path

import pytest
from click.testing import CliRunner

from rangeseg.cli.main import cli
from rangeseg.config import PathConfig

_test_paths = PathConfig.get_test_paths('cli')

# Small geometry and network so a full pipeline run stays fast
SMALL = [
    '--workers', '0',
    '--set', 'projection.height=16',
    '--set', 'projection.width=64',
    '--set', 'network.meta_kernel.hidden=4',
    '--set', 'network.meta_kernel.out_channels=4',
    '--set', 'network.backbone.encoder_channels=[4,4,8,8]',
    '--set', 'network.backbone.decoder_channels=[8,4,4,4]',
    '--set', 'network.context.channels=4',
]


@pytest.fixture(scope="session")
def output_dir(request):
    """
    Session output directory. With --keep-outputs the files are written under
    the module's example_outputs directory for inspection.
    """
    if request.config.getoption("--keep-outputs", default=False):
        path = _test_paths['outputs']
        path.mkdir(parents=True, exist_ok=True)
        yield path
    else:
        with tempfile.TemporaryDirectory(prefix="cli_test_") as tmpdir:
            yield Path(tmpdir)


@pytest.fixture(scope="function")
def work_dir():
    with tempfile.TemporaryDirectory(prefix="cli_test_") as tmpdir:
        yield Path(tmpdir)


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def small():
    return list(SMALL)


@pytest.fixture(scope="session")
def sequence(output_dir):
    """Four-scan synthetic sequence shared by the read-only tests."""
    path = output_dir / 'sequence'
    result = CliRunner().invoke(cli, [*SMALL, 'synth', str(path), '--scans', '4', '--points', '400'])
    assert result.exit_code == 0, result.output
    return path
