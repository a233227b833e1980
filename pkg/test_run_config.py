#!/usr/bin/env python3
"""Run-file parsing, validation and echo"""

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.config import Config
from src.models import ConfigurationError
from src.services.run_config import emit_config, load_config, parse_config

MINIMAL = """
# two layers, bottom twice as diffusive
stack.interfaces = 0, -0.5, -1
stack.layers = 1 1 1; 1 1 2
"""

FULL = """
stack.interfaces = [0, 0.25, 1]
stack.layers = 1 0.5 1; 4, 0.5, 2
stack.width = 2
constants.alpha = 0.5
boundary.C0 = 0
boundary.C1 = 1
resolution.Nx = 32
resolution.Kmax = 12
resolution.nq = 16
resolution.order = 3
stepper.dt = 2.5e-4
stepper.scheme = IMEX-Euler
stepper.adaptive = yes
run.T_end = 0.1
run.seed = 42
output.cadence = 5
output.directory = results/full
output.formats = csv, checkpoint
output.checkpoint_every = 100
initial.kind = random
initial.band = 3, 6
initial.amplitude = 0.01
"""


def test_minimal_file_fills_defaults():
    config = parse_config(MINIMAL)
    assert config.stack.n_layers == 2
    assert config.stack.D == (1.0, 2.0)
    assert config.resolution.nx == 128
    assert config.resolution.kmax == 64
    assert config.resolution.nq is None
    assert config.stepper.scheme == 'IMEX-CN'
    assert config.output.directory == Config.OUTPUT_DIR
    assert config.output.formats == ('csv', 'vtk', 'checkpoint')
    assert config.initial.kind == 'eigenmode'
    assert config.initial.seed == 0


def test_full_file():
    config = parse_config(FULL)
    assert config.stack.interfaces == (0.0, -0.25, -1.0)
    assert config.stack.K == (1.0, 4.0)
    assert config.stack.width == 2.0
    assert config.constants.buoyancy == 0.5
    assert config.boundary.C1 == 1.0
    assert config.resolution.nq == 16
    assert config.stepper.adaptive is True
    assert config.stepper.scheme == 'IMEX-Euler'
    assert config.output.formats == ('csv', 'checkpoint')
    assert config.initial.band == (3, 6)
    # initial seed follows the run seed unless given
    assert config.initial.seed == 42


@pytest.mark.parametrize('text', [MINIMAL, FULL])
def test_emit_round_trips(text):
    config = parse_config(text)
    assert parse_config(emit_config(config)) == config


def test_every_problem_is_reported():
    text = MINIMAL + """
resolution.Nx = 7
stepper.dt = 0
stepper.scheme = RK4
output.formats = csv, hdf5
bogus.key = 1
"""
    with pytest.raises(ConfigurationError) as excinfo:
        parse_config(text)
    errors = excinfo.value.errors
    assert any('bogus.key' in e for e in errors)
    # the unknown key stops parsing before the value checks
    assert len(errors) == 1

    with pytest.raises(ConfigurationError) as excinfo:
        parse_config(text.replace('bogus.key = 1', ''))
    message = str(excinfo.value)
    assert 'resolution.Nx' in message
    assert 'dt must be > 0' in message
    assert 'scheme' in message
    assert 'hdf5' in message


def test_missing_and_duplicate_keys():
    with pytest.raises(ConfigurationError, match='stack.layers'):
        parse_config('stack.interfaces = 0, -1\n')
    with pytest.raises(ConfigurationError, match='duplicate'):
        parse_config(MINIMAL + 'run.T_end = 1\nrun.T_end = 2\n')


def test_unparseable_value():
    with pytest.raises(ConfigurationError, match='resolution.Kmax'):
        parse_config(MINIMAL + 'resolution.Kmax = many\n')


def test_quadrature_capacity():
    with pytest.raises(ConfigurationError, match='quadrature capacity'):
        parse_config(MINIMAL + 'resolution.nq = 4\nresolution.Kmax = 9\n')


def test_eigenmode_must_be_dealiased():
    with pytest.raises(ConfigurationError, match='initial.m'):
        parse_config(MINIMAL + 'resolution.Nx = 8\ninitial.m = 3\n')


def test_load_config_from_disk(tmp_path):
    path = tmp_path / 'run.cfg'
    path.write_text(MINIMAL)
    assert load_config(str(path)).stack.n_layers == 2
    with pytest.raises(ConfigurationError, match='cannot read'):
        load_config(str(tmp_path / 'missing.cfg'))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__]))
