#!/usr/bin/env python3
"""CSV tables, VTK snapshots and checkpoints"""

import csv
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.models import BoundaryData, CheckpointError, conduction_profile
from src.services.output_writer import OutputWriter, read_checkpoint


def _rows(path):
    with open(path, newline='') as handle:
        return list(csv.reader(handle))


def test_checkpoint_round_trip(tmp_path, two_layer_stack):
    writer = OutputWriter(str(tmp_path))
    rng = np.random.default_rng(0)
    modal = rng.standard_normal((5, 6)) + 1j * rng.standard_normal((5, 6))
    path = writer.write_checkpoint('state.chk', modal, 0.125, 40, 8, two_layer_stack)
    loaded, t, step = read_checkpoint(path, 8, 6, two_layer_stack)
    np.testing.assert_array_equal(loaded, modal)
    assert t == 0.125
    assert step == 40


def test_checkpoint_mismatch(tmp_path, two_layer_stack, single_stack):
    writer = OutputWriter(str(tmp_path))
    path = writer.write_checkpoint('state.chk', np.zeros((5, 6), dtype=complex), 0.0, 0, 8, two_layer_stack)
    with pytest.raises(CheckpointError, match='Nx'):
        read_checkpoint(path, 16, 6, two_layer_stack)
    with pytest.raises(CheckpointError, match='Kmax'):
        read_checkpoint(path, 8, 4, two_layer_stack)
    with pytest.raises(CheckpointError, match='stack hash'):
        read_checkpoint(path, 8, 6, single_stack)


def test_truncated_checkpoint(tmp_path, two_layer_stack):
    writer = OutputWriter(str(tmp_path))
    path = writer.write_checkpoint('state.chk', np.ones((5, 6), dtype=complex), 0.0, 0, 8, two_layer_stack)
    with open(path, 'rb') as handle:
        blob = handle.read()
    with open(path, 'wb') as handle:
        handle.write(blob[:-8])
    with pytest.raises(CheckpointError, match='data bytes'):
        read_checkpoint(path)
    with open(path, 'wb') as handle:
        handle.write(b'version: 1\n')
    with pytest.raises(CheckpointError, match='end_header'):
        read_checkpoint(path)


def test_vtk_layout(tmp_path):
    writer = OutputWriter(str(tmp_path))
    x = np.array([0.0, 0.5])
    z = np.array([-1.0, -0.5, 0.0])
    phi = np.arange(6, dtype=float).reshape(2, 3)
    path = writer.write_vtk('snap.vtk', x, z, {'phi': phi}, title='t=0.0')
    with open(path) as handle:
        lines = handle.read().splitlines()
    assert lines[0] == '# vtk DataFile Version 3.0'
    assert lines[1] == 't=0.0'
    assert 'DIMENSIONS 2 1 3' in lines
    assert 'POINT_DATA 6' in lines
    start = lines.index('LOOKUP_TABLE default') + 1
    # x varies fastest
    assert lines[start:start + 3] == ['0.0 3.0', '1.0 4.0', '2.0 5.0']


def test_steady_table(tmp_path, two_layer_stack):
    writer = OutputWriter(str(tmp_path))
    lift = conduction_profile(two_layer_stack, BoundaryData(0.0, 1.0))
    path = writer.write_lift(lift, np.array([0.0, -0.5, -1.0]))
    rows = _rows(path)
    assert rows[0] == ['z', 'phi', 'flux']
    assert float(rows[2][1]) == pytest.approx(2.0 / 3.0)
    assert all(float(row[2]) == pytest.approx(4.0 / 3.0) for row in rows[1:])


def test_spectrum_and_eigenfunction_tables(tmp_path, small_bases):
    writer = OutputWriter(str(tmp_path))
    rows = _rows(writer.write_spectrum(small_bases.bases))
    assert rows[0] == ['kappa', 'k', 'lambda']
    assert len(rows) == 1 + 5 * 6
    assert rows[1][1] == '1'
    rows = _rows(writer.write_eigenfunctions(small_bases.bases[0], np.linspace(0.0, -1.0, 5)))
    assert rows[0] == ['z'] + [f"v_{k}" for k in range(1, 7)]
    assert len(rows) == 6


def test_series_append(tmp_path, small_bases, make_transport):
    from src.services.diagnostics import measure
    from src.services.spectral_fields import eigenmode_field

    transport = make_transport(small_bases)
    record = measure(transport, transport.initial_state(eigenmode_field(small_bases, 0, 1)))
    writer = OutputWriter(str(tmp_path))
    writer.start_series(1)
    writer.append_record(record)
    resumed = OutputWriter(str(tmp_path))
    resumed.start_series(1, append=True)
    resumed.append_record(record)
    rows = _rows(tmp_path / 'timeseries.csv')
    assert len(rows) == 3
    assert rows[1] == rows[2]
    assert len(rows[0]) == len(rows[1])


if __name__ == "__main__":
    sys.exit(pytest.main([__file__]))
