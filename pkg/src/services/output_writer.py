import csv
import logging
import os
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.config import Config
from src.models import CheckpointError, ConductionLift, LayerStack
from src.utils import format_float
from src.services.diagnostics import DiagnosticsRecord, record_columns, record_values

logger = logging.getLogger(__name__)

HEADER_END = 'end_header'


class OutputWriter:
    """All file emission for one output directory

    Floats are written in shortest round-trip form so that identical runs
    produce byte-identical files.
    """

    def __init__(self, directory: Optional[str] = None):
        self.directory = directory or Config.OUTPUT_DIR
        os.makedirs(self.directory, exist_ok=True)
        self._series_path = None
        self._series_columns = None
        logger.info(f"OutputWriter initialized for {self.directory}")

    def path(self, filename: str) -> str:
        return os.path.join(self.directory, filename)

    def write_table(self, filename: str, fieldnames: List[str], rows: Iterable[Sequence[float]]) -> str:
        """
        Write rows of numbers to a CSV file with a header row

        Args:
            filename: File name inside the output directory
            fieldnames: Column names
            rows: Rows of numbers (or strings), one value per column

        Returns:
            Path of the written file
        """
        output_file = self.path(filename)
        count = 0
        with open(output_file, 'w', newline='', encoding='utf-8') as csvfile:
            writer = csv.writer(csvfile, lineterminator='\n')
            writer.writerow(fieldnames)
            for row in rows:
                writer.writerow([_cell(v) for v in row])
                count += 1
        logger.info(f"Exported {count} rows to {output_file}")
        return output_file

    # --- time series -------------------------------------------------------

    def start_series(self, n_interfaces: int, filename: str = 'timeseries.csv', append: bool = False) -> str:
        """Open the time-series CSV; append keeps earlier rows (resumed runs)"""
        self._series_path = self.path(filename)
        self._series_columns = record_columns(n_interfaces)
        if not (append and os.path.exists(self._series_path)):
            with open(self._series_path, 'w', newline='', encoding='utf-8') as csvfile:
                csv.writer(csvfile, lineterminator='\n').writerow(self._series_columns)
        return self._series_path

    def append_record(self, record: DiagnosticsRecord) -> None:
        if self._series_path is None:
            self.start_series(len(record.interfaces))
        values = record_values(record)
        if len(values) != len(self._series_columns):
            raise ValueError(f"record has {len(values)} values for {len(self._series_columns)} columns")
        with open(self._series_path, 'a', newline='', encoding='utf-8') as csvfile:
            csv.writer(csvfile, lineterminator='\n').writerow([_cell(v) for v in values])

    # --- eigen and steady tables -------------------------------------------

    def write_spectrum(self, bases, filename: str = 'spectrum.csv') -> str:
        rows = []
        for basis in bases:
            for k, lam in enumerate(basis.eigenvalues, start=1):
                rows.append((basis.kappa, k, lam))
        return self.write_table(filename, ['kappa', 'k', 'lambda'], rows)

    def write_eigenfunctions(self, basis, z: np.ndarray, filename: str = 'eigenfunctions.csv') -> str:
        values = basis.evaluate(z)
        fieldnames = ['z'] + [f"v_{k}" for k in range(1, basis.kmax + 1)]
        return self.write_table(filename, fieldnames, ([zi] + list(row) for zi, row in zip(z, values)))

    def write_lift(self, lift: ConductionLift, z: np.ndarray, filename: str = 'steady.csv') -> str:
        layer = lift.stack.layer_index(z)
        values = lift.value(z, layer)
        flux = -lift.stack.bD[layer] * lift.derivative(z, layer)
        return self.write_table(filename, ['z', 'phi', 'flux'], zip(z, values, flux))

    # --- snapshots ---------------------------------------------------------

    def write_vtk(self, filename: str, x: np.ndarray, z: np.ndarray, fields: Dict[str, np.ndarray],
                  title: str = 'layered convection snapshot') -> str:
        """
        Legacy ASCII VTK rectilinear grid

        Args:
            filename: File name inside the output directory
            x: Horizontal coordinates (Nx)
            z: Vertical coordinates (nz), ascending
            fields: Point data arrays of shape (Nx, nz)
            title: Header comment line

        Returns:
            Path of the written file
        """
        output_file = self.path(filename)
        nx, nz = len(x), len(z)
        lines = [
            '# vtk DataFile Version 3.0',
            title,
            'ASCII',
            'DATASET RECTILINEAR_GRID',
            f"DIMENSIONS {nx} 1 {nz}",
            f"X_COORDINATES {nx} double",
            ' '.join(format_float(v) for v in x),
            'Y_COORDINATES 1 double',
            '0.0',
            f"Z_COORDINATES {nz} double",
            ' '.join(format_float(v) for v in z),
            f"POINT_DATA {nx * nz}",
        ]
        for name, values in fields.items():
            lines.append(f"SCALARS {name} double 1")
            lines.append('LOOKUP_TABLE default')
            # x varies fastest
            lines.extend(' '.join(format_float(v) for v in values[:, q]) for q in range(nz))
        with open(output_file, 'w', newline='\n', encoding='utf-8') as handle:
            handle.write('\n'.join(lines) + '\n')
        logger.info(f"Wrote snapshot {output_file}")
        return output_file

    # --- checkpoints -------------------------------------------------------

    def write_checkpoint(self, filename: str, modal: np.ndarray, t: float, step: int, nx: int,
                         stack: LayerStack) -> str:
        """Text header followed by little-endian float64 (mode, eigenindex, real/imag)"""
        output_file = self.path(filename)
        modes, kmax = modal.shape
        header = [
            f"version: {Config.CHECKPOINT_VERSION}",
            f"time: {format_float(t)}",
            f"step: {step}",
            f"Nx: {nx}",
            f"Kmax: {kmax}",
            f"stack_hash: {stack.stack_hash()}",
            f"modes: {modes}",
            HEADER_END,
        ]
        data = np.empty((modes, kmax, 2), dtype='<f8')
        data[:, :, 0] = modal.real
        data[:, :, 1] = modal.imag
        with open(output_file, 'wb') as handle:
            handle.write(('\n'.join(header) + '\n').encode('ascii'))
            handle.write(data.tobytes(order='C'))
        logger.info(f"Wrote checkpoint {output_file} (t={t!r}, step={step})")
        return output_file


def _cell(value) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    if isinstance(value, str):
        return value
    return format_float(value)


def read_checkpoint(path: str, nx: Optional[int] = None, kmax: Optional[int] = None,
                    stack: Optional[LayerStack] = None) -> Tuple[np.ndarray, float, int]:
    """
    Load a checkpoint and check it against the running configuration

    Returns:
        (modal coefficients, time, step)

    Raises:
        CheckpointError: on a malformed file or a header mismatch
    """
    with open(path, 'rb') as handle:
        blob = handle.read()
    marker = (HEADER_END + '\n').encode('ascii')
    end = blob.find(marker)
    if end < 0:
        raise CheckpointError(f"{path}: missing '{HEADER_END}' line")

    header = {}
    for line in blob[:end].decode('ascii', errors='replace').splitlines():
        if ':' not in line:
            raise CheckpointError(f"{path}: malformed header line {line!r}")
        key, value = (part.strip() for part in line.split(':', 1))
        header[key] = value

    try:
        version = int(header['version'])
        t = float(header['time'])
        step = int(header['step'])
        file_nx = int(header['Nx'])
        file_kmax = int(header['Kmax'])
        modes = int(header['modes'])
        stack_hash = header['stack_hash']
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: incomplete header ({str(e)})")

    problems = []
    if version != Config.CHECKPOINT_VERSION:
        problems.append(f"version {version} != {Config.CHECKPOINT_VERSION}")
    if nx is not None and file_nx != nx:
        problems.append(f"Nx {file_nx} != {nx}")
    if kmax is not None and file_kmax != kmax:
        problems.append(f"Kmax {file_kmax} != {kmax}")
    if stack is not None and stack_hash != stack.stack_hash():
        problems.append(f"stack hash {stack_hash} != {stack.stack_hash()}")
    if problems:
        logger.error(f"Checkpoint {path} does not match the run: {'; '.join(problems)}")
        raise CheckpointError(f"{path}: " + '; '.join(problems))

    payload = blob[end + len(marker):]
    expected = modes * file_kmax * 2 * 8
    if len(payload) != expected:
        raise CheckpointError(f"{path}: expected {expected} data bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype='<f8').reshape(modes, file_kmax, 2)
    modal = data[:, :, 0] + 1j * data[:, :, 1]
    logger.info(f"Loaded checkpoint {path} (t={t!r}, step={step})")
    return modal, t, step
