import logging
from typing import Optional

import numpy as np

from src.models import ConfigurationError, SimulationError, conduction_profile
from src.services.darcy_transport import DarcyTransport, FlowState
from src.services.mode_pool import ModePool
from src.services.output_writer import OutputWriter, read_checkpoint
from src.services.run_config import RunConfig, emit_config
from src.services.spectral_fields import SpectralBasis, SpectralField, build_spectral_basis, eigenmode_field, random_field

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_VERIFY = 3

PROFILE_SAMPLES = 201


def profile_heights(stack, samples: int = PROFILE_SAMPLES) -> np.ndarray:
    """Evenly spaced heights from top to bottom plus every interface, descending"""
    z = np.concatenate([np.linspace(0.0, -stack.depth, samples), np.asarray(stack.interfaces)])
    return np.unique(z)[::-1]


def build_bases(config: RunConfig, pool: Optional[ModePool] = None) -> SpectralBasis:
    resolution = config.resolution
    return build_spectral_basis(config.stack, resolution.nx, resolution.kmax, resolution.nq, pool=pool)


def build_transport(config: RunConfig, bases: SpectralBasis, pool: Optional[ModePool] = None) -> DarcyTransport:
    return DarcyTransport(bases, config.constants, config.boundary, config.stepper,
                          order=config.resolution.order, mesh_density=config.resolution.mesh_density, pool=pool)


def initial_field(config: RunConfig, bases: SpectralBasis) -> SpectralField:
    """
    Initial concentration from the configured preset

    eigenmode and random presets describe the homogenized field directly;
    a file holds total concentration on the grid as an (Nx, nz) .npy array.
    """
    initial = config.initial
    if initial.kind == 'eigenmode':
        return eigenmode_field(bases, initial.m, initial.k, initial.amplitude)
    if initial.kind == 'random':
        return random_field(bases, initial.seed, initial.band, initial.amplitude)

    try:
        nodal = np.load(initial.path)
    except (OSError, ValueError) as e:
        raise ConfigurationError([f"initial.path: cannot load {initial.path!r} ({str(e)})"])
    expected = (bases.grid.nx, bases.grid.nz)
    if nodal.shape != expected:
        raise ConfigurationError([f"initial.path: array shape {nodal.shape} != grid shape {expected}"])
    return SpectralField(None, np.asarray(nodal, dtype=float))


def run_eigen(config: RunConfig, out_dir: str, pool: Optional[ModePool] = None) -> int:
    """Spectrum for every retained wavenumber and the kappa = 0 eigenfunctions"""
    bases = build_bases(config, pool)
    writer = OutputWriter(out_dir)
    writer.write_spectrum(bases.bases)
    writer.write_eigenfunctions(bases.bases[0], profile_heights(config.stack))
    logger.info(f"Eigen output written to {out_dir}")
    return EXIT_OK


def run_steady(config: RunConfig, out_dir: str) -> int:
    lift = conduction_profile(config.stack, config.boundary)
    writer = OutputWriter(out_dir)
    writer.write_lift(lift, profile_heights(config.stack))
    logger.info(f"Steady conduction profile written to {out_dir} (flux={lift.flux!r})")
    return EXIT_OK


def _snapshot_fields(transport: DarcyTransport, state: FlowState):
    phi_total = state.phi.nodal + transport.lift_nodes[None, :]
    ux, uz = state.velocity
    return {'phi': phi_total, 'P': state.pressure_nodal, 'ux': ux, 'uz': uz}


def run_simulation(config: RunConfig, out_dir: Optional[str] = None, resume: Optional[str] = None,
                   pool: Optional[ModePool] = None) -> FlowState:
    """
    Integrate from the initial condition (or a checkpoint) to T_end, writing outputs as configured

    Args:
        config: Parsed run configuration
        out_dir: Output directory; defaults to the configured one
        resume: Checkpoint to restart from
        pool: Thread pool for per-wavenumber work

    Returns:
        Final FlowState
    """
    out_dir = out_dir or config.output.directory
    own_pool = pool is None
    pool = pool or ModePool()
    try:
        bases = build_bases(config, pool)
        transport = build_transport(config, bases, pool)
        writer = OutputWriter(out_dir)
        formats = config.output.formats
        grid = bases.grid

        with open(writer.path('run.cfg'), 'w', encoding='utf-8') as handle:
            handle.write(emit_config(config))

        if resume:
            modal, t, step = read_checkpoint(resume, grid.nx, bases.kmax, config.stack)
            state = transport.make_state(modal, t, step)
            logger.info(f"Resuming from {resume} at t={t!r}, step={step}")
        else:
            state = transport.initial_state(initial_field(config, bases))

        on_record = None
        if 'csv' in formats:
            writer.start_series(config.stack.n_layers - 1, append=bool(resume))
            on_record = writer.append_record

        def write_snapshot(current: FlowState) -> None:
            writer.write_vtk(f"snapshot_{current.step:08d}.vtk", grid.x, grid.z,
                             _snapshot_fields(transport, current), f"t={current.t!r}")

        def write_checkpoint(current: FlowState) -> None:
            writer.write_checkpoint(f"checkpoint_{current.step:08d}.chk", current.modal, current.t,
                                    current.step, grid.nx, config.stack)

        def on_step(current: FlowState) -> None:
            every = config.output.vtk_every
            if 'vtk' in formats and every and current.step % every == 0:
                write_snapshot(current)
            every = config.output.checkpoint_every
            if 'checkpoint' in formats and every and current.step % every == 0:
                write_checkpoint(current)

        if 'vtk' in formats and not resume:
            write_snapshot(state)
        try:
            final, records = transport.run(state, config.T_end, config.output.cadence, on_record, on_step,
                                             record_initial=not resume)
        except SimulationError as e:
            if e.state is not None:
                dump = f"failed_{e.state.step:08d}.chk"
                writer.write_checkpoint(dump, e.state.modal, e.state.t, e.state.step, grid.nx, config.stack)
                logger.error(f"Last finite state (t={e.state.t!r}, step={e.state.step}) saved to {writer.path(dump)}")
            raise

        if 'vtk' in formats:
            write_snapshot(final)
        if 'checkpoint' in formats:
            write_checkpoint(final)
        logger.info(f"Run complete: {len(records)} records, final t={final.t!r}, step={final.step}")
        return final
    finally:
        if own_pool:
            pool.shutdown()


def run_verify(config: RunConfig, out_dir: str, quick: bool = False) -> int:
    from src.services.verification import run_verification

    report = run_verification(config, quick=quick)
    writer = OutputWriter(out_dir)
    writer.write_table('verify.csv', ['check', 'passed', 'seconds', 'detail'], report.to_rows())
    return EXIT_OK if report.passed else EXIT_VERIFY


def out_directory(config: RunConfig, out: Optional[str]) -> str:
    return out or config.output.directory
