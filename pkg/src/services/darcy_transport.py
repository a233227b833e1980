import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from src.models import (BoundaryData, ConductionLift, ConfigurationError, PhysicalConstants,
                        SimulationError, conduction_profile)
from src.services.mode_pool import ModePool
from src.services.spectral_fields import (SpectralBasis, SpectralField, gradient_nodal, to_modal,
                                          to_nodal)
from src.services.vertical_spectra import ModeEllipticSolver

logger = logging.getLogger(__name__)

SCHEMES = ('IMEX-Euler', 'IMEX-CN')


@dataclass(frozen=True)
class StepperConfig:
    dt: float = 1e-3
    scheme: str = 'IMEX-CN'
    cfl_target: float = 0.5
    adaptive: bool = False

    def validate(self) -> List[str]:
        errors = []
        if not (math.isfinite(self.dt) and self.dt > 0):
            errors.append(f"dt must be > 0, got {self.dt!r}")
        if self.scheme not in SCHEMES:
            errors.append(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if not (0 < self.cfl_target <= 1):
            errors.append(f"cfl must lie in (0, 1], got {self.cfl_target!r}")
        return errors


@dataclass
class FlowState:
    """Homogenized concentration plus everything derived from it at time t

    phi holds phi~ = phi - lift (zero Dirichlet data) in both representations.
    pressure holds the finite-element dofs of each wavenumber's profile.
    """
    phi: SpectralField
    lift: ConductionLift
    pressure: List[np.ndarray]
    pressure_nodal: np.ndarray
    velocity: Tuple[np.ndarray, np.ndarray]
    velocity_rows: Tuple[np.ndarray, np.ndarray]
    source: np.ndarray
    t: float = 0.0
    step: int = 0
    cfl: float = 0.0
    dt: float = 0.0
    flags: List[str] = field(default_factory=list)

    @property
    def modal(self) -> np.ndarray:
        return self.phi.modal


class DarcyTransport:
    """Pressure solve, Darcy velocity, skew advection and IMEX stepping on one spectral basis"""

    def __init__(self, bases: SpectralBasis, constants: PhysicalConstants, boundary: BoundaryData,
                 stepper: StepperConfig, order: int = 2, mesh_density: float = 32.0,
                 pool: Optional[ModePool] = None):
        errors = constants.validate() + boundary.validate() + stepper.validate()
        if errors:
            for error in errors:
                logger.error(f"DarcyTransport: {error}")
            raise ConfigurationError(errors)

        self.bases = bases
        self.grid = bases.grid
        self.stack = bases.stack
        self.constants = constants
        self.boundary = boundary
        self.stepper = stepper
        self.pool = pool or ModePool()
        self.buoyancy = constants.buoyancy

        self.lift = conduction_profile(self.stack, boundary)
        self.lift_nodes = self.lift.value(self.grid.z, self.grid.layer)
        self.lift_slope_nodes = self.lift.derivative(self.grid.z, self.grid.layer)
        self.mobility = np.asarray(self.stack.K) / constants.mu
        self.mobility_nodes = self.mobility[self.grid.layer]
        self.kappas = bases.kappas
        self.eigenvalues = bases.eigenvalues
        self.weights_m = bases.mode_weights
        self.n_modes = len(bases.bases)

        def build(m: int) -> ModeEllipticSolver:
            return ModeEllipticSolver(self.stack, self.kappas[m], self.mobility, 'neumann', order, mesh_density)

        self._solvers = self.pool.map_ordered(build, list(range(self.n_modes)), label='pressure solver')
        self._point_traces = [basis.evaluate(s.points, layer=s.point_layer)
                              for basis, s in zip(bases.bases, self._solvers)]
        self._lift_points = self.lift.value(self._solvers[0].points, self._solvers[0].point_layer)
        self._eval = [s.evaluation_matrix(self.grid.z) for s in self._solvers]
        self._eval_dz = [s.evaluation_matrix(self.grid.z, derivative=True) for s in self._solvers]

        self.porosity = float(self.stack.b[0])
        self.layered_porosity = not self.stack.constant_porosity
        self._mass = None
        if self.layered_porosity:
            logger.warning("Porosity varies between layers; stepping with Galerkin mass matrices "
                           "and only the energy law and maximum principle are monitored")
            wb = self.grid.weights * bases.b_nodes
            self._mass = np.einsum('q,mqi,mqk->mik', wb, bases.values, bases.values)

        logger.info(f"DarcyTransport initialized: scheme={stepper.scheme}, dt={stepper.dt!r}, "
                    f"modes={self.n_modes}, order={order}, lift flux={self.lift.flux!r}")

    # --- projections -------------------------------------------------------

    def _project(self, nodal: np.ndarray, slopes: bool = False) -> np.ndarray:
        """int g e^{-i kappa x} v_k (or v_k') over the strip, per unit width"""
        rows = np.fft.rfft(nodal, axis=0) / self.grid.nx
        traces = self.bases.slopes if slopes else self.bases.values
        return np.einsum('mq,q,mqk->mk', rows, self.grid.weights, traces)

    def _dealias(self, modal: np.ndarray) -> np.ndarray:
        modal = modal.copy()
        modal[self.bases.dealias_cut + 1:] = 0.0
        return modal

    def _rows(self, modal: np.ndarray, slopes: bool = False) -> np.ndarray:
        traces = self.bases.slopes if slopes else self.bases.values
        return np.einsum('mk,mqk->mq', modal, traces)

    def _synthesize(self, rows: np.ndarray) -> np.ndarray:
        return np.fft.irfft(rows * self.grid.nx, n=self.grid.nx, axis=0)

    # --- pressure and velocity ---------------------------------------------

    def solve_pressure(self, modal: np.ndarray) -> List[np.ndarray]:
        """
        Pressure profile dofs for every wavenumber

        Solves int (K/mu)(P' q' + kappa^2 P q) = -int c (K/mu) phi_m q' with Neumann
        ends; phi is the total concentration, so mode 0 includes the lift.
        """
        def solve_mode(m: int) -> np.ndarray:
            solver = self._solvers[m]
            return solver.solve(solver.load_vector(f1=self._pressure_load(modal, m)))

        return self.pool.map_ordered(solve_mode, list(range(self.n_modes)), label='pressure mode')

    def _pressure_load(self, modal: np.ndarray, m: int) -> np.ndarray:
        """f1 = -c (K/mu) phi_m at the solver's quadrature points"""
        solver = self._solvers[m]
        phi_points = self._point_traces[m] @ modal[m]
        if m == 0:
            phi_points = phi_points + self._lift_points
        return -self.buoyancy * self.mobility[solver.point_layer] * phi_points

    def hydrostatic_residual(self, modal: np.ndarray, pressure: Sequence[np.ndarray]) -> Tuple[float, float]:
        """
        How well the wavenumber-0 pressure balances buoyancy, P0' + c phi0 = 0

        Returns:
            (weak, pointwise): the discrete residual of the pressure equation relative
            to the size of its load, and max |P0' + c phi0| over the grid nodes
        """
        solver = self._solvers[0]
        f1 = self._pressure_load(modal, 0)
        residual = solver.weak_residual(pressure[0], f1=f1)
        scale = float(np.max(np.abs(solver.load_vector(f1=np.abs(f1)))))
        weak = float(np.max(np.abs(residual))) / scale if scale > 0 else float(np.max(np.abs(residual)))
        phi0 = (self.bases.values[0] @ modal[0]).real + self.lift_nodes
        dP0 = (self._eval_dz[0] @ pressure[0]).real
        return weak, float(np.max(np.abs(dP0 + self.buoyancy * phi0)))

    def pressure_profile(self, pressure: Sequence[np.ndarray], m: int, z, derivative: bool = False) -> np.ndarray:
        return self._solvers[m].evaluation_matrix(z, derivative) @ pressure[m]

    def darcy_velocity(self, modal: np.ndarray, pressure: Sequence[np.ndarray]):
        """
        Nodal Darcy velocity u = -(K/mu)(grad P + c phi e_z)

        Returns:
            (u_x, u_z, ux_rows, uz_rows, pressure_nodal); rows are per-wavenumber
            profiles at the grid nodes. Wavenumber 0 carries no flow.
        """
        phi_rows = self._rows(modal)
        phi_rows[0] = phi_rows[0] + self.lift_nodes
        P_rows = np.stack([E @ p for E, p in zip(self._eval, pressure)])
        dP_rows = np.stack([E @ p for E, p in zip(self._eval_dz, pressure)])

        ux_rows = -self.mobility_nodes[None, :] * (1j * self.kappas[:, None] * P_rows)
        uz_rows = -self.mobility_nodes[None, :] * (dP_rows + self.buoyancy * phi_rows)
        # impermeable ends force a horizontally uniform flow to vanish; hydrostatic_residual
        # measures how closely the wavenumber-0 pressure meets that
        ux_rows[0] = 0.0
        uz_rows[0] = 0.0
        return (self._synthesize(ux_rows), self._synthesize(uz_rows), ux_rows, uz_rows,
                self._synthesize(P_rows))

    def vertical_velocity_profile(self, state: FlowState, m: int, z) -> np.ndarray:
        """u_z Fourier coefficient of wavenumber m at arbitrary heights"""
        z = np.atleast_1d(np.asarray(z, dtype=float))
        if m == 0:
            return np.zeros(len(z), dtype=complex)
        layer = self.stack.layer_index(z)
        phi = self.bases.bases[m].evaluate(z, layer=layer) @ state.modal[m]
        dP = self.pressure_profile(state.pressure, m, z, derivative=True)
        return -self.mobility[layer] * (dP + self.buoyancy * phi)

    # --- nonlinear terms ---------------------------------------------------

    def advection_term(self, phi: SpectralField, velocity: Tuple[np.ndarray, np.ndarray]) -> np.ndarray:
        """
        Projected skew advection 1/2 (u . grad phi + div(u phi))

        The divergence half is integrated by parts against the test functions,
        which vanish at z = 0 and z = -H, so the result is exactly orthogonal
        to phi up to round-off.
        """
        ux, uz = velocity
        phi = to_nodal(phi, self.bases)
        fx, fz = gradient_nodal(phi, self.bases)
        f = phi.nodal
        convective = self._project(ux * fx + uz * fz)
        divergence = 1j * self.kappas[:, None] * self._project(ux * f) - self._project(uz * f, slopes=True)
        return self._dealias(0.5 * (convective + divergence))

    def lift_source(self, uz: np.ndarray) -> np.ndarray:
        """Projected u_z d(lift)/dz"""
        if self.boundary.homogeneous:
            return np.zeros((self.n_modes, self.bases.kmax), dtype=complex)
        return self._dealias(self._project(uz * self.lift_slope_nodes[None, :]))

    # --- state construction ------------------------------------------------

    def make_state(self, modal: np.ndarray, t: float = 0.0, step: int = 0, dt: float = 0.0,
                   flags: Optional[List[str]] = None) -> FlowState:
        modal = np.asarray(modal, dtype=complex)
        phi = to_nodal(SpectralField(modal, None), self.bases)
        pressure = self.solve_pressure(modal)
        ux, uz, ux_rows, uz_rows, P_nodal = self.darcy_velocity(modal, pressure)
        state = FlowState(phi, self.lift, pressure, P_nodal, (ux, uz), (ux_rows, uz_rows),
                          self.lift_source(uz), t, step, 0.0, dt, list(flags or []))
        state.cfl = self.cfl_number(state, self.stepper.dt if dt == 0.0 else dt)
        return state

    def initial_state(self, phi_total: SpectralField, t: float = 0.0, step: int = 0) -> FlowState:
        """Project total concentration onto the basis after removing the lift"""
        if phi_total.nodal is not None and phi_total.modal is None:
            homogeneous = SpectralField(None, phi_total.nodal - self.lift_nodes[None, :])
            modal = to_modal(homogeneous, self.bases).modal
        else:
            modal = phi_total.modal
        return self.make_state(self._dealias(modal), t, step)

    def cfl_number(self, state: FlowState, dt: float) -> float:
        ux, uz = state.velocity
        return float(dt * max(np.max(np.abs(ux)) / self.grid.dx, np.max(np.abs(uz)) / self.grid.dz_min))

    # --- energy bookkeeping ------------------------------------------------

    def energy(self, modal: np.ndarray) -> float:
        """int b phi~^2"""
        L = self.grid.width
        if self._mass is None:
            return self.porosity * L * float(np.sum(self.weights_m[:, None] * np.abs(modal) ** 2))
        quad = np.einsum('mi,mik,mk->m', np.conj(modal), self._mass, modal).real
        return L * float(np.sum(self.weights_m * quad))

    def dissipation(self, modal: np.ndarray) -> float:
        """int bD |grad phi~|^2 = sum lambda |c|^2"""
        return self.grid.width * float(np.sum(self.weights_m[:, None] * self.eigenvalues * np.abs(modal) ** 2))

    def modal_inner(self, a: np.ndarray, c: np.ndarray) -> float:
        return self.bases.modal_inner(a, c)

    def energy_residual(self, previous: FlowState, current: FlowState) -> float:
        """(E' - E)/dt + 2 D(c_mid) + <S_n + S_n+1, c_mid>; zero for the exact dynamics"""
        dt = current.t - previous.t
        if dt <= 0:
            return 0.0
        mid = 0.5 * (previous.modal + current.modal)
        return ((self.energy(current.modal) - self.energy(previous.modal)) / dt
                + 2.0 * self.dissipation(mid)
                + self.modal_inner(previous.source + current.source, mid))

    # --- time stepping -----------------------------------------------------

    def _tendency(self, modal: np.ndarray) -> np.ndarray:
        phi = to_nodal(SpectralField(modal, None), self.bases)
        pressure = self.solve_pressure(modal)
        ux, uz, _, _, _ = self.darcy_velocity(modal, pressure)
        return self.advection_term(phi, (ux, uz)) + self.lift_source(uz)

    def _implicit(self, rhs: np.ndarray, theta: float, dt: float) -> np.ndarray:
        """Solve (M + theta dt Lambda) y = rhs per wavenumber (layered porosity)"""
        out = np.empty_like(rhs)
        for m in range(self.n_modes):
            system = self._mass[m] + theta * dt * np.diag(self.eigenvalues[m])
            out[m] = scipy.linalg.solve(system, rhs[m], assume_a='pos')
        return out

    def _mass_apply(self, modal: np.ndarray) -> np.ndarray:
        if self._mass is None:
            return self.porosity * modal
        return np.einsum('mik,mk->mi', self._mass, modal)

    def _advance(self, state: FlowState, dt: float) -> np.ndarray:
        c = state.modal
        lam = self.eigenvalues
        G0 = self.advection_term(state.phi, state.velocity) + state.source

        if self._mass is None:
            b = self.porosity
            z = dt * lam / b
            if self.stepper.scheme == 'IMEX-Euler':
                return (c - (dt / b) * G0) / (1.0 + z)
            stage = ((1.0 - 0.5 * z) * c - (dt / b) * G0) / (1.0 + 0.5 * z)
            G1 = self._tendency(stage)
            return c - 0.5 * z * (c + stage) - (0.5 * dt / b) * (G0 + G1)

        if self.stepper.scheme == 'IMEX-Euler':
            return self._implicit(self._mass_apply(c) - dt * G0, 1.0, dt)
        stage = self._implicit(self._mass_apply(c) - 0.5 * dt * lam * c - dt * G0, 0.5, dt)
        G1 = self._tendency(stage)
        increment = 0.5 * dt * (lam * (c + stage) + G0 + G1)
        return c - self._implicit(increment, 0.0, dt)

    def step(self, state: FlowState, max_dt: Optional[float] = None) -> FlowState:
        """
        Advance one step

        Args:
            state: Current state
            max_dt: Upper bound on the step (used to land exactly on T_end)

        Returns:
            New state with pressure, velocity and diagnostics inputs refreshed
        """
        dt = self.stepper.dt
        flags = []
        if self.stepper.adaptive:
            cfl_now = self.cfl_number(state, dt)
            if cfl_now > self.stepper.cfl_target:
                dt = dt * self.stepper.cfl_target / cfl_now
                flags.append('dt_reduced')
        if max_dt is not None and max_dt < dt:
            dt = max_dt

        modal = self._dealias(self._advance(state, dt))
        if not np.all(np.isfinite(modal)):
            logger.error(f"Non-finite coefficients at step {state.step + 1}, t={state.t + dt!r}")
            raise SimulationError(f"non-finite coefficients at step {state.step + 1}", state=state)

        new = self.make_state(modal, state.t + dt, state.step + 1, dt, flags)
        if not (np.all(np.isfinite(new.phi.nodal)) and np.all(np.isfinite(new.velocity[0]))
                and np.all(np.isfinite(new.velocity[1]))):
            logger.error(f"Non-finite nodal values at step {new.step}, t={new.t!r}")
            raise SimulationError(f"non-finite nodal values at step {new.step}", state=state)
        if new.cfl > self.stepper.cfl_target:
            new.flags.append('cfl')
            logger.warning(f"CFL {new.cfl!r} exceeds target {self.stepper.cfl_target!r} at step {new.step}")
        return new

    def run(self, state: FlowState, T_end: float, cadence: int = 10,
            on_record: Optional[Callable] = None, on_step: Optional[Callable] = None, record_initial: bool = True):
        """
        Step until T_end, measuring every cadence steps and at the end

        Args:
            state: Initial (or resumed) state
            T_end: Final time, >= state.t
            cadence: Steps between diagnostics records
            on_record: Called with each DiagnosticsRecord
            on_step: Called with each new state
            record_initial: Measure the starting state (off when resuming an existing series)

        Returns:
            (final state, list of DiagnosticsRecord)
        """
        from src.services.diagnostics import measure

        if not (math.isfinite(T_end) and T_end >= state.t):
            raise ConfigurationError(f"T_end must be >= {state.t!r}, got {T_end!r}")
        if cadence < 1:
            raise ConfigurationError(f"cadence must be >= 1, got {cadence}")

        logger.info(f"Run started: t={state.t!r} -> T_end={T_end!r}, dt={self.stepper.dt!r}")
        records = []
        if record_initial:
            records.append(measure(self, state))
            if on_record:
                on_record(records[-1])

        tolerance = 1e-12 * max(1.0, abs(T_end))
        while T_end - state.t > tolerance:
            previous = state
            state = self.step(previous, T_end - previous.t)
            if on_step:
                on_step(state)
            final = T_end - state.t <= tolerance
            if state.step % cadence == 0 or final:
                records.append(measure(self, state, previous))
                if on_record:
                    on_record(records[-1])

        logger.info(f"Run finished: t={state.t!r}, steps={state.step}")
        return state, records
