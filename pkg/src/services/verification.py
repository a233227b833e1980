import dataclasses
import logging
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from src.models import BoundaryData, PhysicalConstants, build_layer_stack, conduction_profile
from src.services.darcy_transport import DarcyTransport, StepperConfig
from src.services.diagnostics import FLUX_SAMPLES, TrajectoryPolicy, assert_trajectory, measure, separation
from src.services.mode_pool import ModePool
from src.services.run_config import RunConfig, parse_config
from src.services.spectral_fields import build_spectral_basis, eigenmode_field, embedding_ratios, random_field
from src.services.vertical_spectra import (WeakForm, fem_oracle_extrapolated, find_eigenpairs,
                                           solve_mode_elliptic)

logger = logging.getLogger(__name__)

SEEDS = (1, 2, 3, 4, 5)
ROUND_OFF = 1e-10

# determinism and restart check input when run_verification is given no RunConfig
DEFAULT_RUN = """
stack.interfaces = 0, -0.5, -1
stack.layers = 1 1 1; 1 1 2
boundary.C0 = 0
boundary.C1 = 1
resolution.Nx = 16
resolution.Kmax = 8
stepper.dt = 1e-3
run.T_end = 4e-3
initial.kind = random
initial.band = 3, 4
initial.amplitude = 0.1
run.seed = 7
"""


@dataclass
class CheckOutcome:
    name: str
    passed: bool
    detail: str = ''
    seconds: float = 0.0


@dataclass
class VerificationReport:
    outcomes: List[CheckOutcome] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(outcome.passed for outcome in self.outcomes)

    def to_rows(self) -> List[Tuple[str, int, float, str]]:
        return [(o.name, int(o.passed), o.seconds, o.detail) for o in self.outcomes]


def _stack(interfaces, layers, width=1.0):
    return build_layer_stack(interfaces, layers, width)


def single_layer():
    return _stack([0.0, -1.0], [(1.0, 1.0, 1.0)])


def two_layer(contrast: float = 2.0):
    return _stack([0.0, -0.5, -1.0], [(1.0, 1.0, 1.0), (1.0, 1.0, contrast)])


def three_layer():
    return _stack([0.0, -0.3, -0.7, -1.0], [(1.0, 1.0, 1.0), (2.0, 1.0, 4.0), (0.5, 1.0, 2.0)])


def four_layer():
    return _stack([0.0, -0.25, -0.5, -0.75, -1.0],
                  [(1.0, 1.0, 1.0), (1.0, 1.0, 10.0), (1.0, 1.0, 2.0), (1.0, 1.0, 100.0)])


def manufactured_pressure(stack, coefficients, kappa: float):
    """
    Layered P* with c P*' = sin(pi z / H): continuous value and flux, zero flux at both ends

    Returns:
        (exact callable of z, WeakForm whose solution is P* up to the mean when kappa = 0)
    """
    H = stack.depth
    coefficients = np.asarray(coefficients, dtype=float)
    tops = [0.0]
    for j in range(stack.n_layers - 1):
        z_top = stack.interfaces[j]
        z_bottom = stack.interfaces[j + 1]
        tops.append(tops[-1] - H / (np.pi * coefficients[j]) * (np.cos(np.pi * z_bottom / H) - np.cos(np.pi * z_top / H)))

    def exact(z, layer=None):
        z = np.asarray(z, dtype=float)
        j = stack.layer_index(z) if layer is None else np.asarray(layer)
        z_top = np.asarray(stack.interfaces)[j]
        return np.asarray(tops)[j] - H / (np.pi * coefficients[j]) * (np.cos(np.pi * z / H) - np.cos(np.pi * z_top / H))

    def f0(z, layer):
        return -(np.pi / H) * np.cos(np.pi * z / H) + coefficients[layer] * kappa ** 2 * exact(z, layer)

    return exact, WeakForm(f0=f0)


def _timed(name: str, func: Callable[[], Tuple[bool, str]]) -> CheckOutcome:
    start = time.perf_counter()
    try:
        passed, detail = func()
    except Exception as e:
        logger.error(f"Verification check {name} raised: {str(e)}")
        passed, detail = False, f"exception: {str(e)}"
    outcome = CheckOutcome(name, bool(passed), detail, time.perf_counter() - start)
    level = logging.INFO if outcome.passed else logging.WARNING
    logger.log(level, f"Check {name}: {'PASS' if outcome.passed else 'FAIL'} ({outcome.seconds:.2f}s) {detail}")
    return outcome


def check_analytic_spectrum() -> Tuple[bool, str]:
    stack = single_layer()
    k = np.arange(1, 9)
    worst = 0.0
    for kappa in (0.0, 2.0 * np.pi):
        basis = find_eigenpairs(stack, kappa, 8)
        exact = kappa ** 2 + (k * np.pi) ** 2
        worst = max(worst, float(np.max(np.abs(basis.eigenvalues - exact) / exact)))
    return worst <= 1e-10, f"max relative error {worst:.3e}"


def check_oracle_equivalence(mesh_density: float = 400.0) -> Tuple[bool, str]:
    worst_error = 0.0
    orders = []
    for stack in (two_layer(100.0), four_layer()):
        basis = find_eigenpairs(stack, 0.0, 8)
        extrapolated, coarse, fine = fem_oracle_extrapolated(stack, 0.0, 8, mesh_density)
        error = np.abs(basis.eigenvalues - extrapolated) / basis.eigenvalues
        worst_error = max(worst_error, float(np.max(error)))
        orders.extend(np.log2((coarse - basis.eigenvalues) / (fine - basis.eigenvalues)))
    order = float(np.mean(orders))
    passed = worst_error <= 1e-8 and abs(order - 2.0) <= 0.2
    return passed, f"max relative deviation {worst_error:.3e}, observed order {order:.3f}"


def check_orthonormality() -> Tuple[bool, str]:
    stack = two_layer(10.0)
    basis = find_eigenpairs(stack, 0.0, 16)
    gram = float(np.max(np.abs(basis.gram() - np.eye(16))))
    _, flux_jump = basis.interface_residuals()
    zj = np.array([stack.interfaces[1]])
    slope_above = basis.evaluate(zj, derivative=True, layer=np.array([0]))[0]
    slope_below = basis.evaluate(zj, derivative=True, layer=np.array([1]))[0]
    significant = np.abs(slope_below) > 1e-3 * np.max(np.abs(slope_below))
    ratio = slope_above[significant] / slope_below[significant]
    ratio_error = float(np.max(np.abs(ratio - stack.bD[1] / stack.bD[0])) / (stack.bD[1] / stack.bD[0]))
    passed = gram <= 1e-10 and flux_jump <= 1e-6 and ratio_error <= 1e-6
    return passed, f"Gram deviation {gram:.3e}, flux jump {flux_jump:.3e}, slope ratio error {ratio_error:.3e}"


def _transport(stack, nx, kmax, pool, constants=None, boundary=None, stepper=None):
    bases = build_spectral_basis(stack, nx, kmax, pool=pool)
    return DarcyTransport(bases, constants or PhysicalConstants(), boundary or BoundaryData(),
                          stepper or StepperConfig(), pool=pool)


def check_hydrostatic(pool: ModePool) -> Tuple[bool, str]:
    transport = _transport(three_layer(), 8, 8, pool)
    modal = np.zeros((len(transport.bases.bases), 8), dtype=complex)
    modal[0, :4] = [1.0, -0.5, 0.25, 0.1]
    state = transport.make_state(modal)
    umax = max(float(np.max(np.abs(u))) for u in state.velocity)
    scale = transport.buoyancy * float(np.max(np.abs(state.phi.nodal)))
    weak, pointwise = transport.hydrostatic_residual(state.modal, state.pressure)
    # the pointwise balance holds to the element order, the discrete one to round-off
    passed = umax <= 1e-8 * scale and weak <= 1e-8 and pointwise <= 2e-2 * scale
    return passed, (f"max |u| = {umax:.3e}, pressure residual {weak:.3e}, "
                    f"max |P0' + c phi0| = {pointwise:.3e} (c max|phi| = {scale:.3e})")


def check_exact_decay(pool: ModePool, steps: int = 10000) -> Tuple[bool, str]:
    stack = two_layer(2.0)
    bases = build_spectral_basis(stack, 8, 8, pool=pool)
    lam1 = float(bases.bases[0].eigenvalues[0])
    stepper = StepperConfig(dt=1.0 / (lam1 * steps), scheme='IMEX-CN')
    transport = DarcyTransport(bases, PhysicalConstants(), BoundaryData(), stepper, pool=pool)
    state = transport.initial_state(eigenmode_field(bases, 0, 1))
    E0 = transport.energy(state.modal)
    final, _ = transport.run(state, 1.0 / lam1, cadence=steps)
    expected = E0 * math.exp(-2.0 * lam1 * final.t / transport.porosity)
    error = abs(transport.energy(final.modal) - expected) / expected
    return error <= 1e-6, f"relative energy error {error:.3e} after {final.step} steps"


def energy_residual_orders(transport: DarcyTransport, seeds=SEEDS, levels: int = 4) -> List[float]:
    """Observed orders of the one-step energy residual under dt halving"""
    bases = transport.bases
    lam_band = float(np.max(bases.eigenvalues[:3, :4]))
    dt0 = 0.02 / lam_band
    orders = []
    for seed in seeds:
        initial = transport.initial_state(random_field(bases, seed, band=(2, 4)))
        residuals = []
        for level in range(levels):
            new = transport.step(initial, max_dt=dt0 / 2 ** level)
            residuals.append(abs(transport.energy_residual(initial, new)))
        for coarse, fine in zip(residuals[:-1], residuals[1:]):
            if coarse > 0 and fine > 0:
                orders.append(math.log2(coarse / fine))
    return orders


def check_energy_law(pool: ModePool) -> Tuple[bool, str]:
    transport = _transport(two_layer(2.0), 16, 8, pool, stepper=StepperConfig(dt=1.0))
    orders = energy_residual_orders(transport)
    order = float(np.mean(orders)) if orders else float('nan')
    return abs(order - 2.0) <= 0.3, f"observed residual order {order:.3f}"


def check_monotone_invariants(pool: ModePool, steps: int = 200) -> Tuple[bool, str]:
    stack = two_layer(2.0)
    bases = build_spectral_basis(stack, 16, 8, pool=pool)
    lam1 = float(bases.bases[0].eigenvalues[0])
    T = 5.0 / lam1
    transport = DarcyTransport(bases, PhysicalConstants(), BoundaryData(),
                               StepperConfig(dt=T / steps), pool=pool)
    details = []
    passed = True
    for seed in SEEDS:
        state = transport.initial_state(random_field(bases, seed, band=(3, 4)))
        _, records = transport.run(state, T, cadence=5)
        report = assert_trajectory(records, TrajectoryPolicy(boundary_values=(0.0, 0.0), w_band=math.inf))
        for name in ('max_principle', 'L4'):
            result = report.check(name)
            if not result.passed:
                passed = False
                details.append(f"seed {seed}: {name} failed at t={result.worst_t!r}")
    return passed, '; '.join(details) or f"{len(SEEDS)} runs within bounds"


def observed_order(values, floor: float = ROUND_OFF) -> float:
    """Smallest log2 ratio over successive halvings; pairs that reached round-off are skipped (inf if all)"""
    orders = [math.log2(coarse / fine) for coarse, fine in zip(values[:-1], values[1:])
              if coarse > floor and fine > floor]
    return min(orders) if orders else math.inf


def manufactured_interface_errors(stack, coefficients, kappa: float, order: int = 3,
                                  densities=(8.0, 16.0, 32.0)) -> Dict[str, List[float]]:
    """
    Errors of the Neumann mode solve against the layered manufactured pressure

    Returns:
        Lists over the densities: 'P' (max error over the depth), 'P_iface' (pressure
        error at the interfaces) and 'uz_iface' (one-sided error of c P' at the
        interfaces, i.e. of the vertical velocity)
    """
    exact, weak = manufactured_pressure(stack, coefficients, kappa)
    H = stack.depth
    z = np.linspace(-H, 0.0, 401)
    errors = {'P': [], 'P_iface': [], 'uz_iface': []}
    for density in densities:
        profile = solve_mode_elliptic(stack, kappa, coefficients, weak, 'neumann', order=order, mesh_density=density)
        errors['P'].append(float(np.max(np.abs(profile.value(z) - exact(z)))))
        p_error, uz_error = 0.0, 0.0
        for j in range(1, stack.n_layers):
            zj = np.array([stack.interfaces[j]])
            p_error = max(p_error, float(np.max(np.abs(profile.value(zj) - exact(zj)))))
            flux = math.sin(math.pi * zj[0] / H)
            above = coefficients[j - 1] * float(profile.derivative(zj + 1e-12)[0])
            below = coefficients[j] * float(profile.derivative(zj - 1e-12)[0])
            uz_error = max(uz_error, abs(above - flux), abs(below - flux))
        errors['P_iface'].append(p_error)
        errors['uz_iface'].append(uz_error)
    return errors


def check_manufactured_pressure() -> Tuple[bool, str]:
    errors = manufactured_interface_errors(two_layer(2.0), np.array([1.0, 5.0]), np.pi)
    orders = {name: observed_order(values) for name, values in errors.items()}
    passed = all(order >= 2.0 for order in orders.values())
    detail = ', '.join(f"{name} {[f'{e:.2e}' for e in values]} order {orders[name]:.2f}"
                       for name, values in errors.items())
    return passed, detail


def check_embedding_bounds(pool: ModePool, samples: int = 100) -> Tuple[bool, str]:
    """Embedding ratios stay within a bounded band over seeded random fields"""
    bases = build_spectral_basis(two_layer(2.0), 16, 8, pool=pool)
    ratios: Dict[str, List[float]] = {}
    for seed in range(samples):
        for name, value in embedding_ratios(random_field(bases, seed, band=(5, 8)), bases).items():
            ratios.setdefault(name, []).append(value)
    passed = True
    details = []
    for name, values in ratios.items():
        values = np.asarray(values)
        valid = bool(np.all(np.isfinite(values)) and np.all(values > 0))
        spread = float(values.max() / values.min()) if valid else math.inf
        passed = passed and spread < 1e3
        details.append(f"{name} in [{values.min():.3e}, {values.max():.3e}]")
    return passed, '; '.join(details)


def check_conduction(pool: ModePool) -> Tuple[bool, str]:
    stack = two_layer(2.0)
    boundary = BoundaryData(0.0, 1.0)
    lift = conduction_profile(stack, boundary)
    value_error = abs(float(lift.value(-0.5)) - 2.0 / 3.0)
    flux_error = abs(lift.flux - 4.0 / 3.0)
    transport = _transport(stack, 8, 8, pool, boundary=boundary)
    state = transport.make_state(np.zeros((len(transport.bases.bases), 8), dtype=complex))
    flux = np.asarray(measure(transport, state).flux_z[:FLUX_SAMPLES])
    spread = float(np.max(np.abs(flux - lift.flux))) / abs(lift.flux)
    passed = value_error <= 1e-10 and flux_error <= 1e-10 and spread <= 1e-8
    return passed, f"interface value error {value_error:.2e}, flux error {flux_error:.2e}, F(z) spread {spread:.2e}"


def check_continuous_dependence(pool: ModePool) -> Tuple[bool, str]:
    """Growth of a small perturbation between two nearby trajectories"""
    transport = _transport(two_layer(2.0), 16, 8, pool)
    bases = transport.bases
    base = random_field(bases, 11, band=(2, 4))
    nudge = random_field(bases, 12, band=(2, 4), amplitude=1e-6)
    a = transport.initial_state(base)
    b = transport.initial_state(type(base)(base.modal + nudge.modal, None))
    d0 = separation(transport, a, b)
    T = 20 * transport.stepper.dt
    a, _ = transport.run(a, T, cadence=1000)
    b, _ = transport.run(b, T, cadence=1000)
    d1 = separation(transport, a, b)
    return math.isfinite(d1) and d1 <= d0 * 10.0, f"separation {d0:.3e} -> {d1:.3e}"


def check_determinism(config) -> Tuple[bool, str]:
    from src.services.cli import run_simulation

    resolution = dataclasses.replace(config.resolution, nx=min(config.resolution.nx, 16),
                                     kmax=min(config.resolution.kmax, 8), nq=None)
    steps = 4
    short = dataclasses.replace(
        config, resolution=resolution, T_end=steps * config.stepper.dt,
        output=dataclasses.replace(config.output, cadence=1, checkpoint_every=steps // 2, vtk_every=0,
                                   formats=('csv', 'checkpoint')),
        initial=dataclasses.replace(config.initial, m=min(config.initial.m, 2), k=min(config.initial.k, 8),
                                    band=(min(config.initial.band[0], 2), config.initial.band[1])),
    )
    with tempfile.TemporaryDirectory() as root:
        dirs = [os.path.join(root, name) for name in ('a', 'b', 'c')]
        run_simulation(short, dirs[0])
        run_simulation(short, dirs[1])
        same = all(_read(os.path.join(dirs[0], name)) == _read(os.path.join(dirs[1], name))
                   for name in sorted(os.listdir(dirs[0])) if not name.endswith('.cfg'))
        middle = os.path.join(dirs[0], f"checkpoint_{steps // 2:08d}.chk")
        run_simulation(short, dirs[2], resume=middle)
        final = f"checkpoint_{steps:08d}.chk"
        resumed = _read(os.path.join(dirs[0], final)) == _read(os.path.join(dirs[2], final))
    return same and resumed, f"repeat identical={same}, resume identical={resumed}"


def _read(path: str) -> bytes:
    with open(path, 'rb') as handle:
        return handle.read()


def run_verification(config: Optional[RunConfig] = None, pool: Optional[ModePool] = None,
                     quick: bool = False) -> VerificationReport:
    """
    Run the acceptance suite

    Args:
        config: RunConfig used for the determinism check (DEFAULT_RUN when None)
        pool: Thread pool shared by the checks
        quick: Use fewer steps and coarser oracles

    Returns:
        VerificationReport
    """
    own_pool = pool is None
    pool = pool or ModePool()
    report = VerificationReport()
    try:
        checks: Dict[str, Callable[[], Tuple[bool, str]]] = {
            'analytic_spectrum': check_analytic_spectrum,
            'oracle_equivalence': lambda: check_oracle_equivalence(200.0 if quick else 400.0),
            'orthonormality_transmission': check_orthonormality,
            'hydrostatic_null': lambda: check_hydrostatic(pool),
            'exact_decay': lambda: check_exact_decay(pool, 1000 if quick else 10000),
            'energy_law_order': lambda: check_energy_law(pool),
            'max_principle_and_L4': lambda: check_monotone_invariants(pool, 100 if quick else 200),
            'manufactured_pressure': check_manufactured_pressure,
            'embedding_bounds': lambda: check_embedding_bounds(pool, 20 if quick else 100),
            'conduction_steady_state': lambda: check_conduction(pool),
            'continuous_dependence': lambda: check_continuous_dependence(pool),
        }
        run_config = config if config is not None else parse_config(DEFAULT_RUN)
        checks['determinism'] = lambda: check_determinism(run_config)
        for name, func in checks.items():
            report.outcomes.append(_timed(name, func))
    finally:
        if own_pool:
            pool.shutdown()
    logger.info(f"Verification {'passed' if report.passed else 'FAILED'}: "
                f"{sum(o.passed for o in report.outcomes)}/{len(report.outcomes)} checks")
    return report
