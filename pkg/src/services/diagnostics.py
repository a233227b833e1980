import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.services.darcy_transport import DarcyTransport, FlowState
from src.services.spectral_fields import gradient_nodal, norms
from src.services.vertical_spectra import lagrange_basis

logger = logging.getLogger(__name__)

FLUX_SAMPLES = 32
BASE_COLUMNS = ('t', 'E', 'dissipation', 'energy_residual', 'L2', 'V', 'L4', 'Linf', 'min_phi', 'max_phi',
                'Wnorm', 'Lnorm', 'W_over_L', 'div_defect', 'cfl')
INTERFACE_FIELDS = ('phi', 'flux', 'uz', 'P')


@dataclass
class DiagnosticsRecord:
    t: float
    step: int
    E: float
    dissipation: float
    energy_residual: float
    L2: float
    V: float
    L4: float
    Linf: float
    min_phi: float
    max_phi: float
    Wnorm: float
    Lnorm: float
    W_over_L: float
    div_defect: float
    cfl: float
    interfaces: List[Dict[str, float]] = field(default_factory=list)
    flux_z: List[float] = field(default_factory=list)
    flux_heights: List[float] = field(default_factory=list)
    tangential: float = 0.0
    transport_number: float = 0.0
    flags: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return asdict(self)


def flux_heights(transport: DarcyTransport) -> np.ndarray:
    """32 evenly spaced heights from 0 to -H followed by the interior interfaces"""
    stack = transport.stack
    return np.concatenate([np.linspace(0.0, -stack.depth, FLUX_SAMPLES), np.asarray(stack.interfaces[1:-1])])


def record_columns(n_interfaces: int) -> List[str]:
    columns = list(BASE_COLUMNS)
    for j in range(1, n_interfaces + 1):
        columns.extend(f"iface_{j}_{name}" for name in INTERFACE_FIELDS)
    columns.extend(f"flux_z_{s}" for s in range(FLUX_SAMPLES + n_interfaces))
    return columns


def record_values(record: DiagnosticsRecord) -> List[float]:
    values = [getattr(record, name) for name in BASE_COLUMNS]
    for jumps in record.interfaces:
        values.extend(jumps[name] for name in INTERFACE_FIELDS)
    values.extend(record.flux_z)
    return values


def _extrapolation_weights(nodes: np.ndarray, target: float) -> np.ndarray:
    """Weights evaluating the interpolant through the nodes at target"""
    return lagrange_basis(nodes, [target])[0][0]


def interface_jumps(transport: DarcyTransport, fields: Dict[str, np.ndarray]) -> List[Dict[str, float]]:
    """
    Largest jump of each nodal field at each interior interface

    Each side is extrapolated to the interface with the cubic through its
    4 nearest Gauss nodes; nodes never lie on an interface.
    """
    grid = transport.grid
    jumps = []
    for j in range(1, transport.stack.n_layers):
        zj = transport.stack.interfaces[j]
        above = np.arange(grid.nz)[grid.layer_slice(j - 1)][:4]
        below = np.arange(grid.nz)[grid.layer_slice(j)][-4:]
        w_above = _extrapolation_weights(grid.z[above], zj)
        w_below = _extrapolation_weights(grid.z[below], zj)
        entry = {}
        for name, values in fields.items():
            entry[name] = float(np.max(np.abs(values[:, above] @ w_above - values[:, below] @ w_below)))
        jumps.append(entry)
    return jumps


def flux_profile(transport: DarcyTransport, state: FlowState, heights: np.ndarray) -> np.ndarray:
    """Horizontal mean of u_z phi - bD d(phi)/dz at each height"""
    stack = transport.stack
    bases = transport.bases
    layer = stack.layer_index(heights)
    c = state.modal
    diffusive = bases.bases[0].evaluate(heights, derivative=True, layer=layer) @ c[0].real
    diffusive = diffusive + transport.lift.derivative(heights, layer)
    flux = -stack.bD[layer] * diffusive
    weights = bases.mode_weights
    for m in range(1, len(bases.bases)):
        if not np.any(c[m]):
            continue
        phi_m = bases.bases[m].evaluate(heights, layer=layer) @ c[m]
        uz_m = transport.vertical_velocity_profile(state, m, heights)
        flux = flux + weights[m] * np.real(uz_m * np.conj(phi_m))
    return flux


def divergence_defect(transport: DarcyTransport, state: FlowState) -> float:
    """max over test functions e^{i kappa x} v_k of |int u . grad(test)|"""
    grid = transport.grid
    bases = transport.bases
    ux, uz = state.velocity
    ux_rows = np.fft.rfft(ux, axis=0) / grid.nx
    uz_rows = np.fft.rfft(uz, axis=0) / grid.nx
    kappa = bases.kappas[:, None, None]
    integrand = (-1j * kappa * ux_rows[:, :, None] * bases.values + uz_rows[:, :, None] * bases.slopes)
    defect = grid.width * np.einsum('q,mqk->mk', grid.weights, integrand)
    return float(np.max(np.abs(defect)))


def measure(transport: DarcyTransport, state: FlowState, previous: Optional[FlowState] = None) -> DiagnosticsRecord:
    """
    Diagnostics of one state

    Args:
        transport: The stepping service that produced the state
        state: State to measure
        previous: State one step earlier, for the energy-law residual

    Returns:
        DiagnosticsRecord
    """
    bases = transport.bases
    grid = transport.grid
    c = state.modal
    field_norms = norms(state.phi, bases)

    lam = transport.eigenvalues
    Lnorm = math.sqrt(grid.width * float(np.sum(bases.mode_weights[:, None] * lam ** 2 * np.abs(c) ** 2)))
    Wnorm = field_norms['W']

    total = state.phi.nodal + transport.lift_nodes[None, :]
    _, fz = gradient_nodal(state.phi, bases)
    flux_nodal = bases.bD_nodes[None, :] * (fz + transport.lift_slope_nodes[None, :])
    jumps = interface_jumps(transport, {
        'phi': total,
        'flux': flux_nodal,
        'uz': state.velocity[1],
        'P': state.pressure_nodal,
    })

    heights = flux_heights(transport)
    flux = flux_profile(transport, state, heights)
    q = transport.lift.flux
    transport_number = float(np.mean(flux[:FLUX_SAMPLES]) / q) if q != 0 else 0.0

    return DiagnosticsRecord(
        t=float(state.t),
        step=int(state.step),
        E=transport.energy(c),
        dissipation=transport.dissipation(c),
        energy_residual=transport.energy_residual(previous, state) if previous is not None else 0.0,
        L2=field_norms['L2'],
        V=field_norms['V'],
        L4=field_norms['L4'],
        Linf=field_norms['Linf'],
        min_phi=float(np.min(total)),
        max_phi=float(np.max(total)),
        Wnorm=Wnorm,
        Lnorm=Lnorm,
        W_over_L=Wnorm / Lnorm if Lnorm > 0 else 0.0,
        div_defect=divergence_defect(transport, state),
        cfl=float(state.cfl),
        interfaces=jumps,
        flux_z=[float(v) for v in flux],
        flux_heights=[float(v) for v in heights],
        tangential=field_norms['dx2'],
        transport_number=transport_number,
        flags=list(state.flags),
    )


def separation(transport: DarcyTransport, state_a: FlowState, state_b: FlowState) -> float:
    """int b |phi_a - phi_b|^2 between two trajectories"""
    return transport.energy(state_a.modal - state_b.modal)


@dataclass
class TrajectoryPolicy:
    """Tolerances for assert_trajectory

    bounds defaults to the initial extrema widened by the boundary values.
    reduced restricts the checks to the energy law and maximum principle.
    """
    energy_rtol: float = 1e-10
    residual_factor: float = 10.0
    l4_rate: float = 1e-6
    max_principle_eps: float = 1e-4
    boundary_values: Tuple[float, ...] = ()
    bounds: Optional[Tuple[float, float]] = None
    check_energy: bool = True
    w_band: float = 1e3
    transient_fraction: float = 0.2
    decay_rate: Optional[float] = None
    decay_rtol: float = 1e-4
    reduced: bool = False


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst_t: Optional[float] = None
    worst_value: float = 0.0
    detail: str = ''


@dataclass
class TrajectoryReport:
    checks: List[CheckResult]

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def failures(self) -> List[CheckResult]:
        return [check for check in self.checks if not check.passed]

    def check(self, name: str) -> CheckResult:
        for result in self.checks:
            if result.name == name:
                return result
        raise KeyError(name)

    def to_dict(self) -> Dict:
        return {'passed': self.passed, 'checks': [asdict(check) for check in self.checks]}


def _check_finite(records: Sequence[DiagnosticsRecord]) -> CheckResult:
    for record in records:
        values = record_values(record) + [record.tangential, record.transport_number]
        if not all(math.isfinite(v) for v in values):
            return CheckResult('finite', False, record.t, float('nan'), 'non-finite diagnostics entry')
        if min(record.E, record.dissipation, record.L4, record.Linf) < 0:
            return CheckResult('finite', False, record.t, min(record.E, record.L4), 'negative norm')
    return CheckResult('finite', True)


def _check_energy(records: Sequence[DiagnosticsRecord], policy: TrajectoryPolicy) -> CheckResult:
    E0 = max(records[0].E, 1e-300)
    worst, worst_t = 0.0, None
    for before, after in zip(records[:-1], records[1:]):
        dt = after.t - before.t
        allowed = policy.energy_rtol * E0 + policy.residual_factor * abs(after.energy_residual) * dt
        excess = (after.E - before.E) - allowed
        if excess > worst:
            worst, worst_t = excess, after.t
    return CheckResult('energy', worst_t is None, worst_t, worst,
                       'energy non-increasing' if worst_t is None else f"energy grew by {worst!r} beyond allowance")


def _check_l4(records: Sequence[DiagnosticsRecord], policy: TrajectoryPolicy) -> CheckResult:
    L0 = records[0].L4
    worst, worst_t = 0.0, None
    for before, after in zip(records[:-1], records[1:]):
        allowed = policy.l4_rate * L0 * (after.t - before.t) + 1e-14 * max(L0, 1e-300)
        excess = (after.L4 - before.L4) - allowed
        if excess > worst:
            worst, worst_t = excess, after.t
    return CheckResult('L4', worst_t is None, worst_t, worst,
                       'L4 non-increasing' if worst_t is None else f"L4 increased by {worst!r}")


def _check_max_principle(records: Sequence[DiagnosticsRecord], policy: TrajectoryPolicy) -> CheckResult:
    if policy.bounds is not None:
        lo, hi = policy.bounds
    else:
        lo = min((records[0].min_phi,) + tuple(policy.boundary_values))
        hi = max((records[0].max_phi,) + tuple(policy.boundary_values))
    eps = policy.max_principle_eps * max(hi - lo, 1e-300)
    worst, worst_t = 0.0, None
    for record in records:
        overshoot = max(lo - eps - record.min_phi, record.max_phi - hi - eps)
        if overshoot > worst:
            worst, worst_t = overshoot, record.t
    return CheckResult('max_principle', worst_t is None, worst_t, worst,
                       f"bounds [{lo!r}, {hi!r}] +/- {eps!r}")


def _check_w_band(records: Sequence[DiagnosticsRecord], policy: TrajectoryPolicy) -> CheckResult:
    start = int(len(records) * policy.transient_fraction)
    ratios = [r.W_over_L for r in records[start:] if r.W_over_L > 0]
    if not ratios:
        return CheckResult('W_over_L', True, detail='no nonzero ratios')
    spread = max(ratios) / min(ratios)
    worst_t = None
    if spread > policy.w_band:
        worst_t = records[start + int(np.argmax([r.W_over_L for r in records[start:]]))].t
    return CheckResult('W_over_L', spread <= policy.w_band, worst_t, spread,
                       f"ratio range [{min(ratios)!r}, {max(ratios)!r}]")


def _check_decay(records: Sequence[DiagnosticsRecord], policy: TrajectoryPolicy) -> CheckResult:
    t = np.array([r.t for r in records])
    E = np.array([r.E for r in records])
    if np.any(E <= 0):
        return CheckResult('decay_rate', False, float(t[np.argmin(E)]), 0.0, 'energy reached zero')
    slope = np.polyfit(t, np.log(E), 1)[0]
    rate = -float(slope)
    error = abs(rate - policy.decay_rate) / abs(policy.decay_rate)
    return CheckResult('decay_rate', error <= policy.decay_rtol, None if error <= policy.decay_rtol else float(t[-1]),
                       rate, f"fitted {rate!r} vs expected {policy.decay_rate!r}")


def assert_trajectory(records: Sequence[DiagnosticsRecord], policy: Optional[TrajectoryPolicy] = None) -> TrajectoryReport:
    """
    Check a diagnostics series against the trajectory invariants

    Failures are report entries, never exceptions.
    """
    policy = policy or TrajectoryPolicy()
    if len(records) < 2:
        return TrajectoryReport([CheckResult('records', False, detail='at least two records are required')])

    checks = [_check_finite(records)]
    if policy.check_energy:
        checks.append(_check_energy(records, policy))
    checks.append(_check_max_principle(records, policy))
    if not policy.reduced:
        checks.append(_check_l4(records, policy))
        checks.append(_check_w_band(records, policy))
        if policy.decay_rate is not None:
            checks.append(_check_decay(records, policy))

    report = TrajectoryReport(checks)
    for check in report.failures():
        logger.warning(f"Trajectory check {check.name} failed at t={check.worst_t!r}: {check.detail}")
    return report
