import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss

from src.models import ConfigurationError, FieldError, LayerStack
from src.services.basis_cache import BasisCache, basis_cache
from src.services.mode_pool import ModePool
from src.services.vertical_spectra import VerticalBasis, find_eigenpairs

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Grid:
    """Uniform x nodes on [0, L) times per-layer Gauss-Legendre z nodes

    z nodes are ascending (bottom layer first); layer[q] is the 0-based
    layer (top layer = 0) that node q lies in.
    """
    stack: LayerStack
    nx: int
    nq: int
    x: np.ndarray
    z: np.ndarray
    weights: np.ndarray
    layer: np.ndarray

    @property
    def width(self) -> float:
        return self.stack.width

    @property
    def nz(self) -> int:
        return len(self.z)

    @property
    def modes(self) -> int:
        """M = Nx / 2"""
        return self.nx // 2

    @property
    def dx(self) -> float:
        return self.width / self.nx

    @property
    def dz_min(self) -> float:
        return float(np.min(np.diff(self.z)))

    @property
    def wavenumbers(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.modes + 1) / self.width

    def integrate(self, values: np.ndarray) -> float:
        """int_0^L int_-H^0 of nodal values, shape (nx, nz)"""
        return float(self.dx * np.sum(values @ self.weights))

    def layer_slice(self, j: int) -> slice:
        """Node range of layer j inside the ascending z array"""
        start = (self.stack.n_layers - 1 - j) * self.nq
        return slice(start, start + self.nq)


def build_grid(stack: LayerStack, nx: int, nq: int) -> Grid:
    errors = []
    if nx < 4 or nx % 2:
        errors.append(f"Nx must be an even number >= 4, got {nx}")
    if nq < 2:
        errors.append(f"nq must be >= 2, got {nq}")
    if errors:
        raise ConfigurationError(errors)

    xq, wq = leggauss(nq)
    # exactness on monomials up to degree 2 nq - 1
    for degree in range(2 * nq):
        exact = 2.0 / (degree + 1) if degree % 2 == 0 else 0.0
        got = float(np.dot(wq, xq ** degree))
        if abs(got - exact) > 1e-12 * max(1.0, abs(exact)) * nq:
            raise ConfigurationError(f"Gauss rule with {nq} nodes fails on x^{degree}: {got!r} != {exact!r}")

    z_parts, w_parts, layer_parts = [], [], []
    for j in reversed(range(stack.n_layers)):
        bottom, top = stack.layer_bounds(j)
        half = 0.5 * (top - bottom)
        mid = 0.5 * (top + bottom)
        z_parts.append(mid + half * xq)
        w_parts.append(half * wq)
        layer_parts.append(np.full(nq, j))
    z = np.concatenate(z_parts)
    if np.any(np.isin(z, np.asarray(stack.interfaces))):
        raise ConfigurationError("a quadrature node coincides with an interface")

    x = stack.width * np.arange(nx) / nx
    return Grid(stack, nx, nq, x, z, np.concatenate(w_parts), np.concatenate(layer_parts))


def default_nq(stack: LayerStack, kmax: int, bases: Sequence[VerticalBasis] = ()) -> int:
    """
    Nodes per layer resolving products of the highest retained eigenfunctions

    Uses the largest local vertical wavenumber sqrt(lambda / bD_j - kappa^2) met
    in any basis; falls back to the kappa = 0 bound when no bases are given.
    """
    n = stack.n_layers
    h = stack.thickness
    bD = stack.bD
    omega = np.zeros(n)
    if bases:
        for basis in bases:
            local = basis.eigenvalues[-1] / bD - basis.kappa ** 2
            omega = np.maximum(omega, np.sqrt(np.maximum(local, 0.0)))
    else:
        omega = np.sqrt(bD.max() / bD) * kmax * np.pi / stack.depth
    half_phase = float(np.max(omega * h / 2.0))
    resolve = int(math.ceil(half_phase + 6.0 * (2.0 * half_phase) ** (1.0 / 3.0) + 10.5))
    return max(8, int(math.ceil(2.0 * kmax / n)), resolve)


@dataclass
class SpectralBasis:
    """One VerticalBasis per retained wavenumber m = 0..M with traces on a grid

    values[m, q, k] = v_{m,k}(z_q), slopes[m, q, k] = v_{m,k}'(z_q).
    """
    grid: Grid
    bases: List[VerticalBasis]
    values: np.ndarray
    slopes: np.ndarray

    @property
    def stack(self) -> LayerStack:
        return self.grid.stack

    @property
    def kmax(self) -> int:
        return self.values.shape[2]

    @property
    def kappas(self) -> np.ndarray:
        return np.array([basis.kappa for basis in self.bases])

    @property
    def eigenvalues(self) -> np.ndarray:
        """lambda[m, k]"""
        return np.stack([basis.eigenvalues for basis in self.bases])

    @property
    def mode_weights(self) -> np.ndarray:
        """Multiplicity of each stored wavenumber: 1 for m = 0 and Nyquist, 2 otherwise"""
        weights = np.full(len(self.bases), 2.0)
        weights[0] = 1.0
        weights[-1] = 1.0
        return weights

    @property
    def dealias_cut(self) -> int:
        return (2 * self.grid.modes) // 3

    @property
    def bD_nodes(self) -> np.ndarray:
        return self.stack.bD[self.grid.layer]

    @property
    def b_nodes(self) -> np.ndarray:
        return np.asarray(self.stack.b)[self.grid.layer]

    @property
    def weighting(self) -> str:
        return self.bases[0].weighting

    @property
    def projection_weights(self) -> np.ndarray:
        """Quadrature weights of the inner product the eigenfunctions are orthonormal in"""
        if self.weighting == 'porosity':
            return self.grid.weights * self.b_nodes
        return self.grid.weights

    def modal_inner(self, a: np.ndarray, c: np.ndarray) -> float:
        """Re int a conj(c) for modal arrays on orthonormal bases"""
        return self.grid.width * float(np.sum(self.mode_weights[:, None] * np.real(a * np.conj(c))))


def build_spectral_basis(stack: LayerStack, nx: int, kmax: int, nq: Optional[int] = None,
                         weighting: str = 'plain', pool: Optional[ModePool] = None,
                         cache: Optional[BasisCache] = None) -> SpectralBasis:
    """
    Eigen-decompositions for every wavenumber m = 0..Nx/2 plus traces on the grid

    Args:
        stack: Layer geometry
        nx: Horizontal grid points (even)
        kmax: Eigenfunctions per wavenumber
        nq: Gauss nodes per layer (default_nq() when None)
        weighting: Eigenfunction normalization
        pool: Thread pool for the independent per-wavenumber solves
        cache: Basis cache (the module-level cache by default)

    Returns:
        SpectralBasis
    """
    if nx < 4 or nx % 2:
        raise ConfigurationError(f"Nx must be an even number >= 4, got {nx}")
    cache = basis_cache if cache is None else cache
    kappas = 2.0 * np.pi * np.arange(nx // 2 + 1) / stack.width

    def build(kappa: float) -> VerticalBasis:
        key = BasisCache.key(stack, kappa, kmax, weighting)
        return cache.get_or_build(key, lambda: find_eigenpairs(stack, kappa, kmax, weighting))

    own_pool = pool is None
    pool = ModePool() if own_pool else pool
    try:
        bases = pool.map_ordered(build, list(kappas), label='wavenumber')
    finally:
        if own_pool:
            pool.shutdown()

    if nq is None:
        nq = default_nq(stack, kmax, bases)
    grid = build_grid(stack, nx, nq)
    values = np.empty((len(bases), grid.nz, kmax))
    slopes = np.empty_like(values)
    for m, basis in enumerate(bases):
        values[m], slopes[m] = basis.traces(grid.z, grid.layer)

    logger.info(f"Spectral basis built: Nx={nx}, Kmax={kmax}, nq={nq}, layers={stack.n_layers}, "
                f"lambda_max={max(b.eigenvalues[-1] for b in bases)!r}")
    return SpectralBasis(grid, bases, values, slopes)


@dataclass
class SpectralField:
    """A scalar field held as modal coefficients c[m, k], nodal values f[i, q], or both

    A representation is valid when it is not None.
    """
    modal: Optional[np.ndarray] = None
    nodal: Optional[np.ndarray] = None


def _check_modal(field: SpectralField, bases: SpectralBasis) -> np.ndarray:
    if field.modal is None:
        raise FieldError("modal representation is not valid")
    expected = (len(bases.bases), bases.kmax)
    if field.modal.shape != expected:
        raise FieldError(f"modal shape {field.modal.shape} does not match bases {expected}")
    return field.modal


def _synthesize(bases: SpectralBasis, rows: np.ndarray) -> np.ndarray:
    """Real nodal values from per-wavenumber profiles rows[m, q]"""
    return np.fft.irfft(rows * bases.grid.nx, n=bases.grid.nx, axis=0)


def to_modal(field: SpectralField, bases: SpectralBasis) -> SpectralField:
    """Project nodal values onto e^{i kappa_m x} v_{m,k}(z)"""
    if field.modal is not None:
        return field
    if field.nodal is None:
        raise FieldError("field has neither representation")
    grid = bases.grid
    if field.nodal.shape != (grid.nx, grid.nz):
        raise FieldError(f"nodal shape {field.nodal.shape} does not match grid {(grid.nx, grid.nz)}")
    rows = np.fft.rfft(field.nodal, axis=0) / grid.nx
    modal = np.einsum('mq,q,mqk->mk', rows, bases.projection_weights, bases.values)
    return SpectralField(modal, field.nodal)


def to_nodal(field: SpectralField, bases: SpectralBasis) -> SpectralField:
    if field.nodal is not None:
        return field
    c = _check_modal(field, bases)
    scale = float(np.max(np.abs(c))) if c.size else 0.0
    for m in (0, len(bases.bases) - 1):
        if np.max(np.abs(c[m].imag)) > 1e-12 * scale:
            raise FieldError(f"Hermitian symmetry violated: wavenumber row {m} has imaginary coefficients")
    rows = np.einsum('mk,mqk->mq', c, bases.values)
    return SpectralField(c, _synthesize(bases, rows))


def gradient_nodal(field: SpectralField, bases: SpectralBasis) -> Tuple[np.ndarray, np.ndarray]:
    """(d/dx, d/dz) on the nodal grid from modal coefficients"""
    c = _check_modal(field, bases)
    rows = np.einsum('mk,mqk->mq', c, bases.values)
    slope_rows = np.einsum('mk,mqk->mq', c, bases.slopes)
    fx = _synthesize(bases, 1j * bases.kappas[:, None] * rows)
    fz = _synthesize(bases, slope_rows)
    return fx, fz


def dealias(field: SpectralField) -> SpectralField:
    """Zero wavenumbers above floor(2M/3)"""
    if field.modal is None:
        raise FieldError("modal representation is not valid")
    modes = field.modal.shape[0] - 1
    modal = field.modal.copy()
    modal[(2 * modes) // 3 + 1:] = 0.0
    return SpectralField(modal, None)


def norms(field: SpectralField, bases: SpectralBasis) -> Dict[str, float]:
    """
    Quadrature norms of a field

    L4 and Linf are sampled on the nodal grid. The W norm takes second
    derivatives from the modal representation, with d/dz(bD d/dz v_k) taken
    from the eigen-relation bD kappa^2 v_k - lambda_k v_k.

    Returns:
        Dict with L2, V, L4, gradL4 (= ||grad phi||_L4), Linf, W
        and dx2 (= ||d/dx phi||^2)
    """
    if field.modal is None:
        field = to_modal(field, bases)
    if field.nodal is None:
        field = to_nodal(field, bases)
    grid = bases.grid
    c = field.modal
    f = field.nodal
    p = bases.bD_nodes
    kappa = bases.kappas[:, None]

    fx, fz = gradient_nodal(field, bases)
    rows = np.einsum('mk,mqk->mq', c, bases.values)
    slope_rows = np.einsum('mk,mqk->mq', c, bases.slopes)
    fxx = _synthesize(bases, -(kappa ** 2) * rows)
    fxz = _synthesize(bases, 1j * kappa * slope_rows)
    lam = bases.eigenvalues
    flux_dz = _synthesize(bases, p[None, :] * kappa ** 2 * rows - np.einsum('mk,mqk->mq', c * lam, bases.values))

    L2sq = grid.integrate(f * f)
    Vsq = grid.integrate(p * (fx * fx + fz * fz))
    dx_block = grid.integrate(fx * fx + fxx * fxx + fxz * fxz)
    flux_block = grid.integrate((p * fz) ** 2 + (p * fxz) ** 2 + flux_dz ** 2)

    return {
        'L2': math.sqrt(max(L2sq, 0.0)),
        'V': math.sqrt(max(Vsq, 0.0)),
        'L4': max(grid.integrate(f ** 4), 0.0) ** 0.25,
        'gradL4': max(grid.integrate((fx * fx + fz * fz) ** 2), 0.0) ** 0.25,
        'Linf': float(np.max(np.abs(f))) if f.size else 0.0,
        'W': math.sqrt(max(Vsq + dx_block + flux_block, 0.0)),
        'dx2': grid.integrate(fx * fx),
    }


def embedding_ratios(field: SpectralField, bases: SpectralBasis) -> Dict[str, float]:
    """
    Ratios that stay bounded when W controls H2-type quantities in 2D

    gradL4_over_W = ||grad phi||_L4 / ||phi||_W and
    Linf_over_L2W = ||phi||_inf / (||phi||_L2 ||phi||_W)^(1/2); both 0 for the zero field.
    """
    values = norms(field, bases)
    W = values['W']
    interpolated = math.sqrt(values['L2'] * W)
    return {
        'gradL4_over_W': values['gradL4'] / W if W > 0 else 0.0,
        'Linf_over_L2W': values['Linf'] / interpolated if interpolated > 0 else 0.0,
    }


def eigenmode_field(bases: SpectralBasis, m: int, k: int, amplitude: float = 1.0) -> SpectralField:
    """amplitude * cos(kappa_m x) v_{m,k}(z), k 1-based"""
    if not (0 <= m < len(bases.bases)) or not (1 <= k <= bases.kmax):
        raise ConfigurationError(f"eigenmode (m={m}, k={k}) outside the retained range")
    modal = np.zeros((len(bases.bases), bases.kmax), dtype=complex)
    modal[m, k - 1] = amplitude if m in (0, len(bases.bases) - 1) else 0.5 * amplitude
    return to_nodal(SpectralField(modal, None), bases)


def random_field(bases: SpectralBasis, seed: int, band: Tuple[int, int] = (4, 4),
                 amplitude: float = 1.0) -> SpectralField:
    """Seeded band-limited field, coefficients decaying like 1 / (1 + m^2 + k^2)"""
    m_max, k_max = band
    m_max = min(int(m_max), bases.dealias_cut)
    k_max = min(int(k_max), bases.kmax)
    rng = np.random.default_rng(seed)
    modal = np.zeros((len(bases.bases), bases.kmax), dtype=complex)
    m = np.arange(m_max + 1)[:, None]
    k = np.arange(1, k_max + 1)[None, :]
    decay = amplitude / (1.0 + m ** 2 + k ** 2)
    noise = rng.standard_normal((m_max + 1, k_max)) + 1j * rng.standard_normal((m_max + 1, k_max))
    modal[:m_max + 1, :k_max] = decay * noise
    modal[0] = modal[0].real
    return to_nodal(SpectralField(modal, None), bases)
