import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
import scipy.linalg
from numpy.polynomial.legendre import leggauss
from scipy import sparse
from scipy.optimize import brentq
from scipy.sparse.linalg import eigsh, splu

from src.models import ConfigurationError, EigenSolveError, IncompatibleDataError, LayerStack

logger = logging.getLogger(__name__)

_LN2 = math.log(2.0)
_PANEL_NODES = 16
_DENSE_ORACLE_LIMIT = 600
WEIGHTINGS = ('plain', 'porosity')
BC_KINDS = ('dirichlet', 'neumann')


@dataclass
class TransferState:
    """(v, p v') carried upward through the stack

    The stored pair is rescaled by powers of two after every layer; the true
    values are v * exp(log_scale). crossings counts interior zeros of v.
    """
    v: np.ndarray
    w: np.ndarray
    log_scale: np.ndarray
    crossings: np.ndarray

    @classmethod
    def initial(cls, lam) -> 'TransferState':
        """v = 0, p v' = 1 at the bottom boundary"""
        lam = np.asarray(lam, dtype=float)
        return cls(np.zeros_like(lam), np.ones_like(lam), np.zeros_like(lam),
                   np.zeros(lam.shape, dtype=np.int64))

    def unscaled(self) -> Tuple[np.ndarray, np.ndarray]:
        factor = np.exp(self.log_scale)
        return self.v * factor, self.w * factor


def propagate_layer(state: TransferState, coefficient: float, thickness: float, kappa: float,
                    lam, closed_end: bool = True, mass: float = 1.0) -> TransferState:
    """
    Carry the state across one constant-coefficient layer

    Args:
        state: State at the bottom of the layer
        coefficient: p = b D of the layer
        thickness: Layer thickness h > 0
        kappa: Horizontal wavenumber
        lam: Trial eigenvalue(s), scalar or array
        closed_end: Count a zero that falls exactly on the top of the layer
            (False for the top boundary z = 0, where v(0) = 0 is not interior)
        mass: Weight of lam in the layer (b for the porosity-weighted problem, else 1)

    Returns:
        State at the top of the layer
    """
    p = float(coefficient)
    h = float(thickness)
    shape = np.shape(lam)
    lam = np.atleast_1d(np.asarray(lam, dtype=float)).ravel()
    v0 = np.broadcast_to(state.v, shape).astype(float).ravel()
    w0 = np.broadcast_to(state.w, shape).astype(float).ravel()

    s = kappa * kappa - lam * float(mass) / p
    v1 = np.empty_like(v0)
    w1 = np.empty_like(w0)
    growth = np.zeros_like(v0)
    count = np.zeros(lam.shape, dtype=np.int64)

    osc = s < 0
    if np.any(osc):
        omega = np.sqrt(-s[osc])
        a = v0[osc]
        b = w0[osc] / (p * omega)
        c = np.cos(omega * h)
        sn = np.sin(omega * h)
        v1[osc] = a * c + b * sn
        w1[osc] = p * omega * (b * c - a * sn)
        # v = A sin(omega * zeta + theta); zeros at omega * zeta + theta = n pi
        theta = np.arctan2(a, b)
        first = np.floor(theta / np.pi)
        reach = (theta + omega * h) / np.pi
        last = np.floor(reach) if closed_end else np.ceil(reach) - 1.0
        count[osc] = np.maximum(last - first, 0.0).astype(np.int64)

    hyp = s > 0
    if np.any(hyp):
        sigma = np.sqrt(s[hyp])
        a = v0[hyp]
        b = w0[hyp] / (p * sigma)
        # cosh and sinh scaled by exp(-sigma h); the factor goes to log_scale
        decay = np.exp(-2.0 * sigma * h)
        ch = 0.5 * (1.0 + decay)
        sh = 0.5 * (1.0 - decay)
        v1[hyp] = a * ch + b * sh
        w1[hyp] = p * sigma * (a * sh + b * ch)
        growth[hyp] = sigma * h
        # at most one root: tanh(sigma * zeta) = -a / b
        with np.errstate(divide='ignore', invalid='ignore'):
            ratio = -a / b
        limit = np.tanh(sigma * h)
        hit = (ratio > 0) & ((ratio <= limit) if closed_end else (ratio < limit))
        count[hyp] = hit.astype(np.int64)

    flat = s == 0
    if np.any(flat):
        a = v0[flat]
        b = w0[flat]
        v1[flat] = a + b * h / p
        w1[flat] = b
        with np.errstate(divide='ignore', invalid='ignore'):
            root = -a * p / b
        hit = (root > 0) & ((root <= h) if closed_end else (root < h))
        count[flat] = hit.astype(np.int64)

    magnitude = np.maximum(np.abs(v1), np.abs(w1))
    _, exponent = np.frexp(magnitude)
    v1 = np.ldexp(v1, -exponent)
    w1 = np.ldexp(w1, -exponent)
    log_scale = np.broadcast_to(state.log_scale, shape).ravel() + growth + exponent * _LN2
    crossings = np.broadcast_to(state.crossings, shape).ravel() + count

    return TransferState(v1.reshape(shape), w1.reshape(shape), log_scale.reshape(shape),
                         crossings.reshape(shape))


def layer_mass(stack: LayerStack, weighting: str = 'plain') -> np.ndarray:
    """Per-layer weight of the eigenvalue term: b for 'porosity', 1 for 'plain'"""
    if weighting == 'porosity':
        return np.asarray(stack.b, dtype=float)
    return np.ones(stack.n_layers)


def _shoot(stack: LayerStack, kappa: float, lam, mass: Optional[np.ndarray] = None) -> TransferState:
    mass = np.ones(stack.n_layers) if mass is None else mass
    state = TransferState.initial(lam)
    bD = stack.bD
    h = stack.thickness
    for j in reversed(range(stack.n_layers)):
        state = propagate_layer(state, bD[j], h[j], kappa, lam, closed_end=(j != 0), mass=mass[j])
    return state


def dispersion_and_count(stack: LayerStack, kappa: float, lam, weighting: str = 'plain'):
    """
    Shoot from (0, 1) at z = -H to z = 0

    Returns:
        (F, N): scaled terminal v(0) and the number of eigenvalues strictly below lam
    """
    state = _shoot(stack, kappa, lam, layer_mass(stack, weighting))
    if np.ndim(lam) == 0:
        return float(state.v), int(state.crossings)
    return state.v, state.crossings


def _local_basis(s: float, h: float, zeta: np.ndarray):
    """Two independent solutions of f'' = s f on [0, h] and their derivatives

    The pair is chosen per regime so that matrix entries stay O(1):
    cos/sin when oscillatory, decaying exponentials from either end when
    evanescent, and cos/cosh with the matching sinc-type partner when |s| h^2 < 1.
    """
    zeta = np.asarray(zeta, dtype=float)
    if abs(s) * h * h < 1.0:
        r = math.sqrt(abs(s))
        x = r * zeta
        if s < 0:
            C = np.cos(x)
            S = zeta * np.sinc(x / np.pi)
        elif s > 0:
            C = np.cosh(x)
            S = np.sinh(x) / r
        else:
            C = np.ones_like(zeta)
            S = zeta.copy()
        return C, S / h, s * S, C / h
    if s < 0:
        omega = math.sqrt(-s)
        c = np.cos(omega * zeta)
        sn = np.sin(omega * zeta)
        return c, sn, -omega * sn, omega * c
    sigma = math.sqrt(s)
    e_bottom = np.exp(-sigma * zeta)
    e_top = np.exp(-sigma * (h - zeta))
    return e_bottom, e_top, -sigma * e_bottom, sigma * e_top


def _composite_gauss(h: float, rate: float) -> Tuple[np.ndarray, np.ndarray]:
    panels = max(1, int(math.ceil(rate * h / 2.0)))
    x, w = leggauss(_PANEL_NODES)
    edges = np.linspace(0.0, h, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def _transmission_matrix(stack: LayerStack, kappa: float, lam: float, mass: np.ndarray) -> np.ndarray:
    """Dirichlet ends plus continuity of v and bD v' at every interface, rows normalized"""
    n = stack.n_layers
    bD = stack.bD
    h = stack.thickness
    s = kappa * kappa - lam * mass / bD
    A = np.zeros((2 * n, 2 * n))

    f1, f2, _, _ = _local_basis(s[0], h[0], np.array([h[0]]))
    A[0, 0:2] = f1[0], f2[0]
    row = 1
    for j in range(n - 1):
        up = _local_basis(s[j], h[j], np.array([0.0]))
        down = _local_basis(s[j + 1], h[j + 1], np.array([h[j + 1]]))
        A[row, 2 * j:2 * j + 2] = up[0][0], up[1][0]
        A[row, 2 * j + 2:2 * j + 4] = -down[0][0], -down[1][0]
        A[row + 1, 2 * j:2 * j + 2] = bD[j] * up[2][0], bD[j] * up[3][0]
        A[row + 1, 2 * j + 2:2 * j + 4] = -bD[j + 1] * down[2][0], -bD[j + 1] * down[3][0]
        row += 2
    f1, f2, _, _ = _local_basis(s[-1], h[-1], np.array([0.0]))
    A[row, 2 * n - 2:2 * n] = f1[0], f2[0]

    scale = np.max(np.abs(A), axis=1)
    scale[scale == 0] = 1.0
    return A / scale[:, None]


@dataclass
class VerticalBasis:
    """Eigenpairs of -(bD v')' + bD kappa^2 v = lam w v with v(0) = v(-H) = 0

    w = 1 for 'plain' weighting and w = b for 'porosity'.

    Eigenfunctions are stored per layer as coefficient pairs over the local
    solutions of _local_basis, with zeta = z - z_bottom of the layer.
    """
    stack: LayerStack
    kappa: float
    eigenvalues: np.ndarray
    coefficients: np.ndarray
    weighting: str = 'plain'
    brackets: List[Tuple[float, float]] = field(default_factory=list)

    @property
    def kmax(self) -> int:
        return len(self.eigenvalues)

    def local_rates(self) -> np.ndarray:
        """s_j = kappa^2 - lam_k w_j / (b_j D_j), shape (K, n_layers)"""
        mass = layer_mass(self.stack, self.weighting)
        return self.kappa ** 2 - self.eigenvalues[:, None] * (mass / self.stack.bD)[None, :]

    def _layer_values(self, j: int, zeta: np.ndarray, derivative: bool) -> np.ndarray:
        h = self.stack.thickness[j]
        s = self.local_rates()[:, j]
        out = np.empty((len(zeta), self.kmax))
        for k in range(self.kmax):
            f1, f2, d1, d2 = _local_basis(s[k], h, zeta)
            A, B = self.coefficients[k, j]
            out[:, k] = A * d1 + B * d2 if derivative else A * f1 + B * f2
        return out

    def evaluate(self, z, derivative: bool = False, layer=None) -> np.ndarray:
        """
        Values (or z-derivatives) of all eigenfunctions

        Args:
            z: Heights in [-H, 0]
            derivative: Return v_k' instead of v_k
            layer: Layer index per point; by default interfaces go to the layer below,
                pass it explicitly to take the one-sided limit from above

        Returns:
            Array of shape (len(z), Kmax)
        """
        z = np.atleast_1d(np.asarray(z, dtype=float))
        layer = self.stack.layer_index(z) if layer is None else np.broadcast_to(layer, z.shape)
        out = np.empty((len(z), self.kmax))
        for j in np.unique(layer):
            mask = layer == j
            bottom, _ = self.stack.layer_bounds(int(j))
            out[mask] = self._layer_values(int(j), z[mask] - bottom, derivative)
        return out

    def traces(self, z, layer=None) -> Tuple[np.ndarray, np.ndarray]:
        return self.evaluate(z, False, layer), self.evaluate(z, True, layer)

    def gram(self, weighted: Optional[bool] = None) -> np.ndarray:
        """Inner products of the stored eigenfunctions by fine composite quadrature"""
        if weighted is None:
            weighted = self.weighting == 'porosity'
        rates = np.sqrt(np.abs(self.local_rates()))
        G = np.zeros((self.kmax, self.kmax))
        for j in range(self.stack.n_layers):
            nodes, weights = _composite_gauss(self.stack.thickness[j], float(rates[:, j].max()))
            V = self._layer_values(j, nodes, False)
            wj = weights * (self.stack.b[j] if weighted else 1.0)
            G += V.T @ (wj[:, None] * V)
        return G

    def interface_residuals(self) -> Tuple[float, float]:
        """Largest relative jumps of v and of bD v' over interior interfaces"""
        value_jump = 0.0
        flux_jump = 0.0
        bD = self.stack.bD
        for j in range(1, self.stack.n_layers):
            zj = np.array([self.stack.interfaces[j]])
            above_v, above_d = self.traces(zj, layer=np.array([j - 1]))
            below_v, below_d = self.traces(zj, layer=np.array([j]))
            scale_v = max(np.max(np.abs(above_v)), 1e-300)
            above_f = bD[j - 1] * above_d
            below_f = bD[j] * below_d
            scale_f = max(np.max(np.abs(above_f)), 1e-300)
            value_jump = max(value_jump, float(np.max(np.abs(above_v - below_v))) / scale_v)
            flux_jump = max(flux_jump, float(np.max(np.abs(above_f - below_f))) / scale_f)
        return value_jump, flux_jump


def _eigenfunction_coefficients(stack: LayerStack, kappa: float, lam: float, weighting: str) -> np.ndarray:
    mass = layer_mass(stack, weighting)
    A = _transmission_matrix(stack, kappa, lam, mass)
    _, _, vt = scipy.linalg.svd(A)
    coeffs = vt[-1].reshape(stack.n_layers, 2)

    s = kappa * kappa - lam * mass / stack.bD
    norm2 = 0.0
    for j in range(stack.n_layers):
        h = stack.thickness[j]
        nodes, weights = _composite_gauss(h, math.sqrt(abs(s[j])))
        f1, f2, _, _ = _local_basis(s[j], h, nodes)
        values = coeffs[j, 0] * f1 + coeffs[j, 1] * f2
        norm2 += mass[j] * float(np.dot(weights, values * values))
    coeffs = coeffs / math.sqrt(norm2)

    # sign convention: v'(-H) > 0
    _, _, d1, d2 = _local_basis(s[-1], stack.thickness[-1], np.array([0.0]))
    if coeffs[-1, 0] * d1[0] + coeffs[-1, 1] * d2[0] < 0:
        coeffs = -coeffs
    return coeffs


def _count(stack: LayerStack, kappa: float, lam: np.ndarray, mass: np.ndarray) -> np.ndarray:
    return _shoot(stack, kappa, lam, mass).crossings


def _isolate(stack: LayerStack, kappa: float, kmax: int, max_iter: int, mass: np.ndarray):
    """Brackets [lo_k, hi_k] with exactly k - 1 eigenvalues below lo_k and k below hi_k"""
    bD = stack.bD
    k = np.arange(1, kmax + 1)
    base = kappa * kappa + (k * np.pi / stack.depth) ** 2
    # min-max bounds from the extreme ratios of stiffness to mass coefficient
    lo = (bD / mass).min() * base * (1.0 - 1e-9)
    hi = (bD / mass).max() * base * (1.0 + 1e-9)
    lo_count = _count(stack, kappa, lo, mass)
    hi_count = _count(stack, kappa, hi, mass)

    for _ in range(64):
        bad = lo_count > k - 1
        if not bad.any():
            break
        lo[bad] *= 0.5
        lo_count[bad] = _count(stack, kappa, lo[bad], mass)
    for _ in range(64):
        bad = hi_count < k
        if not bad.any():
            break
        hi[bad] *= 2.0
        hi_count[bad] = _count(stack, kappa, hi[bad], mass)

    eps = np.finfo(float).eps
    for _ in range(max_iter):
        pending = (lo_count != k - 1) | (hi_count != k)
        pending &= (hi - lo) > 4.0 * eps * hi
        if not pending.any():
            break
        idx = np.flatnonzero(pending)
        mid = 0.5 * (lo[idx] + hi[idx])
        mid_count = _count(stack, kappa, mid, mass)
        up = mid_count <= k[idx] - 1
        lo[idx[up]] = mid[up]
        lo_count[idx[up]] = mid_count[up]
        hi[idx[~up]] = mid[~up]
        hi_count[idx[~up]] = mid_count[~up]

    unresolved = np.flatnonzero((lo_count != k - 1) | (hi_count != k))
    if len(unresolved):
        i = int(unresolved[0])
        logger.error(f"Eigenvalue {i + 1} at kappa={kappa!r} not isolated by oscillation count")
        raise EigenSolveError(f"could not isolate eigenvalue {i + 1}", (float(lo[i]), float(hi[i])))
    return lo, hi


def find_eigenpairs(stack: LayerStack, kappa: float, kmax: int, weighting: str = 'plain',
                    rtol: float = 1e-14, max_iter: int = 200) -> VerticalBasis:
    """
    First kmax eigenpairs for horizontal wavenumber kappa

    Each eigenvalue is isolated by bisection on the oscillation count, then refined
    with Brent's method on the shooting function.

    Args:
        stack: Layer geometry and coefficients
        kappa: Horizontal wavenumber 2 pi m / L
        kmax: Number of eigenpairs
        weighting: 'plain' (L2) or 'porosity' (eigenvalue term and norm weighted by b)
        rtol: Relative tolerance of the root refinement
        max_iter: Iteration cap for bisection and refinement

    Returns:
        VerticalBasis with eigenvalues ascending
    """
    if kmax < 1:
        raise ConfigurationError(f"Kmax must be >= 1, got {kmax}")
    if weighting not in WEIGHTINGS:
        raise ConfigurationError(f"weighting must be one of {WEIGHTINGS}, got {weighting!r}")

    mass = layer_mass(stack, weighting)
    lo, hi = _isolate(stack, kappa, kmax, max_iter, mass)

    eigenvalues = np.empty(kmax)
    for i in range(kmax):
        a, b = float(lo[i]), float(hi[i])
        # true v(0) relative to a fixed scale, continuous in lam inside the bracket
        reference = float(_shoot(stack, kappa, 0.5 * (a + b), mass).log_scale)

        def shoot(lam: float) -> float:
            state = _shoot(stack, kappa, lam, mass)
            return float(state.v) * math.exp(min(700.0, max(-700.0, float(state.log_scale) - reference)))

        fa, fb = shoot(a), shoot(b)
        if fa == 0.0:
            eigenvalues[i] = a
        elif fb == 0.0:
            eigenvalues[i] = b
        elif np.sign(fa) == np.sign(fb):
            if b - a > 1e-12 * b:
                logger.error(f"Shooting function does not change sign for eigenvalue {i + 1}")
                raise EigenSolveError(f"no sign change for eigenvalue {i + 1}", (a, b))
            # bracket already at round-off width
            eigenvalues[i] = 0.5 * (a + b)
        else:
            try:
                eigenvalues[i] = brentq(shoot, a, b, xtol=1e-300, rtol=rtol, maxiter=max_iter)
            except (RuntimeError, ValueError) as e:
                logger.error(f"Root refinement failed for eigenvalue {i + 1} at kappa={kappa!r}: {str(e)}")
                raise EigenSolveError(f"refinement of eigenvalue {i + 1} did not converge", (a, b))

    coefficients = np.stack([
        _eigenfunction_coefficients(stack, kappa, lam, weighting) for lam in eigenvalues
    ])
    logger.debug(f"Eigenpairs at kappa={kappa!r}: lambda_1={eigenvalues[0]!r}, lambda_{kmax}={eigenvalues[-1]!r}")
    return VerticalBasis(stack, float(kappa), eigenvalues, coefficients, weighting,
                         [(float(a), float(b)) for a, b in zip(lo, hi)])


def oracle_nodes(stack: LayerStack, mesh_density: float) -> np.ndarray:
    """Ascending interface-aligned nodes, softer layers refined by sqrt(max(bD) / bD_j)"""
    bD = stack.bD
    pieces = []
    for j in reversed(range(stack.n_layers)):
        bottom, top = stack.layer_bounds(j)
        refine = math.sqrt(bD.max() / bD[j])
        n = max(2, int(math.ceil(mesh_density * (top - bottom) * refine)))
        pieces.append(np.linspace(bottom, top, n + 1)[:-1])
    pieces.append(np.array([0.0]))
    return np.concatenate(pieces)


def fem_oracle_eigs(stack: LayerStack, kappa: float, kmax: int, mesh_density: float = 200.0,
                    nodes: Optional[np.ndarray] = None, weighting: str = 'plain') -> np.ndarray:
    """
    Eigenvalues of the P1 finite-element discretization of the same weak form

    Args:
        stack: Layer geometry and coefficients
        kappa: Horizontal wavenumber
        kmax: Number of eigenvalues
        mesh_density: Elements per unit depth in the stiffest layer
        nodes: Explicit mesh; must contain every interface
        weighting: 'plain' (unit mass) or 'porosity' (mass weighted by b)

    Returns:
        kmax eigenvalues, ascending
    """
    if nodes is None:
        z = oracle_nodes(stack, mesh_density)
    else:
        z = np.sort(np.asarray(nodes, dtype=float))
        tol = 1e-12 * stack.depth
        missing = [zj for zj in stack.interfaces if not np.any(np.abs(z - zj) <= tol)]
        if missing:
            raise ConfigurationError(f"oracle mesh does not contain interfaces {missing}")
        if z[0] < -stack.depth - tol or z[-1] > tol:
            raise ConfigurationError("oracle mesh extends outside [-H, 0]")

    he = np.diff(z)
    element_layer = stack.layer_index(0.5 * (z[:-1] + z[1:]))
    p = stack.bD[element_layer]
    w = layer_mass(stack, weighting)[element_layer]
    n = len(z)
    stiff_diag = p / he + p * kappa ** 2 * he / 3.0
    stiff_off = -p / he + p * kappa ** 2 * he / 6.0
    mass_diag = w * he / 3.0
    mass_off = w * he / 6.0

    def assemble(diag_part, off_part):
        main = np.zeros(n)
        main[:-1] += diag_part
        main[1:] += diag_part
        return sparse.diags([off_part, main, off_part], [-1, 0, 1], format='csc')

    A = assemble(stiff_diag, stiff_off)[1:-1, 1:-1]
    B = assemble(mass_diag, mass_off)[1:-1, 1:-1]
    dofs = n - 2
    if kmax >= dofs:
        raise ConfigurationError(f"oracle mesh has {dofs} interior nodes, too few for {kmax} eigenvalues")

    if dofs <= _DENSE_ORACLE_LIMIT:
        values = scipy.linalg.eigh(A.toarray(), B.toarray(), eigvals_only=True,
                                   subset_by_index=[0, kmax - 1])
    else:
        values = eigsh(A, k=kmax, M=B, sigma=0.0, which='LM', return_eigenvectors=False)
    return np.sort(values)


def fem_oracle_extrapolated(stack: LayerStack, kappa: float, kmax: int, mesh_density: float = 200.0,
                            weighting: str = 'plain'):
    """Richardson extrapolation of the P1 oracle from a mesh and its uniform halving

    Returns:
        (extrapolated, coarse, fine) eigenvalue arrays
    """
    coarse_nodes = oracle_nodes(stack, mesh_density)
    fine_nodes = np.empty(2 * len(coarse_nodes) - 1)
    fine_nodes[0::2] = coarse_nodes
    fine_nodes[1::2] = 0.5 * (coarse_nodes[:-1] + coarse_nodes[1:])
    coarse = fem_oracle_eigs(stack, kappa, kmax, nodes=coarse_nodes, weighting=weighting)
    fine = fem_oracle_eigs(stack, kappa, kmax, nodes=fine_nodes, weighting=weighting)
    return (4.0 * fine - coarse) / 3.0, coarse, fine


def lagrange_basis(nodes: np.ndarray, x) -> Tuple[np.ndarray, np.ndarray]:
    """Lagrange basis on the given nodes and its derivative at points x, each of shape (len(x), len(nodes))"""
    nodes = np.asarray(nodes, dtype=float)
    x = np.asarray(x, dtype=float)[:, None]
    n = len(nodes)
    values = np.empty((x.shape[0], n))
    slopes = np.empty((x.shape[0], n))
    for a in range(n):
        others = np.delete(nodes, a)
        denom = np.prod(nodes[a] - others)
        terms = x - others[None, :]
        values[:, a] = np.prod(terms, axis=1) / denom
        d = np.zeros(x.shape[0])
        for i in range(n - 1):
            d += np.prod(np.delete(terms, i, axis=1), axis=1)
        slopes[:, a] = d / denom
    return values, slopes


class ModeEllipticSolver:
    """Continuous Lagrange elements for int c (p' q' + kappa^2 p q) = rhs(q) on one mode

    The mesh is aligned with the interfaces and the factorization is computed once,
    so repeated solves with new right-hand sides cost one back substitution.
    """

    def __init__(self, stack: LayerStack, kappa: float, coefficients, bc_kind: str = 'dirichlet',
                 order: int = 2, mesh_density: float = 32.0):
        coefficients = np.asarray(coefficients, dtype=float)
        errors = []
        if bc_kind not in BC_KINDS:
            errors.append(f"bc_kind must be one of {BC_KINDS}, got {bc_kind!r}")
        if order not in (1, 2, 3, 4):
            errors.append(f"element order must be 1..4, got {order}")
        if coefficients.shape != (stack.n_layers,) or np.any(coefficients <= 0):
            errors.append("coefficients must be one positive value per layer")
        if not mesh_density > 0:
            errors.append(f"mesh_density must be > 0, got {mesh_density}")
        if errors:
            raise ConfigurationError(errors)

        self.stack = stack
        self.kappa = float(kappa)
        self.bc_kind = bc_kind
        self.order = order
        self.coefficients = coefficients

        pieces = []
        for j in reversed(range(stack.n_layers)):
            bottom, top = stack.layer_bounds(j)
            n = max(1, int(math.ceil((top - bottom) * max(mesh_density, 2.0 * abs(kappa)))))
            pieces.append(np.linspace(bottom, top, n + 1)[:-1])
        pieces.append(np.array([0.0]))
        self.edges = np.concatenate(pieces)
        self.n_elements = len(self.edges) - 1
        self.n_dofs = self.n_elements * order + 1
        self._half = 0.5 * np.diff(self.edges)
        self._mid = 0.5 * (self.edges[:-1] + self.edges[1:])
        self.element_layer = stack.layer_index(self._mid)
        self._ref_nodes = np.linspace(-1.0, 1.0, order + 1)

        xq, wq = leggauss(order + 3)
        self.points = (self._mid[:, None] + self._half[:, None] * xq[None, :]).ravel()
        self.weights = (self._half[:, None] * wq[None, :]).ravel()
        self.point_layer = np.repeat(self.element_layer, len(xq))
        self._N = self._element_matrix(np.repeat(np.arange(self.n_elements), len(xq)),
                                       np.tile(xq, self.n_elements), derivative=False)
        self._dN = self._element_matrix(np.repeat(np.arange(self.n_elements), len(xq)),
                                        np.tile(xq, self.n_elements), derivative=True)

        cw = sparse.diags(self.weights * coefficients[self.point_layer])
        K = (self._dN.T @ cw @ self._dN + self.kappa ** 2 * (self._N.T @ cw @ self._N)).tocsc()
        self._stiffness = K
        self._mean_row = np.asarray(self._N.T @ self.weights).ravel()

        self._constrained = bc_kind == 'neumann' and self.kappa == 0.0
        if bc_kind == 'dirichlet':
            self._free = np.arange(1, self.n_dofs - 1)
            system = K[self._free][:, self._free]
        elif self._constrained:
            self._free = np.arange(self.n_dofs)
            m = sparse.csc_matrix(self._mean_row[:, None])
            system = sparse.bmat([[K, m], [m.T, None]], format='csc')
        else:
            self._free = np.arange(self.n_dofs)
            system = K
        self._lu = splu(sparse.csc_matrix(system))
        logger.debug(f"ModeEllipticSolver kappa={self.kappa!r} {bc_kind} order={order} "
                     f"elements={self.n_elements}")

    def _element_matrix(self, elements: np.ndarray, xi: np.ndarray, derivative: bool) -> sparse.csr_matrix:
        values, slopes = lagrange_basis(self._ref_nodes, xi)
        data = slopes / self._half[elements][:, None] if derivative else values
        rows = np.repeat(np.arange(len(xi)), self.order + 1)
        cols = (elements[:, None] * self.order + np.arange(self.order + 1)[None, :]).ravel()
        return sparse.csr_matrix((data.ravel(), (rows, cols)), shape=(len(xi), self.n_dofs))

    def evaluation_matrix(self, z, derivative: bool = False) -> sparse.csr_matrix:
        """Sparse map from dofs to values (or derivatives) at heights z"""
        z = np.atleast_1d(np.asarray(z, dtype=float))
        elements = np.clip(np.searchsorted(self.edges, z, side='right') - 1, 0, self.n_elements - 1)
        xi = (z - self._mid[elements]) / self._half[elements]
        return self._element_matrix(elements, xi, derivative)

    def load_vector(self, f0=None, f1=None) -> np.ndarray:
        """int f0 q + f1 q' for every basis function q; f0, f1 sampled at self.points"""
        r = np.zeros(self.n_dofs, dtype=complex if (np.iscomplexobj(f0) or np.iscomplexobj(f1)) else float)
        if f0 is not None:
            r = r + self._N.T @ (self.weights * f0)
        if f1 is not None:
            r = r + self._dN.T @ (self.weights * f1)
        return r

    def weak_residual(self, dofs: np.ndarray, f0=None, f1=None) -> np.ndarray:
        """a(p, q) - rhs(q) for every basis function q"""
        return self._stiffness @ dofs - self.load_vector(f0, f1)

    def solve(self, load: np.ndarray) -> np.ndarray:
        """Dofs of the solution for a load vector from load_vector()"""
        if np.iscomplexobj(load):
            return self._solve_real(load.real) + 1j * self._solve_real(load.imag)
        return self._solve_real(load)

    def _solve_real(self, load: np.ndarray) -> np.ndarray:
        dofs = np.zeros(self.n_dofs)
        if self._constrained:
            total = float(np.sum(load))
            scale = float(np.sum(np.abs(load)))
            if abs(total) > 1e-10 * scale:
                logger.warning(f"Incompatible Neumann data: rhs(1) = {total!r}")
                raise IncompatibleDataError(
                    f"Neumann data not orthogonal to constants: rhs(1) = {total!r} (scale {scale!r})"
                )
            solution = self._lu.solve(np.append(load, 0.0))
            dofs[:] = solution[:-1]
        else:
            dofs[self._free] = self._lu.solve(load[self._free])
        return dofs


@dataclass
class WeakForm:
    """rhs(q) = int f0 q + f1 q' with f0, f1 callables of (z, layer)"""
    f0: Optional[Callable] = None
    f1: Optional[Callable] = None


@dataclass
class ModeProfile:
    solver: ModeEllipticSolver
    dofs: np.ndarray

    def value(self, z) -> np.ndarray:
        return self.solver.evaluation_matrix(z) @ self.dofs

    def derivative(self, z) -> np.ndarray:
        return self.solver.evaluation_matrix(z, derivative=True) @ self.dofs


def solve_mode_elliptic(stack: LayerStack, kappa: float, coeff_profile, rhs_weak: WeakForm,
                        bc_kind: str, order: int = 2, mesh_density: float = 32.0) -> ModeProfile:
    """
    Solve int coeff (p' q' + kappa^2 p q) dz = rhs(q) for all test functions q

    Args:
        stack: Layer geometry
        kappa: Horizontal wavenumber
        coeff_profile: One coefficient per layer (K / mu or b D)
        rhs_weak: Weak-form right-hand side
        bc_kind: 'neumann' (pressure) or 'dirichlet' (concentration)
        order: Element order 1..4
        mesh_density: Elements per unit depth

    Returns:
        ModeProfile; zero mean when kappa = 0 with Neumann ends
    """
    solver = ModeEllipticSolver(stack, kappa, coeff_profile, bc_kind, order, mesh_density)
    f0 = rhs_weak.f0(solver.points, solver.point_layer) if rhs_weak.f0 is not None else None
    f1 = rhs_weak.f1(solver.points, solver.point_layer) if rhs_weak.f1 is not None else None
    return ModeProfile(solver, solver.solve(solver.load_vector(f0, f1)))
