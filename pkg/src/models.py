import hashlib
import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)


class LayerconError(Exception):
    """Base class for simulator errors"""


class ConfigurationError(LayerconError):
    """Invalid geometry, material parameters or run file"""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__('; '.join(self.errors))


class EigenSolveError(LayerconError):
    """Eigenvalue refinement failed inside a known bracket"""

    def __init__(self, message: str, bracket: Tuple[float, float]):
        self.bracket = bracket
        super().__init__(f"{message} (bracket [{bracket[0]!r}, {bracket[1]!r}])")


class IncompatibleDataError(LayerconError):
    """Neumann problem whose data is not orthogonal to constants"""


class FieldError(LayerconError):
    """Field representation does not match the grid or bases it is used with"""


class SimulationError(LayerconError):
    """Non-finite values appeared during time stepping"""

    def __init__(self, message: str, state=None):
        self.state = state
        super().__init__(message)


class CheckpointError(LayerconError):
    """Checkpoint header does not match the running configuration"""


@dataclass(frozen=True)
class LayerStack:
    """Horizontal strips between z_0 = 0 and z_l = -H, layer j on (z_j, z_{j-1})"""

    interfaces: Tuple[float, ...]
    K: Tuple[float, ...]
    b: Tuple[float, ...]
    D: Tuple[float, ...]
    width: float

    @property
    def n_layers(self) -> int:
        return len(self.K)

    @property
    def depth(self) -> float:
        return -self.interfaces[-1]

    @property
    def thickness(self) -> np.ndarray:
        z = np.asarray(self.interfaces)
        return z[:-1] - z[1:]

    @property
    def bD(self) -> np.ndarray:
        return np.asarray(self.b) * np.asarray(self.D)

    @property
    def constant_porosity(self) -> bool:
        return all(bj == self.b[0] for bj in self.b)

    def layer_bounds(self, j: int) -> Tuple[float, float]:
        """(bottom, top) of layer j (0-based, top layer first)"""
        return self.interfaces[j + 1], self.interfaces[j]

    def layer_index(self, z) -> np.ndarray:
        """0-based layer containing each z; interior interfaces belong to the layer below"""
        inner = -np.asarray(self.interfaces[1:-1])
        return np.searchsorted(inner, -np.asarray(z, dtype=float), side='right')

    def stack_hash(self) -> str:
        text = '|'.join(
            ','.join(repr(float(v)) for v in values)
            for values in (self.interfaces, self.K, self.b, self.D, (self.width,))
        )
        return hashlib.sha256(text.encode('utf-8')).hexdigest()[:16]


@dataclass(frozen=True)
class PhysicalConstants:
    mu: float = 1.0
    rho0: float = 1.0
    alpha: float = 1.0
    g: float = 1.0

    @property
    def buoyancy(self) -> float:
        """c = alpha * rho0 * g"""
        return self.alpha * self.rho0 * self.g

    def validate(self) -> List[str]:
        errors = []
        for name in ('mu', 'rho0', 'g'):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                errors.append(f"{name} must be a positive finite number, got {value!r}")
        # alpha = 0 switches buoyancy off
        if not (math.isfinite(self.alpha) and self.alpha >= 0):
            errors.append(f"alpha must be finite and >= 0, got {self.alpha!r}")
        return errors


@dataclass(frozen=True)
class BoundaryData:
    """Concentration C0 at z = 0 and C1 at z = -H"""

    C0: float = 0.0
    C1: float = 0.0

    @property
    def homogeneous(self) -> bool:
        return self.C0 == 0.0 and self.C1 == 0.0

    def validate(self) -> List[str]:
        errors = []
        if not math.isfinite(self.C0):
            errors.append(f"C0 must be finite, got {self.C0!r}")
        if not math.isfinite(self.C1):
            errors.append(f"C1 must be finite, got {self.C1!r}")
        return errors


@dataclass(frozen=True)
class ConductionLift:
    """Piecewise-linear steady profile l(z) = a_j z + c_j with constant flux q = -b_j D_j a_j"""

    slopes: Tuple[float, ...]
    offsets: Tuple[float, ...]
    flux: float
    stack: LayerStack

    def value(self, z, layer=None) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        j = self.stack.layer_index(z) if layer is None else np.asarray(layer)
        return np.asarray(self.slopes)[j] * z + np.asarray(self.offsets)[j]

    def derivative(self, z, layer=None) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        j = self.stack.layer_index(z) if layer is None else np.asarray(layer)
        return np.asarray(self.slopes)[j] * np.ones_like(z)

    def interface_jumps(self) -> Tuple[float, float]:
        """Largest jump of l and of bD l' over the interior interfaces"""
        value_jump = 0.0
        flux_jump = 0.0
        bD = self.stack.bD
        for j in range(1, self.stack.n_layers):
            zj = self.stack.interfaces[j]
            above = self.slopes[j - 1] * zj + self.offsets[j - 1]
            below = self.slopes[j] * zj + self.offsets[j]
            value_jump = max(value_jump, abs(above - below))
            flux_jump = max(flux_jump, abs(bD[j - 1] * self.slopes[j - 1] - bD[j] * self.slopes[j]))
        return value_jump, flux_jump


def build_layer_stack(interfaces: Sequence[float], layer_params: Sequence[Sequence[float]],
                      width: float) -> LayerStack:
    """
    Validate raw geometry and material data into a LayerStack

    Args:
        interfaces: Interface heights from the top (0) down to -H; positive depths
            0 < d_1 < ... < H are accepted and negated
        layer_params: One (K, b, D) triple per layer, top layer first
        width: Horizontal period L

    Returns:
        Validated LayerStack
    """
    errors = []
    z = [float(v) for v in interfaces]
    if len(z) < 2:
        errors.append("at least two interfaces (top and bottom) are required")
    if not layer_params:
        errors.append("layer list is empty")
    if errors:
        raise ConfigurationError(errors)

    if all(v >= 0 for v in z) and z[0] == 0.0:
        z = [-v for v in z]
    if z[0] != 0.0:
        errors.append(f"top interface must be 0, got {z[0]!r}")
    if any(not math.isfinite(v) for v in z):
        errors.append("interfaces must be finite")
    if any(lower >= upper for upper, lower in zip(z[:-1], z[1:])):
        errors.append(f"interfaces must be strictly decreasing, got {list(interfaces)}")
    if len(layer_params) != len(z) - 1:
        errors.append(
            f"layer-count mismatch: {len(z) - 1} layers from interfaces, {len(layer_params)} parameter triples"
        )

    K, b, D = [], [], []
    for j, params in enumerate(layer_params, start=1):
        if len(params) != 3:
            errors.append(f"layer {j}: expected (K, b, D), got {tuple(params)}")
            continue
        Kj, bj, Dj = (float(v) for v in params)
        if not (math.isfinite(Kj) and Kj > 0):
            errors.append(f"layer {j}: permeability K must be > 0, got {Kj!r}")
        if not (math.isfinite(bj) and 0 < bj <= 1):
            errors.append(f"layer {j}: porosity b must lie in (0, 1], got {bj!r}")
        if not (math.isfinite(Dj) and Dj > 0):
            errors.append(f"layer {j}: diffusivity D must be > 0, got {Dj!r}")
        K.append(Kj)
        b.append(bj)
        D.append(Dj)

    if not (math.isfinite(float(width)) and float(width) > 0):
        errors.append(f"width must be > 0, got {width!r}")

    if errors:
        for error in errors:
            logger.error(f"Layer stack: {error}")
        raise ConfigurationError(errors)

    return LayerStack(tuple(z), tuple(K), tuple(b), tuple(D), float(width))


def conduction_profile(stack: LayerStack, bdata: BoundaryData) -> ConductionLift:
    """Steady flux-continuous profile with l(0) = C0 and l(-H) = C1"""
    errors = bdata.validate()
    if errors:
        raise ConfigurationError(errors)

    bD = stack.bD
    h = stack.thickness
    resistance = float(np.sum(h / bD))
    q = (bdata.C1 - bdata.C0) / resistance

    slopes = []
    offsets = []
    top_value = bdata.C0
    for j in range(stack.n_layers):
        a = -q / bD[j]
        z_top = stack.interfaces[j]
        slopes.append(float(a))
        offsets.append(float(top_value - a * z_top))
        top_value = top_value + a * (stack.interfaces[j + 1] - z_top)

    return ConductionLift(tuple(slopes), tuple(offsets), float(q), stack)


def material_at(stack: LayerStack, z: float) -> Tuple[float, float, float]:
    """(K, b, D) at height z; an interface point takes the layer below it"""
    z = float(z)
    if not (-stack.depth <= z <= 0.0):
        raise ConfigurationError(f"z = {z!r} lies outside [{-stack.depth!r}, 0]")
    j = int(stack.layer_index(z))
    return stack.K[j], stack.b[j], stack.D[j]
