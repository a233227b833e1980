import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from src.config import Config
from src.models import BoundaryData, ConfigurationError, LayerStack, PhysicalConstants, build_layer_stack
from src.services.darcy_transport import StepperConfig
from src.utils import format_float

logger = logging.getLogger(__name__)

OUTPUT_FORMATS = ('csv', 'vtk', 'checkpoint')
INITIAL_KINDS = ('eigenmode', 'random', 'file')
REQUIRED_KEYS = ('stack.interfaces', 'stack.layers')


@dataclass(frozen=True)
class Resolution:
    nx: int = 128
    kmax: int = 64
    nq: Optional[int] = None
    order: int = 2
    mesh_density: float = 32.0


@dataclass(frozen=True)
class OutputSettings:
    cadence: int = 10
    directory: str = 'output'
    formats: Tuple[str, ...] = OUTPUT_FORMATS
    vtk_every: int = 0
    checkpoint_every: int = 0


@dataclass(frozen=True)
class InitialCondition:
    kind: str = 'eigenmode'
    m: int = 0
    k: int = 1
    amplitude: float = 1.0
    band: Tuple[int, int] = (4, 4)
    seed: int = 0
    path: str = ''


@dataclass(frozen=True)
class RunConfig:
    stack: LayerStack
    constants: PhysicalConstants = field(default_factory=PhysicalConstants)
    boundary: BoundaryData = field(default_factory=BoundaryData)
    resolution: Resolution = field(default_factory=Resolution)
    stepper: StepperConfig = field(default_factory=StepperConfig)
    T_end: float = 1.0
    seed: int = 0
    output: OutputSettings = field(default_factory=OutputSettings)
    initial: InitialCondition = field(default_factory=InitialCondition)


def _floats(text: str) -> Tuple[float, ...]:
    text = text.strip().strip('[]')
    return tuple(float(part) for part in text.split(',') if part.strip())


def _ints(text: str) -> Tuple[int, ...]:
    text = text.strip().strip('[]')
    return tuple(int(part) for part in text.split(',') if part.strip())


def _layers(text: str) -> Tuple[Tuple[float, ...], ...]:
    triples = []
    for chunk in text.split(';'):
        chunk = chunk.strip()
        if not chunk:
            continue
        triples.append(tuple(float(v) for v in chunk.replace(',', ' ').split()))
    return tuple(triples)


def _boolean(text: str) -> bool:
    value = text.strip().lower()
    if value in ('true', 'yes', 'on', '1'):
        return True
    if value in ('false', 'no', 'off', '0'):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_int(text: str) -> Optional[int]:
    value = text.strip().lower()
    return None if value in ('auto', '') else int(value)


def _words(text: str) -> Tuple[str, ...]:
    return tuple(part.strip().lower() for part in text.split(',') if part.strip())


def _text(text: str) -> str:
    return text.strip()


# key -> (parser, default); None means required or resolved from another key
KEYS: Dict[str, Tuple[Callable, object]] = {
    'stack.interfaces': (_floats, None),
    'stack.layers': (_layers, None),
    'stack.width': (float, 1.0),
    'constants.mu': (float, 1.0),
    'constants.rho0': (float, 1.0),
    'constants.alpha': (float, 1.0),
    'constants.g': (float, 1.0),
    'boundary.C0': (float, 0.0),
    'boundary.C1': (float, 0.0),
    'resolution.Nx': (int, 128),
    'resolution.Kmax': (int, 64),
    'resolution.nq': (_optional_int, None),
    'resolution.order': (int, 2),
    'resolution.mesh_density': (float, 32.0),
    'stepper.dt': (float, 1e-3),
    'stepper.scheme': (_text, 'IMEX-CN'),
    'stepper.cfl': (float, 0.5),
    'stepper.adaptive': (_boolean, False),
    'run.T_end': (float, 1.0),
    'run.seed': (int, 0),
    'output.cadence': (int, 10),
    'output.directory': (_text, None),
    'output.formats': (_words, OUTPUT_FORMATS),
    'output.vtk_every': (int, 0),
    'output.checkpoint_every': (int, 0),
    'initial.kind': (_text, 'eigenmode'),
    'initial.m': (int, 0),
    'initial.k': (int, 1),
    'initial.amplitude': (float, 1.0),
    'initial.band': (_ints, (4, 4)),
    'initial.seed': (_optional_int, None),
    'initial.path': (_text, ''),
}


def _read_pairs(text: str, errors: List[str]) -> Dict[str, str]:
    pairs = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            errors.append(f"line {number}: expected 'section.key = value', got {raw.strip()!r}")
            continue
        key, value = (part.strip() for part in line.split('=', 1))
        if key not in KEYS:
            errors.append(f"line {number}: unknown key {key!r}")
            continue
        if key in pairs:
            errors.append(f"line {number}: duplicate key {key!r}")
            continue
        pairs[key] = value
    return pairs


def parse_config(text: str) -> RunConfig:
    """
    Parse a flat 'section.key = value' run file

    Args:
        text: Run-file contents

    Returns:
        Validated RunConfig with every default resolved

    Raises:
        ConfigurationError: listing every problem found
    """
    errors: List[str] = []
    pairs = _read_pairs(text, errors)
    for key in REQUIRED_KEYS:
        if key not in pairs:
            errors.append(f"missing required key {key!r}")

    values = {}
    for key, (parser, default) in KEYS.items():
        if key in pairs:
            try:
                values[key] = parser(pairs[key])
            except ValueError as e:
                errors.append(f"{key}: cannot parse {pairs[key]!r} ({str(e)})")
                values[key] = default
        else:
            values[key] = default
    if values['output.directory'] is None:
        values['output.directory'] = Config.OUTPUT_DIR
    if values['initial.seed'] is None:
        values['initial.seed'] = values['run.seed']
    if errors:
        for error in errors:
            logger.error(f"Run file: {error}")
        raise ConfigurationError(errors)

    return _assemble(values)


def _assemble(values: Dict[str, object]) -> RunConfig:
    errors: List[str] = []
    stack = None
    try:
        stack = build_layer_stack(values['stack.interfaces'], values['stack.layers'], values['stack.width'])
    except ConfigurationError as e:
        errors.extend(e.errors)

    constants = PhysicalConstants(values['constants.mu'], values['constants.rho0'],
                                  values['constants.alpha'], values['constants.g'])
    boundary = BoundaryData(values['boundary.C0'], values['boundary.C1'])
    resolution = Resolution(values['resolution.Nx'], values['resolution.Kmax'], values['resolution.nq'],
                            values['resolution.order'], values['resolution.mesh_density'])
    stepper = StepperConfig(values['stepper.dt'], values['stepper.scheme'], values['stepper.cfl'],
                            values['stepper.adaptive'])
    output = OutputSettings(values['output.cadence'], values['output.directory'], tuple(values['output.formats']),
                            values['output.vtk_every'], values['output.checkpoint_every'])
    initial = InitialCondition(values['initial.kind'], values['initial.m'], values['initial.k'],
                               values['initial.amplitude'], tuple(values['initial.band']),
                               values['initial.seed'], values['initial.path'])

    errors.extend(constants.validate())
    errors.extend(boundary.validate())
    errors.extend(stepper.validate())
    errors.extend(_validate_resolution(resolution, stack))
    errors.extend(_validate_output(output))
    errors.extend(_validate_initial(initial, resolution))
    T_end = values['run.T_end']
    if not (math.isfinite(T_end) and T_end >= 0):
        errors.append(f"run.T_end must be >= 0, got {T_end!r}")

    if errors:
        for error in errors:
            logger.error(f"Run file: {error}")
        raise ConfigurationError(errors)

    return RunConfig(stack, constants, boundary, resolution, stepper, T_end, values['run.seed'], output, initial)


def _validate_resolution(resolution: Resolution, stack: Optional[LayerStack]) -> List[str]:
    errors = []
    if resolution.nx < 4 or resolution.nx % 2:
        errors.append(f"resolution.Nx must be an even number >= 4, got {resolution.nx}")
    if resolution.kmax < 1:
        errors.append(f"resolution.Kmax must be >= 1, got {resolution.kmax}")
    if resolution.nq is not None:
        if resolution.nq < 2:
            errors.append(f"resolution.nq must be >= 2, got {resolution.nq}")
        elif stack is not None and resolution.kmax > resolution.nq * stack.n_layers:
            errors.append(f"resolution.Kmax = {resolution.kmax} exceeds the quadrature capacity "
                          f"{resolution.nq * stack.n_layers} (nq x layers)")
    if resolution.order not in (1, 2, 3, 4):
        errors.append(f"resolution.order must be 1..4, got {resolution.order}")
    if not resolution.mesh_density > 0:
        errors.append(f"resolution.mesh_density must be > 0, got {resolution.mesh_density!r}")
    return errors


def _validate_output(output: OutputSettings) -> List[str]:
    errors = []
    if output.cadence < 1:
        errors.append(f"output.cadence must be >= 1, got {output.cadence}")
    unknown = [f for f in output.formats if f not in OUTPUT_FORMATS]
    if unknown:
        errors.append(f"output.formats: unknown format(s) {unknown}, expected a subset of {OUTPUT_FORMATS}")
    if output.vtk_every < 0 or output.checkpoint_every < 0:
        errors.append("output.vtk_every and output.checkpoint_every must be >= 0")
    if not output.directory:
        errors.append("output.directory must not be empty")
    return errors


def _validate_initial(initial: InitialCondition, resolution: Resolution) -> List[str]:
    errors = []
    modes = resolution.nx // 2
    cut = (2 * modes) // 3
    if initial.kind not in INITIAL_KINDS:
        errors.append(f"initial.kind must be one of {INITIAL_KINDS}, got {initial.kind!r}")
    if initial.kind == 'eigenmode':
        if not 0 <= initial.m <= cut:
            errors.append(f"initial.m must lie in [0, {cut}] (dealiased band), got {initial.m}")
        if not 1 <= initial.k <= resolution.kmax:
            errors.append(f"initial.k must lie in [1, {resolution.kmax}], got {initial.k}")
    if len(initial.band) != 2 or any(v < 0 for v in initial.band):
        errors.append(f"initial.band must be two non-negative integers, got {initial.band}")
    elif initial.kind == 'random' and initial.band[0] > cut:
        errors.append(f"initial.band wavenumber bound {initial.band[0]} exceeds the dealias bound {cut}")
    if initial.kind == 'file' and not initial.path:
        errors.append("initial.path is required when initial.kind = file")
    if not math.isfinite(initial.amplitude):
        errors.append("initial.amplitude must be finite")
    return errors


def _floats_text(values) -> str:
    return ', '.join(format_float(v) for v in values)


def emit_config(config: RunConfig) -> str:
    """Run-file text with every key resolved; parse_config(emit_config(c)) == c"""
    stack = config.stack
    r = config.resolution
    lines = [
        f"stack.interfaces = {_floats_text(stack.interfaces)}",
        "stack.layers = " + '; '.join(
            ' '.join(format_float(v) for v in triple) for triple in zip(stack.K, stack.b, stack.D)
        ),
        f"stack.width = {format_float(stack.width)}",
        f"constants.mu = {format_float(config.constants.mu)}",
        f"constants.rho0 = {format_float(config.constants.rho0)}",
        f"constants.alpha = {format_float(config.constants.alpha)}",
        f"constants.g = {format_float(config.constants.g)}",
        f"boundary.C0 = {format_float(config.boundary.C0)}",
        f"boundary.C1 = {format_float(config.boundary.C1)}",
        f"resolution.Nx = {r.nx}",
        f"resolution.Kmax = {r.kmax}",
        f"resolution.nq = {'auto' if r.nq is None else r.nq}",
        f"resolution.order = {r.order}",
        f"resolution.mesh_density = {format_float(r.mesh_density)}",
        f"stepper.dt = {format_float(config.stepper.dt)}",
        f"stepper.scheme = {config.stepper.scheme}",
        f"stepper.cfl = {format_float(config.stepper.cfl_target)}",
        f"stepper.adaptive = {'true' if config.stepper.adaptive else 'false'}",
        f"run.T_end = {format_float(config.T_end)}",
        f"run.seed = {config.seed}",
        f"output.cadence = {config.output.cadence}",
        f"output.directory = {config.output.directory}",
        f"output.formats = {', '.join(config.output.formats)}",
        f"output.vtk_every = {config.output.vtk_every}",
        f"output.checkpoint_every = {config.output.checkpoint_every}",
        f"initial.kind = {config.initial.kind}",
        f"initial.m = {config.initial.m}",
        f"initial.k = {config.initial.k}",
        f"initial.amplitude = {format_float(config.initial.amplitude)}",
        f"initial.band = {', '.join(str(v) for v in config.initial.band)}",
        f"initial.seed = {config.initial.seed}",
        f"initial.path = {config.initial.path}",
    ]
    return '\n'.join(lines) + '\n'


def load_config(path: str) -> RunConfig:
    try:
        with open(path, 'r', encoding='utf-8') as handle:
            text = handle.read()
    except OSError as e:
        logger.error(f"Cannot read run file {path}: {str(e)}")
        raise ConfigurationError([f"cannot read run file {path!r}: {e.strerror or str(e)}"])
    config = parse_config(text)
    logger.info(f"Loaded run file {path}: {config.stack.n_layers} layer(s), Nx={config.resolution.nx}, "
                f"Kmax={config.resolution.kmax}, scheme={config.stepper.scheme}")
    return config
