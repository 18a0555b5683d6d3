"""
2D planar world: double-integrator dynamics, named rectangular regions and
initial-state sampling.
"""

import json
import logging
import math
import os
import re
from dataclasses import dataclass, field
from typing import Dict, Iterable, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from errors import (EnvironmentConfigError, NonFiniteInputError, SchemaVersionError,
                    ShapeError, UnknownRegionError)

logger = logging.getLogger(__name__)

ENVIRONMENT_FORMAT_VERSION = 1
REGION_ROLES = ('goal', 'obstacle')
POLARITIES = ('inside', 'outside')
RESERVED_NAMES = frozenset({'F', 'G', 'U', 'px', 'py', 'vx', 'vy'})
_NAME_PATTERN = re.compile(r'^[A-Za-z_][A-Za-z0-9_]*$')

STATE_DIM = 4
ACTION_DIM = 2


class State(NamedTuple):
    px: float
    py: float
    vx: float
    vy: float


class Action(NamedTuple):
    ax: float
    ay: float


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle [xlo, xhi] x [ylo, yhi]"""

    xlo: float
    xhi: float
    ylo: float
    yhi: float

    def __post_init__(self):
        values = (self.xlo, self.xhi, self.ylo, self.yhi)
        if not all(math.isfinite(v) for v in values):
            raise EnvironmentConfigError(f"rectangle bounds must be finite, got {values}")
        if self.xlo >= self.xhi or self.ylo >= self.yhi:
            raise EnvironmentConfigError(f"rectangle must have positive extent, got {values}")

    @property
    def area(self) -> float:
        return (self.xhi - self.xlo) * (self.yhi - self.ylo)

    @property
    def center(self) -> Tuple[float, float]:
        return (0.5 * (self.xlo + self.xhi), 0.5 * (self.ylo + self.yhi))

    def contains(self, other: 'Rect') -> bool:
        return (self.xlo <= other.xlo and other.xhi <= self.xhi
                and self.ylo <= other.ylo and other.yhi <= self.yhi)

    def margin(self, px, py):
        """Signed distance to the nearest face; positive strictly inside (works on arrays)"""
        return np.minimum(np.minimum(px - self.xlo, self.xhi - px),
                          np.minimum(py - self.ylo, self.yhi - py))

    def to_dict(self) -> dict:
        return {'xlo': self.xlo, 'xhi': self.xhi, 'ylo': self.ylo, 'yhi': self.yhi}


@dataclass(frozen=True)
class Region:
    name: str
    rect: Rect
    role: str = 'goal'


@dataclass(frozen=True)
class EnvironmentSpec:
    """Immutable world description shared by the monitor, the oracle and rollouts"""

    workspace: Rect
    regions: Tuple[Region, ...]
    a_max: float = 1.0
    dt: float = 1.0
    v_max: float = 2.0
    _by_name: Dict[str, Region] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, 'regions', tuple(self.regions))
        if not self.a_max > 0:
            raise EnvironmentConfigError(f"a_max must be > 0, got {self.a_max}")
        if not self.dt > 0:
            raise EnvironmentConfigError(f"dt must be > 0, got {self.dt}")
        if not self.v_max > 0:
            raise EnvironmentConfigError(f"v_max must be > 0, got {self.v_max}")
        by_name: Dict[str, Region] = {}
        for region in self.regions:
            if not _NAME_PATTERN.match(region.name) or region.name in RESERVED_NAMES:
                raise EnvironmentConfigError(f"invalid region name {region.name!r}")
            if region.name in by_name:
                raise EnvironmentConfigError(f"duplicate region name {region.name!r}")
            if region.role not in REGION_ROLES:
                raise EnvironmentConfigError(
                    f"region {region.name!r} has role {region.role!r}; expected one of {REGION_ROLES}")
            if not self.workspace.contains(region.rect):
                raise EnvironmentConfigError(f"region {region.name!r} extends outside the workspace")
            by_name[region.name] = region
        object.__setattr__(self, '_by_name', by_name)

    @property
    def region_names(self) -> Tuple[str, ...]:
        return tuple(r.name for r in self.regions)

    @property
    def obstacles(self) -> Tuple[Region, ...]:
        return tuple(r for r in self.regions if r.role == 'obstacle')

    def region(self, name: str) -> Region:
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownRegionError(name, self.region_names) from None

    @classmethod
    def from_dict(cls, data: dict) -> 'EnvironmentSpec':
        version = data.get('format_version')
        if version != ENVIRONMENT_FORMAT_VERSION:
            raise SchemaVersionError('environment file', version, ENVIRONMENT_FORMAT_VERSION)
        unknown = set(data) - {'format_version', 'workspace', 'regions', 'a_max', 'dt', 'v_max'}
        if unknown:
            raise EnvironmentConfigError(f"unknown environment keys: {sorted(unknown)}")
        try:
            workspace = Rect(**data['workspace'])
            regions = []
            for name, table in data.get('regions', {}).items():
                table = dict(table)
                role = table.pop('role', 'goal')
                regions.append(Region(name=name, rect=Rect(**table), role=role))
        except (KeyError, TypeError) as e:
            raise EnvironmentConfigError(f"malformed environment description: {e}") from e
        return cls(workspace=workspace, regions=tuple(regions),
                   a_max=float(data.get('a_max', 1.0)), dt=float(data.get('dt', 1.0)),
                   v_max=float(data.get('v_max', 2.0)))

    def to_dict(self) -> dict:
        return {
            'format_version': ENVIRONMENT_FORMAT_VERSION,
            'workspace': self.workspace.to_dict(),
            'a_max': self.a_max,
            'dt': self.dt,
            'v_max': self.v_max,
            'regions': {r.name: dict(role=r.role, **r.rect.to_dict()) for r in self.regions},
        }

    @classmethod
    def load(cls, path: str) -> 'EnvironmentSpec':
        with open(path, 'r', encoding='utf-8') as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise EnvironmentConfigError(f"{path}: invalid JSON ({e})") from e
        env = cls.from_dict(data)
        logger.info(f"Loaded environment from {path} with regions {', '.join(env.region_names)}")
        return env


def default_environment() -> EnvironmentSpec:
    """Workspace [0,10]^2 with goals R1, R2, R3 and the obstacle O1 in the middle"""
    return EnvironmentSpec(
        workspace=Rect(0.0, 10.0, 0.0, 10.0),
        regions=(
            Region('R1', Rect(6.0, 8.0, 6.0, 8.0), 'goal'),
            Region('R2', Rect(1.0, 3.0, 6.0, 8.0), 'goal'),
            Region('R3', Rect(6.0, 8.0, 1.0, 3.0), 'goal'),
            Region('O1', Rect(4.0, 6.0, 4.0, 6.0), 'obstacle'),
        ),
    )


def _check_finite(what: str, values: Iterable[float]) -> None:
    if not all(math.isfinite(v) for v in values):
        raise NonFiniteInputError(f"{what} must be finite, got {tuple(values)}")


def clamp_action(a: Union[Action, Sequence[float]], env: EnvironmentSpec) -> Action:
    return Action(min(max(float(a[0]), -env.a_max), env.a_max),
                  min(max(float(a[1]), -env.a_max), env.a_max))


def step(x: Union[State, Sequence[float]], a: Union[Action, Sequence[float]], env: EnvironmentSpec) -> State:
    """
    Advance the double integrator by one step.

    The action is clamped to +/- a_max per axis, positions integrate exactly
    over dt and velocities are clamped to +/- v_max afterwards.
    """
    x = State(*(float(v) for v in x))
    _check_finite('state', x)
    _check_finite('action', (float(a[0]), float(a[1])))
    ax, ay = clamp_action(a, env)
    dt = env.dt
    return State(
        px=x.px + x.vx * dt + 0.5 * ax * dt * dt,
        py=x.py + x.vy * dt + 0.5 * ay * dt * dt,
        vx=min(max(x.vx + ax * dt, -env.v_max), env.v_max),
        vy=min(max(x.vy + ay * dt, -env.v_max), env.v_max),
    )


def simulate(x0: Union[State, Sequence[float]], actions: np.ndarray, env: EnvironmentSpec) -> np.ndarray:
    """Fold step over an action sequence; returns the (N+1, 4) state array"""
    actions = np.asarray(actions, dtype=np.float64)
    if actions.ndim != 2 or actions.shape[1] != ACTION_DIM:
        raise ShapeError(f"actions must have shape (N, 2), got {actions.shape}")
    states = np.empty((actions.shape[0] + 1, STATE_DIM), dtype=np.float64)
    states[0] = tuple(x0)
    for t, a in enumerate(actions):
        states[t + 1] = step(states[t], a, env)
    return states


def atom_margin(region_name: str, polarity: str, x: Union[State, Sequence[float]], env: EnvironmentSpec) -> float:
    """Signed rectangle margin of the position of x; positive iff the predicate holds"""
    return float(region_margins(env, region_name, polarity, np.asarray([tuple(x)], dtype=np.float64))[0])


def region_margins(env: EnvironmentSpec, region_name: str, polarity: str, states: np.ndarray) -> np.ndarray:
    """atom_margin for every row of a (T, 4) state array"""
    if polarity not in POLARITIES:
        raise ValueError(f"polarity must be one of {POLARITIES}, got {polarity!r}")
    rect = env.region(region_name).rect
    margin = rect.margin(states[:, 0], states[:, 1])
    return -margin if polarity == 'outside' else margin


def sample_initial_state(rng_seed, env: EnvironmentSpec, max_attempts: int = 10000) -> State:
    """
    Draw a start state: position uniform over the workspace minus obstacle
    interiors (rejection sampling), velocity uniform in [-0.5, 0.5] per axis.

    Args:
        rng_seed: integer seed or numpy Generator
        env: world description
        max_attempts: rejection budget

    Returns:
        The sampled State
    """
    rng = np.random.default_rng(rng_seed)
    ws = env.workspace
    for _ in range(max_attempts):
        px = float(rng.uniform(ws.xlo, ws.xhi))
        py = float(rng.uniform(ws.ylo, ws.yhi))
        if all(obstacle.rect.margin(px, py) <= 0 for obstacle in env.obstacles):
            break
    else:
        raise EnvironmentConfigError(
            f"could not sample a free initial position in {max_attempts} attempts; "
            f"obstacles cover the workspace")
    vx, vy = (float(v) for v in rng.uniform(-0.5, 0.5, size=2))
    return State(px, py, vx, vy)


@dataclass
class Trajectory:
    """N+1 states and the N actions between them"""

    states: np.ndarray
    actions: np.ndarray
    spec_id: str = ''
    robustness_at_generation: float = float('nan')

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if self.states.ndim != 2 or self.states.shape[1] != STATE_DIM:
            raise ShapeError(f"states must have shape (N+1, 4), got {self.states.shape}")
        if self.actions.ndim != 2 or self.actions.shape[1] != ACTION_DIM:
            raise ShapeError(f"actions must have shape (N, 2), got {self.actions.shape}")
        if self.states.shape[0] != self.actions.shape[0] + 1:
            raise ShapeError(
                f"trajectory has {self.states.shape[0]} states for {self.actions.shape[0]} actions")

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]

    def is_dynamics_consistent(self, env: EnvironmentSpec) -> bool:
        for t in range(self.horizon):
            if tuple(self.states[t + 1]) != step(self.states[t], self.actions[t], env):
                return False
        return True

    def max_abs_action(self) -> float:
        return float(np.max(np.abs(self.actions))) if self.actions.size else 0.0


def load_environment(path: Optional[str]) -> EnvironmentSpec:
    """Environment from a JSON file, or the built-in default world when path is None"""
    if path is None:
        return default_environment()
    if not os.path.exists(path):
        raise FileNotFoundError(f"environment file not found: {path}")
    return EnvironmentSpec.load(path)
