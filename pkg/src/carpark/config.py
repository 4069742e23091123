"""Environment parameter schema, parsing, and validation.

Parameter names follow the environment's native config vocabulary verbatim
(including the leading-underscore names), so config files written for one
toolchain stay readable in the other. Distances are expressed in three
scales: world units, velocity-grid quanta, and MDP units (world units times
2^_positionGranularity); each field notes its scale where it matters.
"""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass, field, fields

import yaml

from .geometry import GridSpec
from .world import RingSpec

_RD_PATTERN = re.compile(r"^_rd(\d+)$")


@dataclass
class EnvironmentConfig:
    # grid granularities
    _positionGranularity: int = 1
    _velocityGranularity: int = 1
    _thetaGranularity: int = 8
    # motion bounds, in velocity-grid quanta / rotation indices
    _maxVelocityMagnitude: int = 1
    _minVelocityMagnitude: int = 1  # reverse speed bound
    _maxDeltaVMagnitude: int = 1
    _minDeltaVMagnitude: int | None = None  # deceleration bound; None tracks max
    _maxDeltaThetaMagnitude: int = 1
    _numAgents: int = 1
    _normalizeObs: bool = False
    _debugObs: bool = False
    _visualiseNearbyCars: bool = False
    _numParkedCars: int = 0
    # observation features
    _obsDist: bool = False
    _obsAngle: bool = True
    _obsRings: bool = False
    _ringMaxNumObjTrack: int = 0
    ringDiams: list[int] = field(default_factory=list)
    _obsGoalDeltaPose: bool = False
    _ringNumPrevObs: int = 0
    _ringOnlyWall: bool = False
    _obsNearbyCars: bool = False
    _obsNearbyCarsCount: int = 0
    _obsNearbyCarsDiameter: int = 0
    _obsNearbyCarsGoal: bool = False
    _obsNearbyCarsVelocity: bool = False
    _distGranularity: float = 1.0  # local-pose distance bucket, world units
    # spawning
    spawnCloseRatio: float = 0.0
    _spawnCloseDist: int = 10  # world units
    carSpawnMinDistance: int = 9  # MDP units
    spawnCrashRatio: float = 0.0
    spawnCrashTargetAgentMinDist: float = 10.0  # MDP units
    _maxSteps: int = 85
    # dynamic goals
    _dynamicGoals: bool = False
    _obsNearbyParkingSpotsCount: int = 0
    rewDeltaGoalContinueExp: float = 0.0
    rewDeltaGoalStopExp: float = 0.0
    rewDeltaGoalContinueGoal: float = 0.0
    rewDeltaGoalDiffGoal: float = 0.0
    _rewDeltaGoalStopGoal: float = 0.0  # -1 means: mirror rewDeltaGoalDiffGoal
    rewDeltaGoalContinueGoalBetterOtherAgent: float = 0.0
    # rewards
    rewReachGoal: float = 10.0
    rewCrash: float = 10.0
    rewTimeSum: float = 0.5
    rewReverseSum: float = 0.0
    rewDistSum: float = 1.0
    rewFinalVelocitySum: float = 0.0
    rewDeltaThetaSum: float = 0.0
    _rewDeltaThetaVelMult: bool = False
    # give-way conformity observations and schemes
    _obsParkingSpotClosestAgent: bool = False
    _obsParkingSpotClosestGoalAgent: bool = False
    _punishBetterOtherAgentLocal: bool = False  # local scheme if set, else global
    _punishBetterOtherGoalAgent: bool = False  # same-goal scheme if set, else any-goal
    # training-time knobs
    _numStepsTrain: int = 0
    carScaleTrain: float = 1.0
    # grid-search redundancy marker; carried but never read by the env
    try_: int = 0

    # ------------------------------------------------------------- derived

    def grid(self, base_extent: int = 74) -> GridSpec:
        return GridSpec(
            base_extent=base_extent,
            position_granularity=self._positionGranularity,
            velocity_granularity=self._velocityGranularity,
            theta_granularity=self._thetaGranularity,
        )

    def ring_spec(self) -> RingSpec | None:
        if not self._obsRings:
            return None
        return RingSpec(
            diameters=tuple(float(d) for d in self.ringDiams),
            max_count=self._ringMaxNumObjTrack,
            history_len=self._ringNumPrevObs,
            walls_only=self._ringOnlyWall,
        )

    @property
    def max_reverse_accel(self) -> int:
        return (
            self._maxDeltaVMagnitude
            if self._minDeltaVMagnitude is None
            else self._minDeltaVMagnitude
        )

    @property
    def stop_goal_reward(self) -> float:
        if self._rewDeltaGoalStopGoal == -1.0:
            return self.rewDeltaGoalDiffGoal
        return self._rewDeltaGoalStopGoal

    def mdp_to_world(self, value: float) -> float:
        """MDP-unit distances divide by the position subdivisions per unit."""
        return value / (1 << self._positionGranularity)

    def to_mapping(self) -> dict:
        out = {}
        for f in fields(self):
            name = "try" if f.name == "try_" else f.name
            out[name] = getattr(self, f.name)
        return out

    # ----------------------------------------------------------- validation

    def validate(self) -> None:
        if self._thetaGranularity < 1 or 360 % self._thetaGranularity != 0:
            raise ValueError(
                f"_thetaGranularity: {self._thetaGranularity} does not divide 360"
            )
        if self._positionGranularity < 0:
            raise ValueError("_positionGranularity: must be >= 0")
        if self._velocityGranularity < 1:
            raise ValueError("_velocityGranularity: must be >= 1")
        for name in (
            "_maxVelocityMagnitude",
            "_minVelocityMagnitude",
            "_maxDeltaVMagnitude",
            "_maxDeltaThetaMagnitude",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name}: must be >= 0")
        if self._minDeltaVMagnitude is not None and self._minDeltaVMagnitude < 0:
            raise ValueError("_minDeltaVMagnitude: must be >= 0")
        if self._numAgents < 1:
            raise ValueError("_numAgents: must be >= 1")
        if self._numParkedCars < 0:
            raise ValueError("_numParkedCars: must be >= 0")
        if self._maxSteps < 1:
            raise ValueError("_maxSteps: must be >= 1")
        if self._obsRings != bool(self.ringDiams):
            raise ValueError(
                "ringDiams: must be non-empty exactly when _obsRings is set"
            )
        for name in ("spawnCloseRatio", "spawnCrashRatio"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}: must lie in [0, 1]")
        if self._distGranularity <= 0.0:
            raise ValueError("_distGranularity: must be > 0")
        if self.carScaleTrain <= 0.0:
            raise ValueError("carScaleTrain: must be > 0")


_BOOL_WORDS = {"true": True, "false": False}


def _coerce(name: str, kind: str, value):
    """Coerce a parsed value to the field's table type; strings are accepted
    since parameters historically travel as serialized text."""
    if kind == "bool":
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in _BOOL_WORDS:
            return _BOOL_WORDS[value.lower()]
    elif kind == "int":
        if isinstance(value, bool):
            pass  # bools are ints in Python; reject explicitly
        elif isinstance(value, int):
            return value
        elif isinstance(value, float) and value.is_integer():
            return int(value)
        elif isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
    elif kind == "float":
        if isinstance(value, bool):
            pass
        elif isinstance(value, (int, float)):
            return float(value)
        elif isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
    elif kind == "int_list":
        if isinstance(value, (list, tuple)):
            out = []
            for i, item in enumerate(value):
                out.append(_coerce(f"{name}[{i}]", "int", item))
            return out
    raise TypeError(f"{name}: expected {kind}, got {value!r}")


def _field_kinds() -> dict[str, str]:
    kinds = {}
    for f in fields(EnvironmentConfig):
        name = "try" if f.name == "try_" else f.name
        if f.type == "bool":
            kinds[name] = "bool"
        elif f.type in ("int", "int | None"):
            kinds[name] = "int"
        elif f.type == "float":
            kinds[name] = "float"
        elif f.type == "list[int]":
            kinds[name] = "int_list"
        else:  # pragma: no cover - schema definition error
            raise AssertionError(f"unmapped field type {f.type} on {f.name}")
    return kinds


_KINDS = _field_kinds()


def config_from_mapping(doc: dict) -> EnvironmentConfig:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise TypeError(f"environment parameters: expected a mapping, got {type(doc).__name__}")
    cfg = EnvironmentConfig()
    ring_overrides: dict[int, int] = {}
    for key, value in doc.items():
        m = _RD_PATTERN.match(str(key))
        if m:
            ring_overrides[int(m.group(1))] = _coerce(key, "int", value)
            continue
        if key not in _KINDS:
            raise ValueError(f"unknown environment parameter: {key}")
        attr = "try_" if key == "try" else key
        setattr(cfg, attr, _coerce(key, _KINDS[key], value))
    diams = list(cfg.ringDiams)
    for idx in sorted(ring_overrides):
        if idx < len(diams):
            diams[idx] = ring_overrides[idx]
        elif idx == len(diams):
            diams.append(ring_overrides[idx])
        else:
            raise ValueError(
                f"_rd{idx}: leaves a gap (only {len(diams)} ring diameters so far)"
            )
    cfg.ringDiams = diams
    if cfg._minDeltaVMagnitude is None:
        cfg._minDeltaVMagnitude = cfg._maxDeltaVMagnitude
    cfg.validate()
    _warn_soft_constraints(cfg)
    return cfg


def load_config(text: str) -> EnvironmentConfig:
    """Parse a YAML/JSON document of environment parameters."""
    return config_from_mapping(yaml.safe_load(text))


def load_config_file(path: str) -> EnvironmentConfig:
    with open(path, encoding="utf-8") as f:
        return load_config(f.read())


def _warn_soft_constraints(cfg: EnvironmentConfig, num_spaces: int = 36) -> None:
    if cfg._numParkedCars >= num_spaces:
        warnings.warn(
            f"_numParkedCars={cfg._numParkedCars} leaves no free space in a "
            f"{num_spaces}-space arena; goals cannot be assigned",
            stacklevel=3,
        )
    if cfg._dynamicGoals:
        if cfg.rewDeltaGoalContinueExp > 0 or cfg.rewDeltaGoalDiffGoal > 0:
            warnings.warn(
                "goal-transition rewards for continue-explore and change-goal "
                "are expected to be punishments (<= 0)",
                stacklevel=3,
            )
    # per-step move-toward-goal reward must stay below the time punishment,
    # otherwise circling toward the goal out-earns finishing
    if cfg.rewDistSum > 0 and cfg.rewDistSum >= cfg.rewTimeSum:
        warnings.warn(
            f"rewDistSum={cfg.rewDistSum} >= rewTimeSum={cfg.rewTimeSum}: "
            "per-step movement reward should be smaller than the time "
            "punishment or roundabout paths become optimal",
            stacklevel=3,
        )


def config_signature(cfg: EnvironmentConfig) -> dict:
    """Mapping used to check model/environment compatibility on reload."""
    keys = (
        "_positionGranularity",
        "_velocityGranularity",
        "_thetaGranularity",
        "_maxVelocityMagnitude",
        "_minVelocityMagnitude",
        "_maxDeltaVMagnitude",
        "_minDeltaVMagnitude",
        "_maxDeltaThetaMagnitude",
        "_normalizeObs",
        "_obsDist",
        "_obsAngle",
        "_obsRings",
        "_ringMaxNumObjTrack",
        "ringDiams",
        "_obsGoalDeltaPose",
        "_ringNumPrevObs",
        "_obsNearbyCars",
        "_obsNearbyCarsCount",
        "_obsNearbyCarsGoal",
        "_obsNearbyCarsVelocity",
        "_obsNearbyParkingSpotsCount",
        "_obsParkingSpotClosestAgent",
        "_obsParkingSpotClosestGoalAgent",
        "_dynamicGoals",
        "_distGranularity",
    )
    return {k: getattr(cfg, k) for k in keys}


def max_world_distance(extent: int = 74) -> float:
    return math.hypot(extent, extent)
