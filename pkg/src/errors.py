"""
Exception hierarchy for the PASTEL planner.

Every error carries a short machine-parseable category and the exit code the
CLI reports for it. Domain errors also derive from the closest builtin
(ValueError or RuntimeError).
"""

from typing import Optional


class PastelError(Exception):
    """Base class for all planner errors"""

    category = 'internal'
    exit_code = 1


class ConfigError(PastelError, ValueError):
    """Invalid or inconsistent configuration"""

    category = 'config'
    exit_code = 6


class SchemaVersionError(PastelError, ValueError):
    """A versioned file has a format_version this build cannot read"""

    category = 'schema-version'
    exit_code = 4

    def __init__(self, what: str, found, expected):
        super().__init__(f"{what}: format_version {found!r} is not supported (expected {expected!r})")
        self.found = found
        self.expected = expected


class EnvironmentConfigError(ConfigError):
    """Environment file violates its schema or invariants"""


class SpecificationError(PastelError, ValueError):
    """Anything wrong with an STL specification or its evaluation inputs"""

    category = 'spec'
    exit_code = 5


class STLSyntaxError(SpecificationError):
    """Specification text does not follow the grammar"""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnknownOperatorError(STLSyntaxError):
    """An operator keyword or character the grammar does not define"""


class IntervalError(STLSyntaxError):
    """Malformed temporal interval (negative, non-integer or hi < lo)"""


class SignalTooShortError(SpecificationError):
    """Signal does not cover the formula horizon from the evaluation time"""

    def __init__(self, required: int, available: int):
        super().__init__(f"signal too short: need {required} samples, have {available}")
        self.required = required
        self.available = available


class VocabularyError(SpecificationError):
    """Token outside the fixed vocabulary (or interval bound above H_max)"""


class ShapeError(PastelError, ValueError):
    """Operand shapes are incompatible for a tensor operation"""

    category = 'shape'
    exit_code = 12


class GradientCheckError(PastelError, ValueError):
    """grad_check was asked to differentiate a non-scalar function"""

    category = 'shape'
    exit_code = 12


class DatasetVerificationError(PastelError, ValueError):
    """A dataset record failed the independent audit"""

    category = 'verification'
    exit_code = 7

    def __init__(self, message: str, failures: Optional[list] = None):
        super().__init__(message)
        self.failures = failures or []


class DatasetGenerationError(PastelError, RuntimeError):
    """Oracle success rate fell below the configured floor"""

    category = 'generation'
    exit_code = 11


class HorizonError(PastelError, ValueError):
    """Trajectory horizon incompatible with the batch or the model capacity"""

    category = 'spec'
    exit_code = 5


class RolloutError(PastelError, RuntimeError):
    """Model produced a non-finite prediction during rollout"""

    category = 'rollout'
    exit_code = 10

    def __init__(self, step: int, message: str = 'non-finite prediction'):
        super().__init__(f"{message} at step {step}")
        self.step = step


class TrainingDivergedError(PastelError, RuntimeError):
    """Loss became NaN or infinite"""

    category = 'diverged'
    exit_code = 8


class EmptySplitError(PastelError, ValueError):
    """Loss evaluation requested on a split with no trajectories"""

    category = 'verification'
    exit_code = 7


class IncompatibleCheckpointError(PastelError, ValueError):
    """Checkpoint config or vocabulary does not match the data it is used with"""

    category = 'checkpoint'
    exit_code = 9


class UnknownRegionError(SpecificationError):
    """Formula names a region the environment does not define"""

    def __init__(self, name: str, known=()):
        known_text = ', '.join(known) if known else 'none'
        super().__init__(f"unknown region {name!r} (known: {known_text})")
        self.name = name


class NonFiniteInputError(PastelError, ValueError):
    """State or action contains NaN or infinity"""

    category = 'rollout'
    exit_code = 10
