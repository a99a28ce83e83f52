"""
Errors
Exception hierarchy shared by every module; each error carries a stable code
"""


class NspError(Exception):
    """Base class for all errors raised by the package"""

    code = "NspError"
    exit_code = 1

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)
        self.message = message or self.code


# Window validation

class WindowValidationError(NspError):
    code = "InvalidWindow"


class WrongFrameCountError(WindowValidationError):
    code = "WrongFrameCount"


class NonFiniteValueError(WindowValidationError):
    code = "NonFiniteValue"


class GoalMismatchError(WindowValidationError):
    code = "GoalMismatch"


class NonUniformFramesError(WindowValidationError):
    code = "NonUniformFrames"


# Forces and integration

class DegenerateForceError(NspError):
    """Force undefined at the given configuration; rollout substitutes zero"""

    code = "DegenerateForce"


class CoincidentAgentsError(DegenerateForceError):
    code = "CoincidentAgents"


class CoincidentObstacleError(DegenerateForceError):
    code = "CoincidentObstacle"


class TimeExhaustedError(NspError):
    code = "TimeExhausted"


class NonPositiveTauError(NspError):
    code = "NonPositiveTau"


class NonFiniteInputError(NspError):
    code = "NonFiniteInput"


class MissingOracleError(NspError):
    code = "MissingOracle"


# Autodiff and networks

class ShapeMismatchError(NspError):
    code = "ShapeMismatch"


class NonScalarOutputError(NspError):
    code = "NonScalarOutput"


class UninitializedStateError(NspError):
    code = "UninitializedState"


class NonFiniteLossError(NspError):
    code = "NonFiniteLoss"


# Files

class ParseError(NspError):
    code = "ParseError"

    def __init__(self, message: str, line: int = 0):
        prefix = f"line {line}: " if line else ""
        super().__init__(prefix + message)
        self.line = line


class NonMonotoneFramesError(NspError):
    code = "NonMonotoneFrames"


class InvalidLabelError(NspError):
    code = "InvalidLabel"


class SingularHomographyError(NspError):
    code = "SingularHomography"


class DegenerateProjectionError(NspError):
    code = "DegenerateProjection"


class CheckpointError(NspError):
    code = "CheckpointError"


# Evaluation

class EmptySampleSetError(NspError):
    code = "EmptySampleSet"


class TooFewAgentsError(NspError):
    code = "TooFewAgents"


class InfeasibleSceneError(NspError):
    code = "InfeasibleScene"


# Command line

class UsageError(NspError):
    code = "UsageError"
    exit_code = 2


class IoError(NspError):
    code = "IoError"
    exit_code = 3


class ConfigError(NspError):
    code = "ConfigError"
    exit_code = 4
