"""Exception hierarchy shared by every module."""


class GraphPoseError(Exception):
    """Base class for all package errors."""


class ContractError(GraphPoseError, ValueError):
    """Inputs violate an operation's shape or structural contract."""


class BehindCameraError(GraphPoseError, ValueError):
    pass


class DegenerateRigError(GraphPoseError, ValueError):
    pass


class InsufficientViewsError(GraphPoseError, ValueError):
    pass


class IllConditionedError(GraphPoseError, ValueError):
    pass


class PlacementError(GraphPoseError, RuntimeError):
    """Scene generation could not place persons without collisions."""


class OutOfBoundsError(GraphPoseError, ValueError):
    pass


class TrainingDivergedError(GraphPoseError, FloatingPointError):
    """Non-finite loss or gradient encountered during training."""


class ConfigError(GraphPoseError, ValueError):
    pass
