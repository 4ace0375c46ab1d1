"""Exception hierarchy. ``category`` is the machine-parsable tag the CLI prints."""


class HandMIMError(Exception):
    category = "error"


class ConfigurationError(HandMIMError, ValueError):
    category = "config"


class NumericError(HandMIMError, ArithmeticError):
    category = "numeric"


class InvariantError(HandMIMError, ValueError):
    category = "invariant"


class BehindCameraError(HandMIMError, ValueError):
    category = "behind_camera"

    def __init__(self, joint_index: int, depth: float):
        super().__init__(f"joint {joint_index} has non-positive depth {depth:.6g}")
        self.joint_index = joint_index
        self.depth = depth


class InsufficientPointsError(HandMIMError, ValueError):
    category = "insufficient_points"


class IngestionError(HandMIMError, IOError):
    category = "ingestion"


class CheckpointError(HandMIMError, IOError):
    category = "checkpoint"


class MissingLabelsError(HandMIMError, ValueError):
    category = "missing_labels"
