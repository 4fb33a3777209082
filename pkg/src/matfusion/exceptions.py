class MatFusionError(Exception):
    """Base class for errors raised by matfusion."""


class TrackingError(MatFusionError):
    pass


class InsufficientCorrespondences(TrackingError):
    """Too few ICP correspondences survived rejection; tracking is lost."""


class SingularSystem(TrackingError):
    """The point-to-plane normal equations are degenerate (e.g. one plane in view)."""


class ImageTooLarge(MatFusionError, ValueError):
    pass


class InvalidUnary(MatFusionError, ValueError):
    pass


class GridMismatch(MatFusionError, ValueError):
    pass


class EmptyModel(MatFusionError, ValueError):
    pass


class UnknownMaterial(MatFusionError, KeyError):
    pass


class LengthMismatch(MatFusionError, ValueError):
    pass


class StageError(MatFusionError):
    """A pipeline stage failed; ``stage`` names it.

    ``exit_code`` follows the CLI convention: 2 config, 3 tracking loss, 4 I/O.
    """

    def __init__(self, stage: str, message: str, exit_code: int = 2):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.exit_code = exit_code
