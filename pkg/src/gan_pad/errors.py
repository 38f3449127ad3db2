"""Exception hierarchy shared by all modules."""


class GanPadError(Exception):
    """Base class for every error raised by this package."""


class InvalidParams(GanPadError, ValueError):
    pass


class IoError(GanPadError, OSError):
    pass


class LayoutError(GanPadError):
    pass


class DecodeError(GanPadError):
    def __init__(self, path, reason=""):
        self.path = str(path)
        msg = f"cannot decode image {self.path}"
        super().__init__(f"{msg}: {reason}" if reason else msg)


class EmptyImage(GanPadError):
    pass


class TooSmall(GanPadError):
    pass


class ManifestMismatch(GanPadError):
    def __init__(self, message, tensor=None):
        self.tensor = tensor
        super().__init__(message)


class ShapeMismatch(GanPadError):
    pass


class ModeError(GanPadError):
    pass


class DomainError(GanPadError, ValueError):
    pass


class NonFiniteLoss(GanPadError, ArithmeticError):
    def __init__(self, iteration, losses):
        self.iteration = iteration
        self.losses = dict(losses)
        super().__init__(f"non-finite loss at iteration {iteration}: {self.losses}")


class InsufficientData(GanPadError):
    pass


class MissingClass(GanPadError):
    pass


class EmptyValSet(GanPadError):
    pass
