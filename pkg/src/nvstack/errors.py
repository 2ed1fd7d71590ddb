"""Exception hierarchy shared by every layer of the runtime."""


class NVRamError(Exception):
    """Base class for all runtime errors."""


class ConfigError(NVRamError):
    pass


class CorruptImageError(NVRamError):
    pass


class BoundsError(NVRamError):
    pass


class OutOfMemoryError(NVRamError):
    pass


class FrameParseError(NVRamError):
    pass


class CorruptStackError(NVRamError):
    pass


class UninitializedStackError(NVRamError):
    pass


class StackOverflowError(NVRamError):
    pass


class StackUnderflowError(NVRamError):
    pass


class DispatchError(NVRamError):
    pass


class RecoveryError(NVRamError):
    """One or more recovery workers aborted; ``failures`` maps stack index to the cause."""

    def __init__(self, failures):
        self.failures = dict(failures)
        detail = "; ".join(f"stack {i}: {exc}" for i, exc in sorted(self.failures.items()))
        super().__init__(f"recovery aborted: {detail}")


class SimulatedCrash(BaseException):
    """Raised at an injected crash point.

    Derives from BaseException so application code catching ``Exception``
    cannot swallow a crash and keep running on state that no longer exists.
    """
