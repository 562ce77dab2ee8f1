"""Exception hierarchy shared across the package."""


class AgoraError(Exception):
    """Base class for every error raised by agora."""


class ConfigError(AgoraError):
    pass


# pricing
class NonMonotone(AgoraError):
    pass


class BadBreakpoints(AgoraError):
    pass


class OutOfDomain(AgoraError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


# workload
class Malformed(AgoraError):
    def __init__(self, message, location=None):
        super().__init__(message)
        self.location = location


class EmptyTrace(AgoraError):
    pass


class BwExceedsGpu(AgoraError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class BadSpec(AgoraError):
    pass


class BadArgs(AgoraError):
    pass


# econ
class MissingTraceBinding(ConfigError):
    def __init__(self, job, gpu):
        super().__init__(f"job {job!r} has no trace bound for GPU {gpu!r}")
        self.job = job
        self.gpu = gpu


class LengthMismatch(AgoraError):
    pass


class EmptyInput(AgoraError):
    pass


# billing log / wire
class SealedError(AgoraError):
    """Raised when mutating a log that has already been sealed."""


class AuthFailure(AgoraError):
    pass


class FrameError(AgoraError):
    pass


class BadMagic(FrameError):
    pass


class BadVersion(FrameError):
    pass


class Truncated(FrameError):
    pass


class Oversize(FrameError):
    pass


# node / collector
class JournalFull(AgoraError):
    pass


class UnknownCustomer(AgoraError):
    pass
