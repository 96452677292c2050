"""Exception types raised across the simulator."""


class TzError(Exception):
    """Base class for every simulator error."""


# processor / monitor
class PrivilegeViolation(TzError):
    pass


class UnknownSmcId(TzError):
    pass


class UnknownIrq(TzError):
    pass


class InvariantViolation(TzError):
    """An internal audit hook found inconsistent processor state."""


# memory fabric
class OverlapError(TzError):
    pass


class AccessDenied(TzError):
    def __init__(self, world, addr, length, kind):
        self.world = world
        self.addr = addr
        self.length = length
        self.kind = kind
        super().__init__(
            f"{kind} of {length} bytes at {addr:#x} denied for {world} world")


class UnmappedAddress(TzError):
    pass


class AlignmentError(TzError):
    pass


class UnknownDevice(TzError):
    pass


# device tree
class DtsSyntaxError(TzError, ValueError):
    def __init__(self, message, line):
        self.line = line
        super().__init__(f"line {line}: {message}")


class DuplicateNodeName(TzError, ValueError):
    pass


# boot
class MalformedKey(TzError, ValueError):
    pass


class IntegrityError(TzError):
    def __init__(self, stage, detail):
        self.stage = stage
        self.detail = detail
        super().__init__(f"{stage}: {detail}")


class ImageFormatError(TzError, ValueError):
    pass


# I2S device
class DeviceBusy(TzError):
    pass


class SourceExhausted(TzError):
    pass


# drivers
class BootRequired(TzError):
    pass


class RegionNotSecure(TzError):
    pass


class UseAfterCleanup(BootRequired):
    """Raised when a released driver or mapping is used again."""


class Overrun(TzError):
    pass


class DmaFault(TzError):
    pass


class CaptureTimeout(TzError):
    """The device produced no frame within the polling budget (clock gated)."""


class EmptyTable(TzError, ValueError):
    pass


# TEE runtime
class UnknownUuid(TzError):
    pass


class SessionClosed(TzError):
    pass


class BadParamRange(TzError):
    pass


class UnknownCommand(TzError):
    pass


class HukUnavailable(TzError):
    pass


class BadNonceReuse(TzError):
    pass


class TagMismatch(TzError):
    pass


# relay / cloud
class RelayError(TzError):
    pass


class ConnectError(RelayError):
    pass


class AckMismatch(RelayError):
    pass


class RelayTimeout(RelayError):
    pass


class BindError(RelayError):
    pass


class FrameError(RelayError, ValueError):
    """Malformed wire frame (bad magic, version, type or length)."""
