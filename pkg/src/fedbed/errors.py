"""Exception hierarchy shared by every layer of the testbed."""


class FedbedError(Exception):
    pass


class EncodeError(FedbedError):
    pass


class DecodeError(FedbedError):
    pass


class FrameError(DecodeError):
    """The byte sequence is not one complete frame."""


class ProtocolError(FedbedError):
    pass


class ConfigError(FedbedError, ValueError):
    pass


class UsageError(FedbedError):
    pass


class BindError(FedbedError):
    pass


class ConnectError(FedbedError):
    def __init__(self, message, failed=()):
        super().__init__(message)
        self.failed = tuple(failed)


class ClosedError(FedbedError):
    pass


class RecvTimeout(FedbedError, TimeoutError):
    pass


class HandshakeTimeout(RecvTimeout):
    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = tuple(missing)


class CallbackError(FedbedError):
    pass


class LaunchError(FedbedError):
    pass


class TraceFormatError(FedbedError, ValueError):
    pass
