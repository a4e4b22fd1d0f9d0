"""Localhost testbed for centralized and decentralized federated learning algorithms."""

from fedbed.errors import (
    BindError,
    CallbackError,
    ClosedError,
    ConfigError,
    ConnectError,
    DecodeError,
    EncodeError,
    FedbedError,
    FrameError,
    HandshakeTimeout,
    LaunchError,
    ProtocolError,
    RecvTimeout,
    TraceFormatError,
    UsageError,
)
from fedbed.runtime import Node, NodeConfig

__version__ = "0.1.0"

__all__ = [
    "BindError",
    "CallbackError",
    "ClosedError",
    "ConfigError",
    "ConnectError",
    "DecodeError",
    "EncodeError",
    "FedbedError",
    "FrameError",
    "HandshakeTimeout",
    "LaunchError",
    "Node",
    "NodeConfig",
    "ProtocolError",
    "RecvTimeout",
    "TraceFormatError",
    "UsageError",
]
