"""Covert channels over IP fragmentation and path MTU discovery, and a warden for them.

Everything runs inside a deterministic simulated network; nothing touches a
real socket.
"""

from .errors import (
    CapacityError,
    ChannelExhausted,
    ConfigError,
    DecodeError,
    FragmentationError,
    NeedsData,
    OverstegError,
    PacketError,
)
from .fragcodecs import ChannelStats, Codec, Conventions, Method
from .fragmentation import FragmentSet, fragment, reassemble
from .netsim import Link, PathConfig, Simulator
from .packet import Packet, make_ipv4, make_ipv6, parse, serialize
from .scenarios import ChannelRun, run_channel

__version__ = "0.1.0"

__all__ = [
    "CapacityError",
    "ChannelExhausted",
    "ChannelRun",
    "ChannelStats",
    "Codec",
    "ConfigError",
    "Conventions",
    "DecodeError",
    "FragmentSet",
    "FragmentationError",
    "Link",
    "Method",
    "NeedsData",
    "OverstegError",
    "Packet",
    "PacketError",
    "PathConfig",
    "Simulator",
    "fragment",
    "make_ipv4",
    "make_ipv6",
    "parse",
    "reassemble",
    "run_channel",
    "serialize",
]
