"""Exception hierarchy shared by every oversteg module."""

from __future__ import annotations


class OverstegError(Exception):
    """Base class for all library errors."""


# packet model


class PacketError(OverstegError):
    pass


class ParseError(PacketError):
    pass


class TruncationError(ParseError):
    pass


class VersionError(ParseError):
    pass


class MalformedError(ParseError):
    """Structurally inconsistent bytes (bad IHL, trailing data, ...)."""


class OversizeError(PacketError):
    pass


# fragmentation


class FragmentationError(OverstegError):
    pass


class DfViolation(FragmentationError):
    pass


class PlanError(FragmentationError):
    pass


class IncompleteError(FragmentationError):
    """Reassembly found holes; ``missing`` lists byte ranges ``(start, end)``.

    ``end`` is ``None`` when the final fragment was never seen.
    """

    def __init__(self, message: str, missing: list[tuple[int, int | None]]):
        super().__init__(message)
        self.missing = missing


class OverlapError(FragmentationError):
    pass


# channels


class CapacityError(OverstegError):
    pass


class DecodeError(OverstegError):
    pass


class ChannelExhausted(OverstegError):
    pass


class ConfigError(OverstegError):
    pass


class NeedsData(OverstegError):
    pass
