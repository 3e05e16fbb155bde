"""Worked examples used by the tests, the CLI and the docs."""

from __future__ import annotations

from .fragmentation import FragmentSet, fragment
from .netsim import Link, PathConfig
from .packet import Packet, make_ipv4

WORKED_TOTAL = 5140
WORKED_MTU = 1500
WORKED_ID = 0x1C46
PARITY_PLAN = (1280, 1320, 1320, 1200)
TUNNEL_OVERHEAD = 58
TUNNEL_PMTU = 942


def worked_packet(identification: int = WORKED_ID) -> Packet:
    """5140-byte UDP datagram (5120 bytes of payload) with a recognisable pattern."""
    payload = bytes(i % 251 for i in range(WORKED_TOTAL - 20))
    return make_ipv4(payload, identification=identification)


def worked_fragments() -> FragmentSet:
    return fragment(worked_packet(), WORKED_MTU)


def parity_fragments() -> FragmentSet:
    """The offset-parity example: payloads 1280/1320/1320/1200, offsets 0/160/325/490."""
    return fragment(worked_packet(), WORKED_MTU, PARITY_PLAN)


def tunnel_path() -> PathConfig:
    """Four-link path whose PMTUD run goes 1500, 1442 (ICMP lost, timeout), 1442, 942.

    Link 1 is a tunnel whose 58 bytes of encapsulation leave 1442; its ICMP is
    filtered once.  Link 2 is a 1000-byte link inside the same tunnel (942).
    """
    return PathConfig(
        [
            Link(1500),
            Link(1500, overhead=TUNNEL_OVERHEAD, filters_icmp=True, icmp_filter_limit=1),
            Link(1000, overhead=TUNNEL_OVERHEAD),
            Link(1500),
        ]
    )


def ladder_path() -> PathConfig:
    """Three-link path with a 1072-byte bottleneck for the covert probe ladder."""
    return PathConfig([Link(1500), Link(1072), Link(1500)])
