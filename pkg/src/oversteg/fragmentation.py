"""IP fragmentation and reassembly for both IP versions.

A *plan* is a sequence of per-fragment payload lengths.  Codecs express their
steganographic choices as plans and let :func:`fragment` do the header
bookkeeping (offsets, MF flags, lengths, checksums).
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, replace

from .errors import DfViolation, FragmentationError, IncompleteError, OverlapError, PlanError
from .packet import (
    IPV4_HEADER_LEN,
    IPV6_FRAG_HEADER_LEN,
    IPV6_HEADER_LEN,
    IPV6_NEXT_FRAGMENT,
    MAX_OFFSET_UNITS,
    Ipv4Header,
    Ipv6FragmentHeader,
    Packet,
)

FragPlan = Sequence[int]


@dataclass(frozen=True)
class FragmentSet:
    identification: int | None
    fragments: tuple[Packet, ...]
    origin_total_length: int

    def __iter__(self):
        return iter(self.fragments)

    def __len__(self) -> int:
        return len(self.fragments)

    def __getitem__(self, i):
        return self.fragments[i]

    @property
    def offsets(self) -> list[int]:
        return [f.offset for f in self.fragments]

    @property
    def total_lengths(self) -> list[int]:
        return [f.total_length for f in self.fragments]


def fragment_header_len(p: Packet) -> int:
    """Per-fragment header overhead: 20 (IPv4) or 40 + 8 (IPv6 + Fragment header)."""
    return IPV4_HEADER_LEN if p.version == 4 else IPV6_HEADER_LEN + IPV6_FRAG_HEADER_LEN


def max_fragment_payload(p: Packet, mtu: int) -> int:
    """Largest multiple-of-8 payload a non-last fragment may carry under ``mtu``."""
    return (mtu - fragment_header_len(p)) // 8 * 8


def min_fragment_count(payload_len: int, max_payload: int) -> int:
    return max(1, math.ceil(payload_len / max_payload))


def default_plan(payload_len: int, max_payload: int) -> list[int]:
    """Maximal fill: every fragment but the last carries ``max_payload`` bytes."""
    if payload_len <= max_payload:
        return [payload_len]
    full, rest = divmod(payload_len, max_payload)
    return [max_payload] * full + ([rest] if rest else [])


def make_fragment(
    p: Packet, offset_units: int, data: bytes, more: bool, identification: int | None = None
) -> Packet:
    """One fragment of ``p`` carrying ``data`` at ``offset_units`` (8-byte units)."""
    if not 0 <= offset_units <= MAX_OFFSET_UNITS:
        raise PlanError(f"fragment offset {offset_units} does not fit in 13 bits")
    h = p.header
    if isinstance(h, Ipv4Header):
        ident = h.identification if identification is None else identification
        return Packet(
            replace(
                h,
                total_length=IPV4_HEADER_LEN + len(data),
                identification=ident,
                flag_mf=int(more),
                fragment_offset=offset_units,
            ),
            data,
        )
    old = h.fragment
    if identification is None:
        identification = old.identification if old else 0
    fh = Ipv6FragmentHeader(
        next_header=old.next_header if old else h.next_header,
        fragment_offset=offset_units,
        flag_m=int(more),
        identification=identification,
    )
    return Packet(
        replace(
            h,
            next_header=IPV6_NEXT_FRAGMENT,
            payload_length=IPV6_FRAG_HEADER_LEN + len(data),
            fragment=fh,
        ),
        data,
    )


def fragment(
    p: Packet, mtu: int, plan: FragPlan | None = None, identification: int | None = None
) -> FragmentSet:
    """Split ``p`` into fragments no larger than ``mtu``.

    With no ``plan`` the maximal-fill layout is used and a packet that already
    fits is returned untouched.  ``identification`` is only needed for IPv6
    packets that do not yet carry a Fragment header.

    Raises:
        DfViolation: ``p`` has DF set but would have to be split.
        PlanError: ``plan`` does not tile the payload or breaks the MTU.
    """
    payload_len = len(p.payload)
    hdr = fragment_header_len(p)
    ident = p.identification if identification is None else identification
    if plan is None:
        if p.total_length <= mtu:
            return FragmentSet(ident, (p,), p.total_length)
        max_payload = max_fragment_payload(p, mtu)
        if max_payload < 8:
            raise PlanError(f"MTU {mtu} cannot carry a fragment")
        plan = default_plan(payload_len, max_payload)
    plan = list(plan)
    _check_plan(plan, payload_len, hdr, mtu)
    if len(plan) == 1:
        if p.total_length > mtu:
            raise PlanError(f"one-piece plan leaves a {p.total_length}-byte packet over MTU {mtu}")
        return FragmentSet(ident, (p,), p.total_length)
    if p.version == 4 and p.df:
        raise DfViolation(f"DF set on {p.total_length}-byte packet, MTU {mtu}")

    base_units, base_more = p.offset, p.mf
    frags = []
    pos = 0
    for i, size in enumerate(plan):
        last = i == len(plan) - 1
        frags.append(
            make_fragment(p, base_units + pos // 8, p.payload[pos : pos + size], base_more or not last, ident)
        )
        pos += size
    return FragmentSet(ident, tuple(frags), p.total_length)


def _check_plan(plan: list[int], payload_len: int, hdr: int, mtu: int) -> None:
    if not plan:
        raise PlanError("empty plan")
    if sum(plan) != payload_len:
        raise PlanError(f"plan covers {sum(plan)} bytes, payload has {payload_len}")
    for i, size in enumerate(plan):
        if size <= 0 and not (len(plan) == 1 and payload_len == 0):
            raise PlanError(f"fragment {i} has non-positive size {size}")
        if i < len(plan) - 1 and size % 8:
            raise PlanError(f"non-last fragment {i} size {size} is not a multiple of 8")
        if len(plan) > 1 and hdr + size > mtu:
            raise PlanError(f"fragment {i} ({hdr + size} bytes) exceeds MTU {mtu}")


def _same_key(fragments: Sequence[Packet]) -> None:
    key = fragments[0].reassembly_key
    for f in fragments[1:]:
        if f.reassembly_key != key:
            raise FragmentationError(f"mixed reassembly keys {key} / {f.reassembly_key}")


def _lay_out(fragments: Sequence[Packet]) -> tuple[int | None, bytearray, bytearray]:
    """Place fragment data into a buffer, checking every overlap for byte equality.

    Returns ``(end, buffer, coverage)`` where ``end`` is the original payload
    length if a final fragment was seen.
    """
    ends = {f.byte_offset + len(f.payload) for f in fragments if not f.mf}
    if len(ends) > 1:
        raise OverlapError(f"conflicting final fragments ending at {sorted(ends)}")
    end = ends.pop() if ends else None
    size = max(f.byte_offset + len(f.payload) for f in fragments)
    if end is not None and size > end:
        raise OverlapError(f"data beyond the final fragment ({size} > {end})")
    buf = bytearray(size)
    cov = bytearray(size)
    for f in sorted(fragments, key=lambda f: f.byte_offset):
        s, e = f.byte_offset, f.byte_offset + len(f.payload)
        if 1 in cov[s:e]:
            for i in range(s, e):
                if cov[i] and buf[i] != f.payload[i - s]:
                    raise OverlapError(f"fragments disagree at byte {i}")
        buf[s:e] = f.payload
        cov[s:e] = b"\x01" * (e - s)
    return end, buf, cov


def _holes(cov: bytearray, end: int) -> list[tuple[int, int]]:
    holes = []
    i = cov.find(0, 0, end)
    while i != -1:
        j = cov.find(1, i, end)
        j = end if j == -1 else j
        holes.append((i, j))
        i = cov.find(0, j, end)
    return holes


def _rebuild(first: Packet, payload: bytes) -> Packet:
    h = first.header
    if isinstance(h, Ipv4Header):
        return Packet(
            replace(h, total_length=IPV4_HEADER_LEN + len(payload), flag_mf=0, fragment_offset=0),
            payload,
        )
    if h.fragment is None:
        return Packet(replace(h, payload_length=len(payload)), payload)
    return Packet(
        replace(h, next_header=h.fragment.next_header, payload_length=len(payload), fragment=None),
        payload,
    )


def _first(fragments: Sequence[Packet]) -> Packet:
    firsts = [f for f in fragments if f.offset == 0]
    if not firsts:
        raise IncompleteError("first fragment missing", [(0, 8)])
    return firsts[0]


def reassemble(fragments: Iterable[Packet]) -> Packet:
    """Rebuild the original packet from fragments in any order.

    Byte-identical duplicates and overlaps are tolerated.

    Raises:
        IncompleteError: coverage has holes (``missing`` lists them).
        OverlapError: overlapping fragments carry different bytes.
    """
    frags = list(fragments)
    if not frags:
        raise IncompleteError("no fragments", [(0, None)])
    _same_key(frags)
    if len(frags) == 1 and not frags[0].is_fragment:
        return frags[0]
    end, buf, cov = _lay_out(frags)
    if end is None:
        missing = _holes(cov, len(cov)) + [(len(cov), None)]
        raise IncompleteError("final fragment missing", missing)
    holes = _holes(cov, end)
    if holes:
        raise IncompleteError(f"missing byte ranges {holes}", holes)
    return _rebuild(_first(frags), bytes(buf[:end]))


def reassemble_gap_tolerant(
    fragments: Iterable[Packet], declared_gaps: Iterable[tuple[int, int]]
) -> Packet:
    """Reassemble, treating ``declared_gaps`` (byte ranges) as intentionally empty.

    The payload is the concatenation of the present data in offset order; any
    hole not inside a declared gap raises :class:`IncompleteError`.
    """
    frags = list(fragments)
    if not frags:
        raise IncompleteError("no fragments", [(0, None)])
    _same_key(frags)
    gaps = sorted(declared_gaps)
    if not gaps:
        return reassemble(frags)
    end, buf, cov = _lay_out(frags)
    if end is None:
        raise IncompleteError("final fragment missing", [(len(cov), None)])
    holes = _holes(cov, end)
    undeclared = [h for h in holes if not any(g0 <= h[0] and h[1] <= g1 for g0, g1 in gaps)]
    if undeclared:
        raise IncompleteError(f"undeclared gaps {undeclared}", undeclared)
    present = bytes(b for b, c in zip(buf[:end], cov[:end]) if c) if holes else bytes(buf[:end])
    return _rebuild(_first(frags), present)


def find_gaps(fragments: Iterable[Packet]) -> list[tuple[int, int]]:
    """Byte ranges not covered by any fragment, up to the final fragment's end."""
    frags = list(fragments)
    end, _, cov = _lay_out(frags)
    return _holes(cov, len(cov) if end is None else end)


class ReassemblyBuffer:
    """Incremental reassembler keyed by (version, src, dst, protocol, id)."""

    def __init__(self):
        self.pending: dict[tuple, list[Packet]] = {}

    def add(self, p: Packet) -> Packet | None:
        """Feed one packet; returns the reassembled packet once complete."""
        if not p.is_fragment:
            return p
        frags = self.pending.setdefault(p.reassembly_key, [])
        frags.append(p)
        if any(not f.mf for f in frags):
            try:
                whole = reassemble(frags)
            except IncompleteError:
                return None
            del self.pending[p.reassembly_key]
            return whole
        return None
