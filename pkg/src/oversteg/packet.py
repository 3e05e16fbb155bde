"""Bit-exact IPv4 / IPv6 packet model plus the ICMP messages PMTUD relies on.

Addresses are plain integers (32-bit for IPv4, 128-bit for IPv6).  Every type
here is a frozen dataclass; use :func:`dataclasses.replace` to derive variants.
The IPv4 header checksum is never trusted from the caller: :func:`serialize`
always recomputes it, and :func:`parse` reports the wire value's validity in
``Packet.checksum_valid`` instead of failing.
"""

from __future__ import annotations

import binascii
import struct
from dataclasses import dataclass, field, replace
from typing import Union

from .errors import MalformedError, OversizeError, TruncationError, VersionError

IPV4_HEADER_LEN = 20
IPV6_HEADER_LEN = 40
IPV6_FRAG_HEADER_LEN = 8
IPV6_NEXT_FRAGMENT = 44
MAX_PACKET_LEN = 65535
MAX_OFFSET_UNITS = 8191

PROTO_ICMP = 1
PROTO_UDP = 17
PROTO_ICMPV6 = 58

_V4 = struct.Struct("!BBHHHBBH4s4s")
_V6 = struct.Struct("!IHBB16s16s")
_V6_FRAG = struct.Struct("!BBHI")


def internet_checksum(data: bytes) -> int:
    """RFC 1071 one's-complement checksum of ``data`` (odd lengths zero-padded)."""
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


@dataclass(frozen=True)
class Ipv4Header:
    total_length: int
    identification: int = 0
    flag_df: int = 0
    flag_mf: int = 0
    fragment_offset: int = 0
    ttl: int = 64
    protocol: int = PROTO_UDP
    src_addr: int = 0x0A000001
    dst_addr: int = 0x0A000002
    tos: int = 0
    flag_reserved: int = 0
    version: int = 4
    ihl: int = 5
    # excluded from equality: serialize() owns this field
    header_checksum: int = field(default=0, compare=False)

    @property
    def header_len(self) -> int:
        return self.ihl * 4


@dataclass(frozen=True)
class Ipv6FragmentHeader:
    next_header: int
    fragment_offset: int = 0
    flag_m: int = 0
    identification: int = 0
    reserved: int = 0
    res2: int = 0


@dataclass(frozen=True)
class Ipv6Header:
    payload_length: int
    next_header: int = PROTO_UDP
    hop_limit: int = 64
    src_addr: int = 0x20010DB8 << 96 | 1
    dst_addr: int = 0x20010DB8 << 96 | 2
    traffic_class: int = 0
    flow_label: int = 0
    fragment: Ipv6FragmentHeader | None = None
    version: int = 6

    @property
    def header_len(self) -> int:
        return IPV6_HEADER_LEN + (IPV6_FRAG_HEADER_LEN if self.fragment else 0)


Header = Union[Ipv4Header, Ipv6Header]


@dataclass(frozen=True)
class Packet:
    header: Header
    payload: bytes = b""
    checksum_valid: bool = field(default=True, compare=False)

    @property
    def version(self) -> int:
        return self.header.version

    @property
    def header_len(self) -> int:
        return self.header.header_len

    @property
    def total_length(self) -> int:
        h = self.header
        if isinstance(h, Ipv4Header):
            return h.total_length
        return IPV6_HEADER_LEN + h.payload_length

    @property
    def identification(self) -> int | None:
        h = self.header
        if isinstance(h, Ipv4Header):
            return h.identification
        return h.fragment.identification if h.fragment else None

    @property
    def offset(self) -> int:
        """Fragment offset in 8-byte units."""
        h = self.header
        if isinstance(h, Ipv4Header):
            return h.fragment_offset
        return h.fragment.fragment_offset if h.fragment else 0

    @property
    def mf(self) -> bool:
        h = self.header
        if isinstance(h, Ipv4Header):
            return bool(h.flag_mf)
        return bool(h.fragment and h.fragment.flag_m)

    @property
    def df(self) -> bool:
        # IPv6 routers never fragment, which is DF semantics on the wire
        h = self.header
        return bool(h.flag_df) if isinstance(h, Ipv4Header) else True

    @property
    def ttl(self) -> int:
        h = self.header
        return h.ttl if isinstance(h, Ipv4Header) else h.hop_limit

    @property
    def protocol(self) -> int:
        h = self.header
        if isinstance(h, Ipv4Header):
            return h.protocol
        return h.fragment.next_header if h.fragment else h.next_header

    @property
    def is_fragment(self) -> bool:
        h = self.header
        if isinstance(h, Ipv6Header) and h.fragment is not None:
            return True
        return self.mf or self.offset != 0

    @property
    def byte_offset(self) -> int:
        return self.offset * 8

    @property
    def reassembly_key(self) -> tuple[int, int, int, int, int | None]:
        h = self.header
        return (h.version, h.src_addr, h.dst_addr, self.protocol, self.identification)

    def flags_str(self) -> str:
        return ("DF" if isinstance(self.header, Ipv4Header) and self.df else "") + (
            "MF" if self.mf else ""
        ) or "-"


def make_ipv4(payload: bytes = b"", **fields) -> Packet:
    """Build an IPv4 packet whose ``total_length`` matches ``payload``."""
    return Packet(Ipv4Header(total_length=IPV4_HEADER_LEN + len(payload), **fields), payload)


def make_ipv6(payload: bytes = b"", fragment: Ipv6FragmentHeader | None = None, **fields) -> Packet:
    extra = IPV6_FRAG_HEADER_LEN if fragment else 0
    if fragment is not None:
        fields.setdefault("next_header", IPV6_NEXT_FRAGMENT)
    return Packet(Ipv6Header(payload_length=extra + len(payload), fragment=fragment, **fields), payload)


def with_payload(p: Packet, payload: bytes) -> Packet:
    """Copy of ``p`` carrying ``payload`` with its length field adjusted."""
    h = p.header
    if isinstance(h, Ipv4Header):
        return Packet(replace(h, total_length=h.header_len + len(payload)), payload)
    extra = IPV6_FRAG_HEADER_LEN if h.fragment else 0
    return Packet(replace(h, payload_length=extra + len(payload)), payload)


def ipv4_header_bytes(h: Ipv4Header, checksum: int | None = None) -> bytes:
    if h.ihl != 5:
        raise MalformedError("IPv4 options are not supported")
    flags_off = (h.flag_reserved & 1) << 15 | (h.flag_df & 1) << 14 | (h.flag_mf & 1) << 13
    flags_off |= h.fragment_offset & 0x1FFF
    raw = _V4.pack(
        (h.version & 0xF) << 4 | (h.ihl & 0xF),
        h.tos & 0xFF,
        h.total_length & 0xFFFF,
        h.identification & 0xFFFF,
        flags_off,
        h.ttl & 0xFF,
        h.protocol & 0xFF,
        0,
        h.src_addr.to_bytes(4, "big"),
        h.dst_addr.to_bytes(4, "big"),
    )
    if checksum is None:
        checksum = internet_checksum(raw)
    return raw[:10] + checksum.to_bytes(2, "big") + raw[12:]


def _check_ranges_v4(h: Ipv4Header) -> None:
    if not 0 <= h.fragment_offset <= MAX_OFFSET_UNITS:
        raise MalformedError(f"fragment offset {h.fragment_offset} outside 13 bits")
    for name, value, bits in (
        ("identification", h.identification, 16),
        ("ttl", h.ttl, 8),
        ("protocol", h.protocol, 8),
        ("tos", h.tos, 8),
        ("src_addr", h.src_addr, 32),
        ("dst_addr", h.dst_addr, 32),
    ):
        if not 0 <= value < 1 << bits:
            raise MalformedError(f"{name}={value} does not fit in {bits} bits")


def serialize(p: Packet) -> bytes:
    """Wire bytes of ``p``; the IPv4 header checksum is computed here."""
    h = p.header
    if isinstance(h, Ipv4Header):
        actual = IPV4_HEADER_LEN + len(p.payload)
        if actual > MAX_PACKET_LEN:
            raise OversizeError(f"packet of {actual} bytes exceeds {MAX_PACKET_LEN}")
        if h.total_length != actual:
            raise MalformedError(f"total_length {h.total_length} != serialized length {actual}")
        _check_ranges_v4(h)
        return ipv4_header_bytes(h) + p.payload

    frag = h.fragment
    extra = IPV6_FRAG_HEADER_LEN if frag else 0
    actual = extra + len(p.payload)
    if actual > MAX_PACKET_LEN:
        raise OversizeError(f"IPv6 payload of {actual} bytes exceeds {MAX_PACKET_LEN}")
    if h.payload_length != actual:
        raise MalformedError(f"payload_length {h.payload_length} != serialized length {actual}")
    first = 6 << 28 | (h.traffic_class & 0xFF) << 20 | (h.flow_label & 0xFFFFF)
    out = _V6.pack(
        first,
        h.payload_length,
        h.next_header & 0xFF,
        h.hop_limit & 0xFF,
        h.src_addr.to_bytes(16, "big"),
        h.dst_addr.to_bytes(16, "big"),
    )
    if frag is not None:
        if not 0 <= frag.fragment_offset <= MAX_OFFSET_UNITS:
            raise MalformedError("fragment offset outside 13 bits")
        out += _V6_FRAG.pack(
            frag.next_header & 0xFF,
            frag.reserved & 0xFF,
            frag.fragment_offset << 3 | (frag.res2 & 3) << 1 | (frag.flag_m & 1),
            frag.identification & 0xFFFFFFFF,
        )
    return out + p.payload


def parse_ipv4_header(data: bytes) -> tuple[Ipv4Header, bool]:
    """Decode the fixed 20-byte IPv4 header; returns ``(header, checksum_ok)``."""
    if len(data) < IPV4_HEADER_LEN:
        raise TruncationError(f"need {IPV4_HEADER_LEN} bytes, got {len(data)}")
    vihl, tos, total, ident, flags_off, ttl, proto, csum, src, dst = _V4.unpack_from(data)
    version, ihl = vihl >> 4, vihl & 0xF
    if version != 4:
        raise VersionError(f"version {version}")
    if ihl != 5:
        raise MalformedError(f"IHL {ihl} (options unsupported)")
    header = Ipv4Header(
        total_length=total,
        identification=ident,
        flag_reserved=flags_off >> 15 & 1,
        flag_df=flags_off >> 14 & 1,
        flag_mf=flags_off >> 13 & 1,
        fragment_offset=flags_off & 0x1FFF,
        ttl=ttl,
        protocol=proto,
        src_addr=int.from_bytes(src, "big"),
        dst_addr=int.from_bytes(dst, "big"),
        tos=tos,
        header_checksum=csum,
    )
    return header, internet_checksum(data[:IPV4_HEADER_LEN]) == 0


def parse(data: bytes) -> Packet:
    """Inverse of :func:`serialize`.

    Raises:
        TruncationError: fewer bytes than the headers or length fields demand.
        VersionError: version nibble is neither 4 nor 6.
        MalformedError: inconsistent lengths, options, or trailing bytes.
    """
    data = bytes(data)
    if not data:
        raise TruncationError("empty input")
    version = data[0] >> 4
    if version == 4:
        header, ok = parse_ipv4_header(data)
        if header.total_length < IPV4_HEADER_LEN:
            raise MalformedError(f"total_length {header.total_length} < header length")
        if len(data) < header.total_length:
            raise TruncationError(f"total_length {header.total_length} but {len(data)} bytes")
        if len(data) > header.total_length:
            raise MalformedError(f"{len(data) - header.total_length} trailing bytes")
        return Packet(header, data[IPV4_HEADER_LEN:], checksum_valid=ok)
    if version == 6:
        if len(data) < IPV6_HEADER_LEN:
            raise TruncationError(f"need {IPV6_HEADER_LEN} bytes, got {len(data)}")
        first, plen, nxt, hlim, src, dst = _V6.unpack_from(data)
        body = data[IPV6_HEADER_LEN:]
        if len(body) < plen:
            raise TruncationError(f"payload_length {plen} but {len(body)} bytes")
        if len(body) > plen:
            raise MalformedError(f"{len(body) - plen} trailing bytes")
        frag = None
        if nxt == IPV6_NEXT_FRAGMENT:
            if plen < IPV6_FRAG_HEADER_LEN:
                raise TruncationError("fragment header truncated")
            fnext, fres, off_flags, fid = _V6_FRAG.unpack_from(body)
            frag = Ipv6FragmentHeader(
                next_header=fnext,
                fragment_offset=off_flags >> 3,
                flag_m=off_flags & 1,
                identification=fid,
                reserved=fres,
                res2=off_flags >> 1 & 3,
            )
            body = body[IPV6_FRAG_HEADER_LEN:]
        header = Ipv6Header(
            payload_length=plen,
            next_header=nxt,
            hop_limit=hlim,
            src_addr=int.from_bytes(src, "big"),
            dst_addr=int.from_bytes(dst, "big"),
            traffic_class=first >> 20 & 0xFF,
            flow_label=first & 0xFFFFF,
            fragment=frag,
        )
        return Packet(header, body)
    raise VersionError(f"version {version}")


def to_hex(p: Packet) -> str:
    return serialize(p).hex()


def from_hex(text: str) -> Packet:
    """Parse a hex dump; whitespace, ``:`` separators and a ``0x`` prefix are ignored."""
    cleaned = "".join(text.split()).replace(":", "")
    if cleaned[:2].lower() == "0x":
        cleaned = cleaned[2:]
    try:
        raw = binascii.unhexlify(cleaned)
    except (binascii.Error, ValueError) as exc:
        raise MalformedError(f"invalid hex dump: {exc}") from exc
    return parse(raw)


# ICMP

ICMP_FRAG_NEEDED = "frag_needed"
ICMPV6_PACKET_TOO_BIG = "packet_too_big"


@dataclass(frozen=True)
class IcmpMessage:
    """"Fragmentation needed" (v4 type 3 code 4) or ICMPv6 "Packet Too Big".

    ``embedded_header`` is the offending packet's header as quoted back and
    ``embedded_data`` its first 8 payload bytes.
    """

    kind: str
    next_hop_mtu: int
    embedded_header: Header
    embedded_data: bytes
    src_addr: int

    def __post_init__(self):
        if len(self.embedded_data) != 8:
            raise MalformedError("ICMP must quote exactly 8 bytes of original data")

    @property
    def type_code(self) -> tuple[int, int]:
        return (3, 4) if self.kind == ICMP_FRAG_NEEDED else (2, 0)

    @property
    def embedded_ttl(self) -> int:
        h = self.embedded_header
        return h.ttl if isinstance(h, Ipv4Header) else h.hop_limit

    def to_bytes(self) -> bytes:
        """ICMP message body (no outer IP header)."""
        t, c = self.type_code
        h = self.embedded_header
        if isinstance(h, Ipv4Header):
            quoted = ipv4_header_bytes(h, h.header_checksum)
            rest = struct.pack("!HH", 0, self.next_hop_mtu)
        else:
            quoted = serialize(Packet(h, b"\x00" * (h.payload_length - (8 if h.fragment else 0))))[
                : h.header_len
            ]
            rest = struct.pack("!I", self.next_hop_mtu)
        body = bytes([t, c, 0, 0]) + rest + quoted + self.embedded_data
        csum = internet_checksum(body)
        return body[:2] + csum.to_bytes(2, "big") + body[4:]


def icmp_for(p: Packet, next_hop_mtu: int, src_addr: int) -> IcmpMessage:
    """The honest ICMP a router emits when dropping ``p``."""
    kind = ICMP_FRAG_NEEDED if p.version == 4 else ICMPV6_PACKET_TOO_BIG
    data = p.payload[:8].ljust(8, b"\x00")
    header = p.header
    if isinstance(header, Ipv4Header):
        header = replace(header, header_checksum=internet_checksum(ipv4_header_bytes(header, 0)))
    return IcmpMessage(kind, next_hop_mtu, header, data, src_addr)
