"""Covert channels that hide data in how a packet is fragmented.

Each method has a pair of plain functions (``f1_encode`` / ``f1_decode`` ...)
operating on a single packet.  :class:`Codec` wraps a method behind one
interface (capacity / encode / recover / decode) so streams of cover packets,
the simulator and the CLI can treat every method alike.

Bit conventions (configurable through :class:`Conventions`):

* F1: an even fragment count carries ``0``.
* F2, F2i: an even Fragment Offset value carries ``1``.
* F5: the smaller inter-fragment gap carries ``1``.
"""

from __future__ import annotations

import hashlib
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import Enum

from .errors import CapacityError, ConfigError, DecodeError, FragmentationError
from .fragmentation import (
    FragmentSet,
    default_plan,
    find_gaps,
    fragment,
    fragment_header_len,
    make_fragment,
    max_fragment_payload,
    min_fragment_count,
    reassemble,
    reassemble_gap_tolerant,
)
from .packet import MAX_OFFSET_UNITS, Packet

IS_LEN = 32

Bits = tuple[int, ...]


class Method(str, Enum):
    F1 = "F1"
    F2 = "F2"
    F2I = "F2i"
    F3 = "F3"
    F4 = "F4"
    F5 = "F5"
    F6 = "F6"
    MURDOCH = "MurdochBaseline"


@dataclass(frozen=True)
class StegMessage:
    bits: Bits
    method: Method
    key: bytes = b""

    def __post_init__(self):
        if not self.bits:
            raise ValueError("steganogram must not be empty")


@dataclass(frozen=True)
class ChannelStats:
    """Bandwidth bookkeeping for one covert exchange.

    ``rbr_bits`` is the bit count the raw bit rate is computed from; it defaults
    to ``bits_sent`` but PMTUD counts whole probe payloads instead.
    """

    packets_used: int
    bits_sent: int
    duration: float = 0.0  # virtual seconds
    rbr_bits: int | None = None

    @property
    def prbr(self) -> float:
        return self.bits_sent / self.packets_used if self.packets_used else 0.0

    @property
    def rbr(self) -> float:
        bits = self.bits_sent if self.rbr_bits is None else self.rbr_bits
        return bits / self.duration if self.duration > 0 else 0.0

    def to_dict(self) -> dict:
        return {
            "packets_used": self.packets_used,
            "bits_sent": self.bits_sent,
            "prbr": self.prbr,
            "duration": self.duration,
            "rbr": self.rbr,
        }


@dataclass(frozen=True)
class Conventions:
    f1_even_bit: int = 0
    f2_even_bit: int = 1
    f2_tolerance: float = 0.05
    f5_rates: tuple[int, int] = (10, 20)
    f3_covert_count: int = 1
    f6_phantom_index: int = 1
    murdoch_bits_per_offset: int = 4


def as_bits(value: str | Iterable[int]) -> Bits:
    if isinstance(value, str):
        if set(value) - {"0", "1"}:
            raise ValueError(f"not a bit string: {value!r}")
        return tuple(int(c) for c in value)
    bits = tuple(int(b) for b in value)
    if any(b not in (0, 1) for b in bits):
        raise ValueError("bits must be 0 or 1")
    return bits


def bytes_to_bits(data: bytes) -> Bits:
    return tuple((byte >> (7 - i)) & 1 for byte in data for i in range(8))


def bits_to_bytes(bits: Sequence[int]) -> bytes:
    if len(bits) % 8:
        raise ValueError("bit count is not a multiple of 8")
    return bytes(
        sum(bit << (7 - i) for i, bit in enumerate(bits[j : j + 8])) for j in range(0, len(bits), 8)
    )


def _ceil8(x: float) -> int:
    return math.ceil(x / 8) * 8


def _last_limit(p: Packet, mtu: int) -> int:
    return mtu - fragment_header_len(p)


def uniform_plan(payload_len: int, count: int, max_payload: int, last_limit: int | None = None) -> list[int]:
    """``count`` fragments whose non-last payloads are equal and near ``payload_len / count``."""
    last_limit = max_payload if last_limit is None else last_limit
    if count == 1:
        if payload_len > last_limit:
            raise CapacityError("payload does not fit one fragment")
        return [payload_len]
    lo = max(8, _ceil8((payload_len - last_limit) / (count - 1)))
    hi = min(max_payload, (payload_len - 1) // (count - 1) // 8 * 8)
    if lo > hi:
        raise CapacityError(f"cannot split {payload_len} bytes into {count} fragments")
    common = min(max(_ceil8(payload_len / count), lo), hi)
    return [common] * (count - 1) + [payload_len - (count - 1) * common]


def _sizing(p: Packet, mtu: int) -> tuple[int, int, int]:
    payload_len = len(p.payload)
    mp = max_fragment_payload(p, mtu)
    if mp < 8:
        raise CapacityError(f"MTU {mtu} too small to fragment")
    return payload_len, mp, min_fragment_count(payload_len, mp)


def _sorted(fragments: Iterable[Packet]) -> list[Packet]:
    return sorted(fragments, key=lambda f: f.offset)


# F1: fragment count parity


def f1_encode(p: Packet, bit: int, mtu: int, even_bit: int = 0) -> list[int]:
    """Plan with the smallest fragment count whose parity encodes ``bit``.

    When the natural count already has the right parity the honest maximal-fill
    plan is returned; otherwise one extra fragment is added with near-equal
    sizes.
    """
    payload_len, mp, kmin = _sizing(p, mtu)
    want_even = bit == even_bit
    if (kmin % 2 == 0) == want_even:
        return default_plan(payload_len, mp)
    return uniform_plan(payload_len, kmin + 1, mp)


def f1_decode(fragments: Iterable[Packet], even_bit: int = 0) -> int:
    frags = list(fragments)
    reassemble(frags)
    return even_bit if len(frags) % 2 == 0 else 1 - even_bit


def f1_capacity(p: Packet, mtu: int) -> int:
    try:
        payload_len, mp, kmin = _sizing(p, mtu)
        uniform_plan(payload_len, kmin + 1, mp)
    except CapacityError:
        return 0
    return 1


# F2: per-fragment offset parity


def _offset_parity_bit(offset: int, even_bit: int) -> int:
    return even_bit if offset % 2 == 0 else 1 - even_bit


def _f2_reference(payload_len: int, count: int, mp: int, kmin: int) -> int:
    if count == kmin:
        return mp // 8
    return uniform_plan(payload_len, count, mp)[0] // 8


def f2_encode(
    p: Packet, bits: str | Sequence[int], mtu: int, even_bit: int = 1, tolerance: float = 0.05
) -> list[int]:
    """Plan of ``len(bits) + 1`` fragments; fragment ``k`` offset parity carries ``bits[k-1]``.

    Non-last sizes stay within ``tolerance`` of the reference size, which is
    maximal fill at the natural fragment count and the near-equal share
    otherwise.
    """
    bits = as_bits(bits)
    count = len(bits) + 1
    if count < 2:
        raise CapacityError("F2 needs at least one bit")
    payload_len, mp, kmin = _sizing(p, mtu)
    if count < kmin:
        raise CapacityError(f"{count} fragments cannot carry {payload_len} bytes under MTU {mtu}")
    ref = _f2_reference(payload_len, count, mp, kmin)
    slack = math.floor(ref * tolerance + 1e-9)
    last_limit = _last_limit(p, mtu)
    for bias in (0, -1, 1):
        units = _f2_units(bits, ref, slack, mp // 8, even_bit, bias)
        if units is None:
            continue
        last = payload_len - 8 * sum(units)
        if 0 < last <= last_limit:
            return [u * 8 for u in units] + [last]
    raise CapacityError(f"no F2 plan for {len(bits)} bits on a {payload_len}-byte payload")


def _f2_units(bits: Bits, ref: int, slack: int, max_units: int, even_bit: int, bias: int) -> list[int] | None:
    units: list[int] = []
    offset = 0
    for j, bit in enumerate(bits):
        want_even = bit == even_bit
        if ((offset + ref) % 2 == 0) == want_even:
            step = ref
        else:
            if bias:
                options = [ref + bias, ref - bias]
            else:
                # steer cumulative offset back toward the reference grid
                drift = offset - j * ref
                options = [ref - 1, ref + 1] if drift >= 0 else [ref + 1, ref - 1]
            options = [u for u in options if 1 <= u <= max_units and abs(u - ref) <= slack]
            if not options:
                return None
            step = options[0]
        units.append(step)
        offset += step
    return units


def f2_decode(fragments: Iterable[Packet], even_bit: int = 1) -> Bits:
    offsets = sorted({f.offset for f in fragments})
    return tuple(_offset_parity_bit(o, even_bit) for o in offsets[1:])


def f2_capacity(p: Packet, mtu: int, tolerance: float = 0.05) -> int:
    """Bits every F2 plan can carry on ``p``, whatever their values (0 if ineligible)."""
    try:
        payload_len, mp, kmin = _sizing(p, mtu)
    except CapacityError:
        return 0
    if kmin < 2:
        return 0
    ref = mp // 8
    if math.floor(ref * tolerance + 1e-9) < 1:
        return 0
    # worst case shortens every non-last fragment by one unit
    if payload_len - 8 * (kmin - 1) * (ref - 1) > _last_limit(p, mtu):
        return 0
    return kmin - 1


# F2i: uniform sizes, last offset parity


def f2i_encode(p: Packet, bit: int, mtu: int, even_bit: int = 1) -> list[int]:
    """Equal non-last fragments; the last fragment's offset parity carries ``bit``.

    Searches fragment counts upward from the natural one and common sizes
    downward from maximal fill, so the honest plan is chosen whenever it
    already encodes ``bit``.
    """
    payload_len, mp, kmin = _sizing(p, mtu)
    if kmin < 2:
        raise CapacityError("packet does not fragment under this MTU")
    want_even = bit == even_bit
    for count in range(kmin, kmin + 3):
        for common in range(mp // 8, 0, -1):
            last_offset = (count - 1) * common
            last = payload_len - 8 * last_offset
            if last <= 0:
                continue
            if last > 8 * common:
                break
            if (last_offset % 2 == 0) == want_even:
                return [8 * common] * (count - 1) + [last]
    raise CapacityError(f"no uniform plan encodes bit {bit}")


def f2i_decode(fragments: Iterable[Packet], even_bit: int = 1) -> int:
    last = max(fragments, key=lambda f: f.offset)
    return _offset_parity_bit(last.offset, even_bit)


def f2i_capacity(p: Packet, mtu: int) -> int:
    try:
        f2i_encode(p, 0, mtu)
        f2i_encode(p, 1, mtu)
    except CapacityError:
        return 0
    return 1


# F3: keyed steganogram fragments


def f3_is(key: bytes, offset: int, identification: int, version: int = 4) -> bytes:
    """Identifying Sequence ``SHA-256(key || offset || identification)``."""
    id_len = 2 if version == 4 else 4
    return hashlib.sha256(key + offset.to_bytes(2, "big") + identification.to_bytes(id_len, "big")).digest()


def _f3_shadowed(count: int, honest: int) -> list[int]:
    if count < honest:
        return list(range(1, count + 1))
    return list(range(honest))


def f3_capacity_bytes(p: Packet, mtu: int, covert_count: int) -> int:
    if covert_count <= 0:
        return 0
    try:
        honest = fragment(p, mtu, identification=p.identification or 0)
    except FragmentationError:
        return 0
    if len(honest) < 2 or covert_count > len(honest):
        return 0
    return sum(max(0, len(honest[i].payload) - IS_LEN) for i in _f3_shadowed(covert_count, len(honest)))


def f3_encode(
    p: Packet,
    steg: bytes,
    key: bytes,
    mtu: int,
    covert_count: int,
    identification: int | None = None,
) -> FragmentSet:
    """Honest fragments of ``p`` plus covert fragments carrying ``IS || steg chunk``.

    Each covert fragment reuses the identification and offset of the honest
    fragment it shadows and is emitted immediately before it.
    """
    honest = fragment(p, mtu, identification=identification)
    if not steg:
        return honest
    if covert_count <= 0 or len(honest) < 2 or covert_count > len(honest):
        raise CapacityError(f"cannot place {covert_count} covert fragments among {len(honest)}")
    shadowed = _f3_shadowed(covert_count, len(honest))
    covert: dict[int, Packet] = {}
    pos = 0
    for i in shadowed:
        if pos >= len(steg):
            break
        target = honest[i]
        room = len(target.payload) - IS_LEN
        chunk = steg[pos : pos + room]
        pos += len(chunk)
        mark = f3_is(key, target.offset, honest.identification, p.version)
        covert[i] = make_fragment(target, target.offset, mark + chunk, target.mf, honest.identification)
    if pos < len(steg):
        raise CapacityError(f"steganogram of {len(steg)} bytes exceeds capacity {pos}")
    out = []
    for i, frag in enumerate(honest):
        if i in covert:
            out.append(covert[i])
        out.append(frag)
    return FragmentSet(honest.identification, tuple(out), p.total_length)


def _f3_split(fragments: Iterable[Packet], key: bytes) -> tuple[list[Packet], list[Packet]]:
    honest, covert = [], []
    for f in fragments:
        ident = f.identification or 0
        if f.payload[:IS_LEN] == f3_is(key, f.offset, ident, f.version):
            covert.append(f)
        else:
            honest.append(f)
    return honest, covert


def f3_decode(fragments: Iterable[Packet], key: bytes) -> tuple[Packet, bytes]:
    """Split covert from honest fragments; returns (reassembled cover, steganogram)."""
    honest, covert = _f3_split(fragments, key)
    steg = b"".join(f.payload[IS_LEN:] for f in _sorted(covert))
    return reassemble(honest), steg


# F4: emission order


def f4_encode(fs: Iterable[Packet], bit: int) -> list[Packet]:
    frags = _sorted(fs)
    if len(frags) < 2:
        raise CapacityError("ordering needs at least two fragments")
    return frags if bit else frags[::-1]


def f4_decode(arrivals: Sequence[Packet]) -> int:
    offsets = [f.offset for f in arrivals]
    if len(offsets) < 2:
        raise DecodeError("ordering needs at least two fragments")
    if all(a < b for a, b in zip(offsets, offsets[1:])):
        return 1
    if all(a > b for a, b in zip(offsets, offsets[1:])):
        return 0
    raise DecodeError(f"offsets {offsets} are neither ascending nor descending")


# F5: inter-fragment gap


def f5_encode(fs: Iterable[Packet], bit: int, rates: tuple[int, int] = (10, 20)) -> list[tuple[int, Packet]]:
    """Timed emission ``[(t_ms, fragment), ...]``; gap ``rates[0]`` sends 1, ``rates[1]`` sends 0."""
    r1, r0 = rates
    if r1 == r0:
        raise ConfigError("F5 rates must differ")
    frags = _sorted(fs)
    if len(frags) < 2:
        raise CapacityError("timing needs at least two fragments")
    gap = r1 if bit else r0
    return [(i * gap, f) for i, f in enumerate(frags)]


def f5_decode(arrivals: Sequence[tuple[int, Packet]], rates: tuple[int, int] = (10, 20)) -> int:
    r1, r0 = rates
    times = [t for t, _ in arrivals]
    if len(times) < 2:
        raise DecodeError("timing needs at least two fragments")
    mean_gap = (times[-1] - times[0]) / (len(times) - 1)
    midpoint = (r1 + r0) / 2
    return int((mean_gap < midpoint) == (r1 < r0))


# F6: phantom fragments


def f6_encode(
    p: Packet, bit: int, mtu: int, phantom_index: int = 1, identification: int | None = None
) -> tuple[FragmentSet, list[tuple[int, int]]]:
    """Skip one interior offset slot to send ``1``; returns the set and the declared gaps."""
    payload_len, mp, _ = _sizing(p, mtu)
    plan = default_plan(payload_len, mp)
    if len(plan) < 3:
        raise CapacityError("phantom fragments need at least three honest fragments")
    if not 1 <= phantom_index <= len(plan) - 2:
        raise ConfigError(f"phantom index {phantom_index} is not interior")
    honest = fragment(p, mtu, plan, identification=identification)
    if not bit:
        return honest, []
    gap_units = plan[phantom_index] // 8
    if honest[-1].offset + gap_units > MAX_OFFSET_UNITS:
        raise CapacityError("phantom slot pushes the offset past 13 bits")
    frags = [
        make_fragment(f, f.offset + (gap_units if i >= phantom_index else 0), f.payload, f.mf)
        for i, f in enumerate(honest)
    ]
    start = honest[phantom_index].byte_offset
    return FragmentSet(honest.identification, tuple(frags), p.total_length), [(start, start + gap_units * 8)]


def f6_decode(fragments: Iterable[Packet]) -> tuple[int, Packet]:
    frags = list(fragments)
    gaps = find_gaps(frags)
    if len(gaps) > 1:
        raise DecodeError(f"{len(gaps)} gaps; at most one phantom slot per packet")
    return int(bool(gaps)), reassemble_gap_tolerant(frags, gaps)


def f6_capacity(p: Packet, mtu: int, phantom_index: int = 1) -> int:
    try:
        f6_encode(p, 1, mtu, phantom_index, identification=p.identification or 0)
    except (CapacityError, ConfigError):
        return 0
    return 1


# Murdoch-style direct offset encoding (detection foil)


def murdoch_baseline_encode(p: Packet, bits: str | Sequence[int], mtu: int, bits_per_offset: int = 4) -> list[int]:
    """Each non-first offset's low ``bits_per_offset`` bits carry the next message chunk.

    Fragment sizes are whatever the offsets force, which is what makes this
    scheme easy to spot.
    """
    bits = as_bits(bits)
    payload_len, mp, _ = _sizing(p, mtu)
    if not bits:
        return default_plan(payload_len, mp)
    k = bits_per_offset
    if len(bits) % k:
        raise CapacityError(f"{len(bits)} bits is not a multiple of {k}")
    modulus = 1 << k
    chunks = [int("".join(map(str, bits[i : i + k])), 2) for i in range(0, len(bits), k)]
    sizes = []
    offset = 0
    for chunk in chunks:
        target = offset + mp // 8
        new = target - ((target - chunk) % modulus)
        if new <= offset:
            raise CapacityError("MTU too small for this offset width")
        sizes.append((new - offset) * 8)
        offset = new
    last = payload_len - 8 * offset
    if not 0 < last <= _last_limit(p, mtu):
        raise CapacityError(f"offsets leave an unusable last fragment ({last} bytes)")
    return sizes + [last]


def murdoch_baseline_decode(fragments: Iterable[Packet], bits_per_offset: int = 4) -> Bits:
    k = bits_per_offset
    out: list[int] = []
    for o in sorted({f.offset for f in fragments})[1:]:
        out.extend(int(c) for c in format(o % (1 << k), f"0{k}b"))
    return tuple(out)


def murdoch_baseline_capacity(p: Packet, mtu: int, bits_per_offset: int = 4) -> int:
    try:
        payload_len, mp, kmin = _sizing(p, mtu)
    except CapacityError:
        return 0
    units = mp // 8
    slack = (1 << bits_per_offset) - 1
    if kmin < 2 or units <= slack:
        return 0
    if payload_len - 8 * (kmin - 1) * (units - slack) > _last_limit(p, mtu):
        return 0
    return bits_per_offset * (kmin - 1)


# uniform per-method interface


@dataclass(frozen=True)
class Emission:
    """What a sender puts on the wire for one cover packet."""

    packets: tuple[Packet, ...]
    times: tuple[int, ...]
    bits: Bits = ()
    declared_gaps: tuple[tuple[int, int], ...] = ()

    def timed(self, start: int = 0) -> list[tuple[int, Packet]]:
        return [(start + t, p) for t, p in zip(self.times, self.packets)]


def _emit(packets: Sequence[Packet], bits: Bits, gaps=()) -> Emission:
    return Emission(tuple(packets), tuple(range(len(packets))), bits, tuple(gaps))


@dataclass(frozen=True)
class Codec:
    """Single-packet encoder/decoder for ``method``.

    ``recover`` returns the cover packet a receiver rebuilds, and ``decode`` the
    bits it reads.  Both sides compute ``capacity`` from the cover alone, which
    keeps streams decodable when some covers cannot carry data.
    """

    method: Method
    conventions: Conventions = field(default_factory=Conventions)
    key: bytes = b""

    def capacity(self, p: Packet, mtu: int) -> int:
        c = self.conventions
        m = self.method
        if m is Method.F1:
            return f1_capacity(p, mtu)
        if m is Method.F2:
            return f2_capacity(p, mtu, c.f2_tolerance)
        if m is Method.F2I:
            return f2i_capacity(p, mtu)
        if m is Method.F3:
            return 8 * f3_capacity_bytes(p, mtu, c.f3_covert_count)
        if m in (Method.F4, Method.F5):
            try:
                return int(_sizing(p, mtu)[2] >= 2)
            except CapacityError:
                return 0
        if m is Method.F6:
            return f6_capacity(p, mtu, c.f6_phantom_index)
        return murdoch_baseline_capacity(p, mtu, c.murdoch_bits_per_offset)

    def encode(self, p: Packet, bits: Sequence[int], mtu: int, identification: int | None = None) -> Emission:
        c = self.conventions
        m = self.method
        bits = as_bits(bits)
        if not bits:
            fs = fragment(p, mtu, identification=identification)
            return _emit(fs.fragments, ())
        if m is Method.F1:
            (bit,) = bits
            plan = f1_encode(p, bit, mtu, c.f1_even_bit)
            return _emit(fragment(p, mtu, plan, identification).fragments, bits)
        if m is Method.F2:
            plan = f2_encode(p, bits, mtu, c.f2_even_bit, c.f2_tolerance)
            return _emit(fragment(p, mtu, plan, identification).fragments, bits)
        if m is Method.F2I:
            (bit,) = bits
            plan = f2i_encode(p, bit, mtu, c.f2_even_bit)
            return _emit(fragment(p, mtu, plan, identification).fragments, bits)
        if m is Method.F3:
            fs = f3_encode(p, bits_to_bytes(bits), self.key, mtu, c.f3_covert_count, identification)
            return _emit(fs.fragments, bits)
        if m is Method.F4:
            (bit,) = bits
            return _emit(f4_encode(fragment(p, mtu, identification=identification), bit), bits)
        if m is Method.F5:
            (bit,) = bits
            timed = f5_encode(fragment(p, mtu, identification=identification), bit, c.f5_rates)
            return Emission(tuple(f for _, f in timed), tuple(t for t, _ in timed), bits)
        if m is Method.F6:
            (bit,) = bits
            fs, gaps = f6_encode(p, bit, mtu, c.f6_phantom_index, identification)
            return _emit(fs.fragments, bits, gaps)
        plan = murdoch_baseline_encode(p, bits, mtu, c.murdoch_bits_per_offset)
        return _emit(fragment(p, mtu, plan, identification).fragments, bits)

    def recover(self, arrivals: Sequence[tuple[int, Packet]]) -> Packet:
        frags = [f for _, f in arrivals]
        if self.method is Method.F3:
            return f3_decode(frags, self.key)[0]
        if self.method is Method.F6:
            return f6_decode(frags)[1]
        return reassemble(frags)

    def decode(self, arrivals: Sequence[tuple[int, Packet]]) -> Bits:
        c = self.conventions
        m = self.method
        frags = [f for _, f in arrivals]
        if m is Method.F1:
            return (f1_decode(frags, c.f1_even_bit),)
        if m is Method.F2:
            return f2_decode(frags, c.f2_even_bit)
        if m is Method.F2I:
            return (f2i_decode(frags, c.f2_even_bit),)
        if m is Method.F3:
            return bytes_to_bits(f3_decode(frags, self.key)[1])
        if m is Method.F4:
            return (f4_decode(frags),)
        if m is Method.F5:
            return (f5_decode(arrivals, c.f5_rates),)
        if m is Method.F6:
            return (f6_decode(frags)[0],)
        return murdoch_baseline_decode(frags, c.murdoch_bits_per_offset)


LENGTH_PREFIX_BITS = 32


def frame(bits: Sequence[int]) -> Bits:
    """Prefix a 32-bit length so a receiver can drop end-of-stream padding."""
    return as_bits(format(len(bits), f"0{LENGTH_PREFIX_BITS}b")) + as_bits(bits)


def unframe(bits: Sequence[int]) -> Bits:
    if len(bits) < LENGTH_PREFIX_BITS:
        raise DecodeError("stream shorter than its length prefix")
    n = int("".join(map(str, bits[:LENGTH_PREFIX_BITS])), 2)
    body = tuple(bits[LENGTH_PREFIX_BITS:])
    if len(body) < n:
        raise DecodeError(f"stream announces {n} bits but carries {len(body)}")
    return body[:n]


def encode_stream(
    codec: Codec, covers: Iterable[Packet], bits: Sequence[int], mtu: int, framed: bool = True
) -> list[Emission]:
    """Spread ``bits`` over ``covers``; covers left after the message travel honestly.

    Raises:
        CapacityError: the covers run out before the message does.
    """
    stream = frame(bits) if framed else as_bits(bits)
    pos = 0
    out = []
    for index, p in enumerate(covers):
        cap = codec.capacity(p, mtu) if pos < len(stream) else 0
        if codec.method is Method.F3:
            cap -= cap % 8
        chunk = stream[pos : pos + cap]
        chunk = chunk + (0,) * (cap - len(chunk))
        pos += cap
        # IPv6 covers carry no identification until fragmented
        ident = p.identification if p.identification is not None else index + 1
        out.append(codec.encode(p, chunk, mtu, identification=ident))
    if pos < len(stream):
        raise CapacityError(f"covers carry {pos} of {len(stream)} bits")
    return out


def decode_stream(
    codec: Codec, per_packet: Iterable[Sequence[tuple[int, Packet]]], mtu: int, framed: bool = True
) -> tuple[Bits, list[Packet]]:
    """Inverse of :func:`encode_stream` given each cover's arrivals ``[(time, fragment)]``."""
    bits: list[int] = []
    covers = []
    for arrivals in per_packet:
        p = codec.recover(arrivals)
        covers.append(p)
        if codec.capacity(p, mtu):
            bits.extend(codec.decode(arrivals))
    return (unframe(bits) if framed else tuple(bits)), covers
