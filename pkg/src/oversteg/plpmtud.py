"""Packetization-layer PMTU search and the retransmission covert channel.

A one-flow stop-and-wait transport carries user data in DF segments.  While
the search runs, each segment is also a probe: an ack proves the size
deliverable, silence after the allowed transmissions proves it too big.
ICMP is never consulted.

In covert mode, sender and receiver share a schedule of sequence numbers.  On a
scheduled segment the receiver keeps the data but withholds the ack.  When the
timer fires, the sender's retransmission carries ``marker || chunk`` instead of
a copy of the data.  The receiver recognises the marker, keeps the chunk and
acks.  User data still arrives intact because the receiver already holds it.
"""

from __future__ import annotations

import hashlib
import random
import struct
from collections.abc import Iterable
from dataclasses import dataclass, field

from .errors import ChannelExhausted, ConfigError, OverstegError
from .fragcodecs import IS_LEN, ChannelStats
from .netsim import SENT, Ack, PathConfig, Simulator, TraceEvent
from .packet import IPV4_HEADER_LEN, IPV6_HEADER_LEN, Packet, make_ipv4, make_ipv6

RTO = 3000
SEGMENT_HEADER = struct.Struct("!IIH")  # seq, stream offset, user-data length
PROTO_MINI = 253  # experimental protocol number
PROBE_TRIES = 2
MAX_DATA_TRIES = 64


def marker(key: bytes, seq: int) -> bytes:
    """``SHA-256(key || seq || 0x01)``: flags a retransmission as covert."""
    return hashlib.sha256(key + seq.to_bytes(4, "big") + b"\x01").digest()


def ip_header_len(version: int) -> int:
    return IPV4_HEADER_LEN if version == 4 else IPV6_HEADER_LEN


def segment_room(size: int, version: int) -> int:
    """User-data bytes a segment of total ``size`` can carry."""
    return size - ip_header_len(version) - SEGMENT_HEADER.size


def steg_room(size: int, version: int) -> int:
    return segment_room(size, version) - IS_LEN


def make_segment(
    path: PathConfig, seq: int, offset: int, data: bytes, size: int, body: bytes | None = None
) -> Packet:
    """DF packet of exactly ``size`` bytes.  ``body`` replaces the data area when given."""
    room = segment_room(size, path.ip_version)
    if room < 0:
        raise ConfigError(f"segment size {size} too small")
    area = (data if body is None else body)[:room].ljust(room, b"\x00")
    payload = SEGMENT_HEADER.pack(seq, offset, len(data)) + area
    if path.ip_version == 4:
        return make_ipv4(
            payload,
            identification=seq & 0xFFFF,
            flag_df=1,
            protocol=PROTO_MINI,
            src_addr=path.src_addr,
            dst_addr=path.dst_addr,
        )
    return make_ipv6(payload, next_header=PROTO_MINI, flow_label=seq & 0xFFFFF, src_addr=path.src_addr, dst_addr=path.dst_addr)


def parse_segment(p: Packet) -> tuple[int, int, int, bytes]:
    """``(seq, stream_offset, data_len, data_area)`` of a transport segment."""
    seq, offset, n = SEGMENT_HEADER.unpack_from(p.payload)
    return seq, offset, n, p.payload[SEGMENT_HEADER.size :]


@dataclass
class PlpmtudSearch:
    low: int
    high: int
    resolution: int = 8
    probes: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.low > self.high:
            raise ConfigError(f"low {self.low} above high {self.high}")
        if self.resolution < 1:
            raise ConfigError("resolution must be positive")

    @property
    def done(self) -> bool:
        return self.high - self.low <= self.resolution

    def next_probe(self) -> int:
        size = (self.low + self.high) // 2
        self.probes.append(size)
        return size

    def success(self, size: int) -> None:
        self.low = max(self.low, size)

    def failure(self, size: int) -> None:
        self.high = min(self.high, size)


@dataclass
class Transmission:
    time: int
    seq: int
    size: int
    covert: bool
    packet: Packet = field(repr=False)


@dataclass
class PlpmtudResult:
    pmtu: int
    search: PlpmtudSearch
    sent: list[Transmission]
    delivered: bytes
    trace: list[TraceEvent]
    end_time: int
    covert_chunks: dict[int, bytes] = field(default_factory=dict)
    received_steg: bytes | None = None
    stats: ChannelStats | None = None

    @property
    def retransmissions(self) -> list[Transmission]:
        seen: set[int] = set()
        out = []
        for t in self.sent:
            if t.seq in seen:
                out.append(t)
            seen.add(t.seq)
        return out


class MiniTransport:
    """Stop-and-wait sender; runs the search first, then streams at ``low``."""

    def __init__(
        self,
        sim: Simulator,
        data: bytes,
        search: PlpmtudSearch,
        rto: int = RTO,
        schedule: Iterable[int] = (),
        key: bytes = b"",
        steg: bytes = b"",
    ):
        self.sim = sim
        self.path = sim.path
        self.data = data
        self.search = search
        self.rto = rto
        self.schedule = set(schedule)
        self.key = key
        self.stream = len(steg).to_bytes(4, "big") + steg if steg else b""
        self.steg_pos = 0
        self.seq = 0
        self.pos = 0
        self.unacked: set[int] = set()
        self.sent: list[Transmission] = []
        self.tries = 0
        self.timer: int | None = None
        self.current: tuple[int, int, bytes, bool] | None = None  # seq, size, data, probing
        self.offset = 0
        self.steg_packet: Packet | None = None
        self.finished = False
        self.covert_used: list[int] = []

    @property
    def steg_done(self) -> bool:
        return self.steg_pos >= len(self.stream)

    def start(self) -> None:
        self._next_segment()

    def _next_segment(self) -> None:
        probing = not self.search.done
        if not probing and self.pos >= len(self.data):
            self.finished = True
            return
        size = self.search.next_probe() if probing else self.search.low
        room = segment_room(size, self.path.ip_version)
        if room < 0:
            raise ConfigError(f"segment size {size} too small")
        chunk = self.data[self.pos : self.pos + room]
        self.current = (self.seq, size, chunk, probing)
        self.offset = self.pos
        self.tries = 0
        self.steg_packet = None
        self.unacked = {self.seq}
        self._transmit()

    def _transmit(self) -> None:
        seq, size, chunk, _ = self.current
        covert = seq in self.schedule and self.tries % 2 == 1 and not self.steg_done
        if covert:
            if self.steg_packet is None:
                room = steg_room(size, self.path.ip_version)
                if room <= 0:
                    raise ChannelExhausted(f"segment of {size} bytes has no room for a steg chunk")
                piece = self.stream[self.steg_pos : self.steg_pos + room]
                self.steg_packet = make_segment(
                    self.path, seq, self.offset, chunk, size, marker(self.key, seq) + piece
                )
            pkt = self.steg_packet
        else:
            pkt = make_segment(self.path, seq, self.offset, chunk, size)
        self.tries += 1
        self.sent.append(Transmission(self.sim.now, seq, size, covert, pkt))
        self.timer = self.sim.schedule(self.sim.now + self.rto, self._on_timeout, seq)
        self.sim.send(pkt)

    def _allowed_tries(self) -> int:
        seq, _, _, probing = self.current
        if not probing:
            return MAX_DATA_TRIES
        return PROBE_TRIES + 1 if seq in self.schedule and not self.steg_done else PROBE_TRIES

    def _on_timeout(self, seq: int) -> None:
        if self.current is None or self.current[0] != seq or seq not in self.unacked:
            return
        if self.tries < self._allowed_tries():
            self._transmit()
            return
        _, size, _, probing = self.current
        if not probing:
            raise OverstegError(f"segment {seq} undeliverable after {self.tries} transmissions")
        self.search.failure(size)
        self.seq += 1
        self._next_segment()

    def on_ack(self, time: int, p: Packet) -> None:
        seq = parse_segment(p)[0]
        if self.current is None or seq != self.current[0] or seq not in self.unacked:
            return
        self.unacked.discard(seq)
        self.sim.cancel(self.timer)
        _, size, chunk, probing = self.current
        if self.steg_packet is not None and p.payload == self.steg_packet.payload:
            self.steg_pos += steg_room(size, self.path.ip_version)
            self.covert_used.append(seq)
        if probing:
            self.search.success(size)
        self.pos += len(chunk)
        self.seq += 1
        self._next_segment()


class MiniReceiver:
    """Acks segments, withholding the first ack on scheduled sequence numbers."""

    def __init__(self, sim: Simulator, schedule: Iterable[int] = (), key: bytes = b""):
        self.sim = sim
        self.schedule = set(schedule)
        self.key = key
        self.data: dict[int, bytes] = {}  # by stream offset
        self.have: set[int] = set()
        self.withheld: set[int] = set()
        self.chunks: dict[int, bytes] = {}
        self.acked_with: dict[int, Packet] = {}

    def on_deliver(self, time: int, p: Packet) -> None:
        if p.protocol != PROTO_MINI:
            return
        seq, offset, n, area = parse_segment(p)
        covert = seq in self.schedule and area[:IS_LEN] == marker(self.key, seq)
        if covert:
            if seq not in self.have:
                return  # original never arrived; wait for a verbatim copy
            self.chunks.setdefault(seq, area[IS_LEN:])
            self.acked_with[seq] = p
            self._ack(p)
            return
        self.have.add(seq)
        self.data.setdefault(offset, area[:n])
        if seq in self.schedule and seq not in self.withheld:
            self.withheld.add(seq)
            return
        self._ack(self.acked_with.get(seq, p))

    def _ack(self, p: Packet) -> None:
        self.sim.send_back(Ack(p), self.sim.path.last_node)

    def stream(self) -> bytes:
        out = bytearray()
        for off in sorted(self.data):
            piece = self.data[off]
            if off > len(out):
                break  # hole: nothing beyond it is in order yet
            out += piece[len(out) - off :]
        return bytes(out)

    def steganogram(self) -> bytes:
        raw = b"".join(self.chunks[k] for k in sorted(self.chunks))
        if len(raw) < 4:
            return b""
        n = int.from_bytes(raw[:4], "big")
        return raw[4 : 4 + n]


def _run(
    path: PathConfig,
    data: bytes,
    start: int,
    resolution: int,
    schedule: Iterable[int] = (),
    key: bytes = b"",
    steg: bytes = b"",
    rto: int = RTO,
    clock: int = 0,
) -> tuple[MiniTransport, MiniReceiver, Simulator]:
    ceiling = path.links[0].mtu
    if start > ceiling:
        raise ConfigError(f"start {start} above sender link MTU {ceiling}")
    if segment_room(start, path.ip_version) < 0:
        raise ConfigError(f"start {start} too small for a segment")
    sim = Simulator(path, start=clock)
    search = PlpmtudSearch(start, ceiling + 1, resolution)
    sender = MiniTransport(sim, data, search, rto, schedule, key, steg)
    receiver = MiniReceiver(sim, schedule, key)
    sim.on_ack = sender.on_ack
    sim.on_deliver = receiver.on_deliver
    sender.start()
    sim.run()
    return sender, receiver, sim


def _result(sender: MiniTransport, receiver: MiniReceiver, sim: Simulator) -> PlpmtudResult:
    return PlpmtudResult(
        sender.search.low, sender.search, sender.sent, receiver.stream(), sim.trace, sim.now, dict(receiver.chunks)
    )


def default_data(path: PathConfig, n: int = 8192) -> bytes:
    return random.Random(path.rng_seed).randbytes(n)


def plpmtud_run(
    path: PathConfig,
    start: int = 512,
    resolution: int = 8,
    data: bytes | None = None,
    rto: int = RTO,
) -> PlpmtudResult:
    """Honest search followed by a stop-and-wait transfer of ``data``."""
    data = default_data(path) if data is None else data
    return _result(*_run(path, data, start, resolution, rto=rto))


def plpmtud_search(path: PathConfig, start: int = 512, resolution: int = 8) -> int:
    """Largest probe size proven deliverable; within ``resolution`` of the true PMTU."""
    return plpmtud_run(path, start, resolution, data=b"").pmtu


def stop_and_wait_transfer(path: PathConfig, data: bytes, start: int = 512, resolution: int = 8) -> PlpmtudResult:
    return plpmtud_run(path, start, resolution, data)


def rsteg_exchange(
    path: PathConfig,
    steg: bytes,
    key: bytes,
    schedule: Iterable[int],
    *,
    data: bytes | None = None,
    start: int = 512,
    resolution: int = 8,
    rto: int = RTO,
) -> PlpmtudResult:
    """Send ``steg`` in retransmissions of the scheduled sequence numbers.

    An empty schedule runs the honest transfer unchanged and sends nothing.

    Raises:
        ChannelExhausted: a scheduled number is never reached, or the schedule
            runs out before the steganogram is delivered.
    """
    schedule = sorted(set(schedule))
    if not steg:
        raise ValueError("steganogram must not be empty")
    data = default_data(path) if data is None else data
    sender, receiver, sim = _run(path, data, start, resolution, schedule, key, steg, rto)
    if schedule and schedule[-1] >= sender.seq:
        raise ChannelExhausted(f"schedule reaches seq {schedule[-1]} but only {sender.seq} segments were sent")
    if schedule and not sender.steg_done:
        raise ChannelExhausted(
            f"schedule carried {sender.steg_pos} of {len(sender.stream)} stream bytes"
        )
    result = _result(sender, receiver, sim)
    result.received_steg = receiver.steganogram()
    covert = [t for t in sender.sent if t.covert]
    first = covert[0].time if covert else 0
    result.stats = ChannelStats(
        packets_used=len(sender.covert_used),
        bits_sent=8 * len(steg) if schedule else 0,
        duration=(sim.now - first) / 1000 if covert else 0.0,
        rbr_bits=sum(8 * len(t.packet.payload) for t in covert),
    )
    return result


def retransmission_pairs(trace: Iterable[TraceEvent]) -> list[tuple[Packet, Packet]]:
    """``(original, retransmission)`` pairs of transport segments leaving the source."""
    first: dict[int, Packet] = {}
    pairs = []
    for ev in trace:
        if ev.kind != SENT or ev.node != 0 or ev.packet is None or ev.packet.protocol != PROTO_MINI:
            continue
        seq = parse_segment(ev.packet)[0]
        if seq in first:
            pairs.append((first[seq], ev.packet))
        else:
            first[seq] = ev.packet
    return pairs
