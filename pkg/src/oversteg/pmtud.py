"""Path MTU Discovery and the covert channel riding on its probes.

Honest discovery (:func:`pmtud_discover`) sends DF probes starting at the
sender's link MTU, shrinks on every ICMP "fragmentation needed" and resends
after a fixed timeout when no answer arrives.

The covert exchange (:func:`covert_probe_exchange`) has the sender, who
already knows the path MTU, push steganogram chunks inside probes that are
guaranteed to arrive.  The receiver keeps the exchange going by forging ICMPs
whose quoted header carries a marked TTL, so the sender can tell them from
genuine ones.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, replace

from .errors import ChannelExhausted, ConfigError
from .fragcodecs import IS_LEN, ChannelStats
from .netsim import (
    DELIVERED,
    ICMP_EMITTED,
    SENT,
    TIMEOUT,
    PathConfig,
    Simulator,
    TraceEvent,
)
from .packet import (
    ICMP_FRAG_NEEDED,
    ICMPV6_PACKET_TOO_BIG,
    IPV4_HEADER_LEN,
    IPV6_HEADER_LEN,
    IcmpMessage,
    Ipv4Header,
    Packet,
    internet_checksum,
    ipv4_header_bytes,
    make_ipv4,
    make_ipv6,
)

PROBE_TIMEOUT = 1000
PROBE_TTL = 64
LENGTH_PREFIX = 4


def header_len(version: int) -> int:
    return IPV4_HEADER_LEN if version == 4 else IPV6_HEADER_LEN


def probe_id(p: Packet) -> int:
    """Per-probe identifier: IPv4 Identification, or the IPv6 flow label."""
    h = p.header
    return h.identification if isinstance(h, Ipv4Header) else h.flow_label


def _quoted_id(icmp: IcmpMessage) -> int:
    h = icmp.embedded_header
    return h.identification if isinstance(h, Ipv4Header) else h.flow_label


def make_probe(path: PathConfig, size: int, payload: bytes, identification: int, ttl: int = PROBE_TTL) -> Packet:
    """DF probe of exactly ``size`` bytes; ``payload`` is truncated or zero-padded to fit."""
    room = size - header_len(path.ip_version)
    if room < 0:
        raise ConfigError(f"probe size {size} smaller than the IP header")
    body = payload[:room].ljust(room, b"\x00")
    if path.ip_version == 4:
        return make_ipv4(
            body,
            identification=identification & 0xFFFF,
            flag_df=1,
            ttl=ttl,
            src_addr=path.src_addr,
            dst_addr=path.dst_addr,
        )
    return make_ipv6(
        body, flow_label=identification & 0xFFFFF, hop_limit=ttl, src_addr=path.src_addr, dst_addr=path.dst_addr
    )


def filler(seed: int, n: int) -> bytes:
    """Deterministic stand-in for application data."""
    return random.Random(seed).randbytes(n)


@dataclass
class PmtudState:
    current_pmtu: int
    probes_sent: int = 0
    last_icmp_mtu: int | None = None
    timer: int | None = None


@dataclass
class PmtudResult:
    pmtu: int
    converged: bool
    probes: list[Packet]
    timeouts: int
    trace: list[TraceEvent]
    end_time: int | None = None

    @property
    def probe_sizes(self) -> list[int]:
        return [p.total_length for p in self.probes]

    @property
    def descent(self) -> list[int]:
        """Probe sizes with consecutive repeats (retransmissions) collapsed."""
        out: list[int] = []
        for size in self.probe_sizes:
            if not out or out[-1] != size:
                out.append(size)
        return out

    @property
    def icmp_filtered(self) -> int:
        return sum(ev.kind == "icmp_filtered" for ev in self.trace)


class PmtudSender:
    """Probe, shrink on ICMP, resend on timeout.  Every probe carries a prefix of ``data``."""

    def __init__(
        self,
        sim: Simulator,
        data: bytes,
        identification: int,
        initial: int,
        timeout: int = PROBE_TIMEOUT,
        max_probes: int = 64,
    ):
        self.sim = sim
        self.data = data
        self.identification = identification
        self.timeout = timeout
        self.max_probes = max_probes
        self.state = PmtudState(current_pmtu=initial)
        self.probes: list[Packet] = []
        self.timeouts = 0
        self.done = False
        self.gave_up = False
        self.end_time: int | None = None

    def start(self) -> None:
        self._send()

    def _send(self) -> None:
        st = self.state
        if st.probes_sent >= self.max_probes:
            self.gave_up = True
            return
        probe = make_probe(self.sim.path, st.current_pmtu, self.data, self.identification)
        st.probes_sent += 1
        self.probes.append(probe)
        st.timer = self.sim.schedule(self.sim.now + self.timeout, self._on_timeout)
        self.sim.send(probe)

    def on_icmp(self, time: int, icmp: IcmpMessage) -> None:
        st = self.state
        if self.done or _quoted_id(icmp) != self.identification & _id_mask(self.sim.path):
            return
        floor = self.sim.path.min_mtu
        new = max(icmp.next_hop_mtu, floor)
        st.last_icmp_mtu = icmp.next_hop_mtu
        if new >= st.current_pmtu:
            return
        st.current_pmtu = new
        self.sim.cancel(st.timer)
        self._send()

    def _on_timeout(self) -> None:
        if self.done:
            return
        self.timeouts += 1
        self.sim.record(0, TIMEOUT, self.probes[-1], f"retransmit {self.state.current_pmtu}")
        self._send()

    def on_deliver(self, time: int, p: Packet) -> None:
        if self.done:
            return
        self.done = True
        self.end_time = time
        self.sim.cancel(self.state.timer)


def _id_mask(path: PathConfig) -> int:
    return 0xFFFF if path.ip_version == 4 else 0xFFFFF


def pmtud_discover(
    path: PathConfig,
    *,
    data: bytes | None = None,
    identification: int = 1,
    initial_size: int | None = None,
    timeout: int = PROBE_TIMEOUT,
    max_probes: int = 64,
    start: int = 0,
) -> PmtudResult:
    """Run honest PMTUD over ``path``.

    The first probe is the sender's link MTU.  If the probes never get
    through, the protocol minimum (68 / 1280) is reported with
    ``converged=False``.
    """
    initial = path.links[0].mtu if initial_size is None else initial_size
    sim = Simulator(path, start=start)
    sender = PmtudSender(
        sim, data if data is not None else filler(path.rng_seed, initial), identification, initial, timeout, max_probes
    )
    sim.on_icmp = sender.on_icmp
    sim.on_deliver = sender.on_deliver
    sender.start()
    trace = sim.run()
    if sender.done:
        pmtu, ok = sender.state.current_pmtu, True
    else:
        pmtu, ok = path.min_mtu, False
    return PmtudResult(pmtu, ok, sender.probes, sender.timeouts, trace, sender.end_time)


# covert channel


def pmtud_is(key: bytes, identification: int, cb: int, version: int = 4) -> bytes:
    """``SHA-256(key || identification || control bit)``."""
    if cb not in (0, 1):
        raise ValueError("control bit must be 0 or 1")
    id_len = 2 if version == 4 else 4
    return hashlib.sha256(key + identification.to_bytes(id_len, "big") + bytes([cb])).digest()


@dataclass(frozen=True)
class TtlMarkRule:
    """How the receiver marks the TTL quoted in a forged ICMP.

    ``parity`` forces the low bit to 1 (senders emit even TTLs); ``value``
    overwrites it with a prearranged number.
    """

    mode: str = "parity"
    value: int = 77

    def __post_init__(self):
        if self.mode not in ("parity", "value"):
            raise ConfigError(f"unknown TTL rule {self.mode!r}")

    def mark(self, ttl: int) -> int:
        return ttl | 1 if self.mode == "parity" else self.value

    def matches(self, ttl: int) -> bool:
        return bool(ttl & 1) if self.mode == "parity" else ttl == self.value


def mark_fake_icmp(
    original: Packet,
    marking: TtlMarkRule = TtlMarkRule(),
    next_hop_mtu: int | None = None,
    src_addr: int = 0,
) -> IcmpMessage:
    """Forge the "packet too big" answer to ``original`` with a marked TTL.

    The quoted header is the probe's own, except for the TTL, and its checksum
    is recomputed so it still verifies.
    """
    mtu = original.total_length - 8 if next_hop_mtu is None else next_hop_mtu
    h = original.header
    if isinstance(h, Ipv4Header):
        marked = replace(h, ttl=marking.mark(h.ttl))
        marked = replace(marked, header_checksum=internet_checksum(ipv4_header_bytes(marked, 0)))
        kind = ICMP_FRAG_NEEDED
    else:
        marked = replace(h, hop_limit=marking.mark(h.hop_limit))
        kind = ICMPV6_PACKET_TOO_BIG
    return IcmpMessage(kind, mtu, marked, original.payload[:8].ljust(8, b"\x00"), src_addr)


def is_fake(icmp: IcmpMessage, marking: TtlMarkRule = TtlMarkRule()) -> bool:
    return marking.matches(icmp.embedded_ttl)


@dataclass(frozen=True)
class CovertProbe:
    packet: Packet
    cb: int
    is_prefix: bytes
    steg_chunk: bytes


@dataclass(frozen=True)
class Ladder:
    """Sequence of probe sizes the forged ICMPs walk the sender down."""

    start: int
    step: int = 8
    sizes: tuple[int, ...] | None = None

    def first(self) -> int:
        return self.sizes[0] if self.sizes else self.start

    def next_size(self, size: int) -> int:
        if self.sizes:
            i = self.sizes.index(size)
            if i + 1 >= len(self.sizes):
                return -1
            return self.sizes[i + 1]
        return size - self.step


def plan_covert_probes(
    steg: bytes, key: bytes, ladder: Ladder, version: int, identification: int, floor: int
) -> list[CovertProbe]:
    """Split ``len || steg`` over probes whose sizes follow ``ladder``.

    The terminal probe (control bit 0) is zero-padded to its full ladder size.
    """
    stream = len(steg).to_bytes(LENGTH_PREFIX, "big") + steg
    hdr = header_len(version)
    mask = 0xFFFF if version == 4 else 0xFFFFF
    chunks: list[tuple[int, bytes]] = []
    size = ladder.first()
    pos = 0
    while pos < len(stream):
        room = size - hdr - IS_LEN
        if size < floor or room <= 0:
            raise ChannelExhausted(f"ladder reached {size} bytes with {len(stream) - pos} bytes left")
        chunks.append((size, stream[pos : pos + room]))
        pos += room
        size = ladder.next_size(size)
    probes = []
    for n, (size, chunk) in enumerate(chunks):
        cb = int(n < len(chunks) - 1)
        ident = (identification + n) & mask
        mark = pmtud_is(key, ident, cb, version)
        room = size - hdr - IS_LEN
        payload = mark + chunk.ljust(room, b"\x00")
        pkt = _bare_probe(version, payload, ident)
        probes.append(CovertProbe(pkt, cb, mark, chunk))
    return probes


def _bare_probe(version: int, payload: bytes, ident: int) -> Packet:
    if version == 4:
        return make_ipv4(payload, identification=ident, flag_df=1, ttl=PROBE_TTL)
    return make_ipv6(payload, flow_label=ident, hop_limit=PROBE_TTL)


def _addressed(p: Packet, path: PathConfig) -> Packet:
    return Packet(replace(p.header, src_addr=path.src_addr, dst_addr=path.dst_addr), p.payload)


@dataclass
class CovertResult:
    stats: ChannelStats
    received: bytes
    probes_sent: list[Packet]
    fake_icmps: list[IcmpMessage]
    trace: list[TraceEvent]
    start_time: int
    end_time: int | None
    mode: str

    @property
    def probe_payload_bits(self) -> int:
        return sum(8 * len(p.payload) for p in self.probes_sent)


class CovertReceiver:
    """Checks both candidate ISs on each arriving probe and forges ICMPs while CB=1."""

    def __init__(self, sim: Simulator, key: bytes, ladder: Ladder, rule: TtlMarkRule, spoof_node: int):
        self.sim = sim
        self.key = key
        self.ladder = ladder
        self.rule = rule
        self.spoof_node = spoof_node
        self.chunks: dict[int, bytes] = {}
        self.fake_icmps: list[IcmpMessage] = []
        self.finished_at: int | None = None

    def classify(self, p: Packet) -> int | None:
        """Control bit of a covert probe, or ``None`` for ordinary traffic."""
        ident = probe_id(p)
        head = p.payload[:IS_LEN]
        matches = [cb for cb in (0, 1) if head == pmtud_is(self.key, ident, cb, p.version)]
        return matches[0] if matches else None

    def on_deliver(self, time: int, p: Packet) -> None:
        cb = self.classify(p)
        if cb is None:
            return
        ident = probe_id(p)
        self.chunks.setdefault(ident, p.payload[IS_LEN:])
        if cb == 0:
            if self.finished_at is None:
                self.finished_at = time
            return
        icmp = mark_fake_icmp(
            p, self.rule, self.ladder.next_size(p.total_length), self.sim.path.node_address(self.spoof_node)
        )
        self.fake_icmps.append(icmp)
        self.sim.record(self.sim.path.last_node, ICMP_EMITTED, p, f"forged next_hop_mtu={icmp.next_hop_mtu}")
        self.sim.send_back(icmp, self.sim.path.last_node)

    def steganogram(self, first_id: int) -> bytes:
        stream = b"".join(self.chunks[k] for k in sorted(self.chunks))
        n = int.from_bytes(stream[:LENGTH_PREFIX], "big")
        return stream[LENGTH_PREFIX : LENGTH_PREFIX + n]


class CovertSender:
    def __init__(self, sim: Simulator, probes: list[Packet], rule: TtlMarkRule, timeout: int = PROBE_TIMEOUT):
        self.sim = sim
        self.probes = probes
        self.rule = rule
        self.timeout = timeout
        self.index = 0
        self.timer: int | None = None
        self.sent: list[Packet] = []
        self.ignored_icmps = 0

    def start(self) -> None:
        self._send()

    def _send(self) -> None:
        probe = self.probes[self.index]
        self.sent.append(probe)
        self.timer = self.sim.schedule(self.sim.now + self.timeout, self._on_timeout, self.index)
        self.sim.send(probe)

    def _on_timeout(self, index: int) -> None:
        if index != self.index or self.index >= len(self.probes) - 1:
            return
        self.sim.record(0, TIMEOUT, self.probes[index], "no ICMP; retransmit")
        self._send()

    def on_icmp(self, time: int, icmp: IcmpMessage) -> None:
        current = self.probes[self.index]
        if not is_fake(icmp, self.rule) or _quoted_id(icmp) != probe_id(current):
            self.ignored_icmps += 1
            return
        if self.index >= len(self.probes) - 1:
            return
        self.sim.cancel(self.timer)
        self.index += 1
        self._send()


def covert_probe_exchange(
    path: PathConfig,
    steg: bytes,
    key: bytes,
    *,
    known_pmtu: int | None = None,
    mode: str = "all",
    ladder_step: int = 8,
    ladder: tuple[int, ...] | None = None,
    ttl_rule: TtlMarkRule = TtlMarkRule(),
    spoof_node: int = 1,
    identification: int = 1000,
    timeout: int = PROBE_TIMEOUT,
    start: int = 0,
) -> CovertResult:
    """Send ``steg`` from source to destination over PMTUD probes.

    ``mode="all"`` puts a chunk in every probe and walks a descending ladder of
    forged ICMPs.  ``mode="first"`` runs genuine PMTUD and hides the whole
    steganogram in the first probe's payload.  Later probes repeat its prefix.

    Raises:
        ChannelExhausted: the steganogram does not fit the ladder / first probe.
        ConfigError: ``known_pmtu`` exceeds the path's real PMTU.
    """
    if not steg:
        raise ValueError("steganogram must not be empty")
    pmtu = path.pmtu if known_pmtu is None else known_pmtu
    if pmtu > path.pmtu:
        raise ConfigError(f"known PMTU {pmtu} exceeds path PMTU {path.pmtu}")
    if not 0 <= spoof_node <= path.last_node:
        raise ConfigError(f"spoof node {spoof_node} not on the path")
    version = path.ip_version
    sim = Simulator(path, start=start)
    lad = Ladder(pmtu, ladder_step, tuple(ladder) if ladder else None)
    receiver = CovertReceiver(sim, key, lad, ttl_rule, spoof_node)
    sim.on_deliver = receiver.on_deliver

    if mode == "all":
        planned = plan_covert_probes(steg, key, lad, version, identification, path.min_mtu)
        sender = CovertSender(sim, [_addressed(cp.packet, path) for cp in planned], ttl_rule, timeout)
        sim.on_icmp = sender.on_icmp
        sender.start()
        trace = sim.run()
        sent = sender.sent
        packets_used = len(planned)
    elif mode == "first":
        hdr = header_len(version)
        mark = pmtud_is(key, identification & _id_mask(path), 0, version)
        body = mark + len(steg).to_bytes(LENGTH_PREFIX, "big") + steg
        if len(body) > pmtu - hdr:
            raise ChannelExhausted(f"{len(steg)} bytes do not fit a {pmtu}-byte probe")
        initial = path.links[0].mtu
        data = body + filler(path.rng_seed, max(0, initial - hdr - len(body)))
        honest = PmtudSender(sim, data, identification & _id_mask(path), initial, timeout)
        sim.on_icmp = honest.on_icmp

        def deliver(time: int, p: Packet) -> None:
            honest.on_deliver(time, p)
            receiver.on_deliver(time, p)

        sim.on_deliver = deliver
        honest.start()
        trace = sim.run()
        sent = honest.probes
        packets_used = 1
    else:
        raise ConfigError(f"unknown covert PMTUD mode {mode!r}")

    end = receiver.finished_at
    received = receiver.steganogram(identification) if receiver.chunks else b""
    duration = ((end if end is not None else sim.now) - start) / 1000
    stats = ChannelStats(
        packets_used=packets_used,
        bits_sent=8 * len(steg),
        duration=duration,
        rbr_bits=sum(8 * len(p.payload) for p in sent),
    )
    return CovertResult(stats, received, sent, receiver.fake_icmps, trace, start, end, mode)


def rbr_from_trace(trace: list[TraceEvent], version: int = 4) -> float:
    """Raw bit rate recomputed from the trace alone: probe payload bits over duration."""
    hdr = header_len(version)
    sent = [ev for ev in trace if ev.kind == SENT and ev.node == 0]
    delivered = [ev for ev in trace if ev.kind == DELIVERED]
    if not sent or not delivered:
        return 0.0
    bits = sum(8 * (ev.total_length - hdr) for ev in sent)
    seconds = (max(ev.time for ev in delivered) - min(ev.time for ev in sent)) / 1000
    return bits / seconds if seconds > 0 else 0.0
