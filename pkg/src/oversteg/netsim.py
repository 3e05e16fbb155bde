"""Deterministic discrete-event model of a linear path of links and routers.

Nodes are numbered ``0 .. len(links)``: node 0 is the source host, the last
node the destination, and link ``i`` joins node ``i`` to node ``i + 1``.
Time is virtual and integral (milliseconds).  Routers fragment IPv4 packets
without DF, and drop DF / IPv6 packets that exceed a link's effective limit,
answering with an ICMP that travels hop by hop back toward the source.

Loss draws come from one numpy generator per (link, direction), all spawned
from ``PathConfig.rng_seed``, so adding a link never perturbs other links.
TTL is carried through unchanged: the path is loop-free and keeping it intact
makes reassembled packets byte-identical to what was sent.
"""

from __future__ import annotations

import heapq
import itertools
import json
from collections.abc import Callable, Iterable
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, TextIO, Union

import numpy as np

from .errors import ConfigError, FragmentationError, MalformedError
from .fragmentation import fragment
from .packet import IcmpMessage, Packet, from_hex, icmp_for, to_hex

SENT = "sent"
FORWARDED = "forwarded"
FRAGMENTED = "fragmented"
DROPPED_MTU = "dropped_mtu"
DROPPED_LOSS = "dropped_loss"
ICMP_EMITTED = "icmp_emitted"
ICMP_FILTERED = "icmp_filtered"
ICMP_DELIVERED = "icmp_delivered"
DELIVERED = "delivered"
ACK_DELIVERED = "ack_delivered"
TIMEOUT = "timeout"

IPV4_MIN_MTU = 68
IPV6_MIN_MTU = 1280


@dataclass(frozen=True)
class Link:
    mtu: int
    delay: int = 1
    loss_prob: float = 0.0
    overhead: int = 0
    filters_icmp: bool = False
    # None filters every ICMP; n filters only the first n (transient rate limiting)
    icmp_filter_limit: int | None = None

    @property
    def limit(self) -> int:
        """Largest IP packet that fits once tunnel overhead is paid."""
        return self.mtu - self.overhead


@dataclass(frozen=True)
class PathConfig:
    links: tuple[Link, ...]
    ip_version: int = 4
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(self.links))
        if not self.links:
            raise ConfigError("a path needs at least one link")
        if self.ip_version not in (4, 6):
            raise ConfigError(f"ip_version must be 4 or 6, not {self.ip_version}")
        floor = IPV4_MIN_MTU if self.ip_version == 4 else IPV6_MIN_MTU
        for i, link in enumerate(self.links):
            if link.mtu < floor:
                raise ConfigError(f"link {i} MTU {link.mtu} below IPv{self.ip_version} minimum {floor}")
            if link.limit <= 0 or link.overhead < 0:
                raise ConfigError(f"link {i} overhead {link.overhead} is invalid")
            if not 0.0 <= link.loss_prob <= 1.0:
                raise ConfigError(f"link {i} loss_prob {link.loss_prob} outside [0, 1]")
            if link.delay < 0:
                raise ConfigError(f"link {i} delay must be non-negative")

    @property
    def n_nodes(self) -> int:
        return len(self.links) + 1

    @property
    def last_node(self) -> int:
        return len(self.links)

    @property
    def pmtu(self) -> int:
        return min(link.limit for link in self.links)

    @property
    def min_mtu(self) -> int:
        return IPV4_MIN_MTU if self.ip_version == 4 else IPV6_MIN_MTU

    def node_address(self, node: int) -> int:
        if self.ip_version == 4:
            return 0x0A000000 | (node + 1)
        return 0x20010DB8 << 96 | (node + 1)

    @property
    def src_addr(self) -> int:
        return self.node_address(0)

    @property
    def dst_addr(self) -> int:
        return self.node_address(self.last_node)

    @classmethod
    def from_dict(cls, data: dict) -> PathConfig:
        links = tuple(Link(**link) for link in data["links"])
        return cls(links, data.get("ip_version", 4), data.get("rng_seed", 0))

    def to_dict(self) -> dict:
        return {
            "links": [asdict(link) for link in self.links],
            "ip_version": self.ip_version,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def load(cls, path: str | Path) -> PathConfig:
        data = json.loads(Path(path).read_text())
        return cls.from_dict(data.get("path", data))


@dataclass(frozen=True)
class TraceEvent:
    time: int
    node: int
    kind: str
    identification: int | None
    total_length: int
    offset: int
    flags: str
    note: str = ""
    packet: Packet | None = field(default=None, compare=False, repr=False)

    @property
    def packet_summary(self) -> tuple[int | None, int, int, str]:
        return (self.identification, self.total_length, self.offset, self.flags)

    def to_dict(self, with_packet: bool = False) -> dict:
        out = {
            "time": self.time,
            "node": self.node,
            "kind": self.kind,
            "identification": self.identification,
            "total_length": self.total_length,
            "offset": self.offset,
            "flags": self.flags,
            "note": self.note,
        }
        if with_packet and self.packet is not None:
            try:
                out["packet"] = to_hex(self.packet)
            except MalformedError:
                pass  # ICMP events carry only a quote (header + 8 bytes), not a whole packet
        return out

    @classmethod
    def from_dict(cls, data: dict) -> TraceEvent:
        fields = {k: data[k] for k in ("time", "node", "kind", "identification", "total_length", "offset", "flags")}
        packet = from_hex(data["packet"]) if data.get("packet") else None
        return cls(**fields, note=data.get("note", ""), packet=packet)


def write_jsonl(events: Iterable[TraceEvent], fh: TextIO, with_packets: bool = False) -> None:
    for ev in events:
        fh.write(json.dumps(ev.to_dict(with_packets), sort_keys=True) + "\n")


def read_jsonl(fh: TextIO) -> list[TraceEvent]:
    return [TraceEvent.from_dict(json.loads(line)) for line in fh if line.strip()]


def format_table(events: Iterable[TraceEvent]) -> str:
    rows = [f"{'time':>8} {'node':>4} {'event':<15} {'id':>6} {'len':>6} {'off':>5} {'flags':<5} note"]
    for ev in events:
        ident = "-" if ev.identification is None else str(ev.identification)
        rows.append(
            f"{ev.time:>8} {ev.node:>4} {ev.kind:<15} {ident:>6} {ev.total_length:>6} "
            f"{ev.offset:>5} {ev.flags:<5} {ev.note}".rstrip()
        )
    return "\n".join(rows)


class Role(str, Enum):
    STEG_SENDER = "steg_sender"
    STEG_RECEIVER = "steg_receiver"
    WARDEN = "warden"


HookOutput = Iterable[Union[Packet, tuple[int, Packet]]]
Hook = Callable[["Simulator", int, Packet], HookOutput]


@dataclass
class ProbeHandle:
    """A role attached to a node: it sees every packet arriving there.

    With a ``hook`` it also replaces each packet by the hook's output, given as
    packets or ``(delay_ms, packet)`` pairs.
    """

    position: int
    role: Role
    hook: Hook | None = None
    observed: list[tuple[int, Packet]] = field(default_factory=list)

    @property
    def packets(self) -> list[Packet]:
        return [p for _, p in self.observed]


@dataclass(frozen=True)
class Ack:
    """Transport acknowledgement travelling back to the source."""

    packet: Packet


class Simulator:
    """Single-threaded event loop for one run over ``path``."""

    def __init__(self, path: PathConfig, start: int = 0):
        self.path = path
        self.now = start
        self.trace: list[TraceEvent] = []
        self._queue: list[tuple[int, int, Callable, tuple]] = []
        self._seq = itertools.count()
        self._cancelled: set[int] = set()
        self._probes: dict[int, list[ProbeHandle]] = {}
        self._filtered = [0] * len(path.links)
        fwd, rev = [], []
        for i in range(len(path.links)):
            fwd.append(np.random.default_rng(np.random.SeedSequence(path.rng_seed, spawn_key=(i, 0))))
            rev.append(np.random.default_rng(np.random.SeedSequence(path.rng_seed, spawn_key=(i, 1))))
        self._rng_fwd, self._rng_rev = fwd, rev
        self.on_deliver: Callable[[int, Packet], None] | None = None
        self.on_icmp: Callable[[int, IcmpMessage], None] | None = None
        self.on_ack: Callable[[int, Packet], None] | None = None

    # scheduling

    def schedule(self, time: int, fn: Callable, *args) -> int:
        if time < self.now:
            raise ValueError(f"cannot schedule in the past ({time} < {self.now})")
        token = next(self._seq)
        heapq.heappush(self._queue, (time, token, fn, args))
        return token

    def cancel(self, token: int | None) -> None:
        if token is not None:
            self._cancelled.add(token)

    def run(self, until: int | None = None) -> list[TraceEvent]:
        while self._queue:
            time, token, fn, args = self._queue[0]
            if until is not None and time > until:
                break
            heapq.heappop(self._queue)
            if token in self._cancelled:
                self._cancelled.discard(token)
                continue
            self.now = time
            fn(*args)
        return self.trace

    def record(self, node: int, kind: str, p: Packet | None = None, note: str = "") -> None:
        if p is None:
            ev = TraceEvent(self.now, node, kind, None, 0, 0, "-", note)
        else:
            ev = TraceEvent(self.now, node, kind, p.identification, p.total_length, p.offset, p.flags_str(), note, p)
        self.trace.append(ev)

    # roles

    def place_probe(self, position: int, role: Role | str, hook: Hook | None = None) -> ProbeHandle:
        role = Role(role)
        if not 0 <= position <= self.path.last_node:
            raise ConfigError(f"node {position} outside path 0..{self.path.last_node}")
        here = self._probes.setdefault(position, [])
        if role is Role.WARDEN and any(h.role is Role.WARDEN for h in here):
            raise ConfigError(f"node {position} already has a warden")
        handle = ProbeHandle(position, role, hook)
        here.append(handle)
        return handle

    # forward direction

    def send(self, p: Packet, at: int | None = None, node: int = 0) -> None:
        """Inject ``p`` at ``node`` (default: the source) at time ``at``."""
        self.schedule(self.now if at is None else at, self._arrive, node, p)

    def forward(self, node: int, p: Packet, at: int | None = None) -> None:
        """Emit ``p`` onward from ``node``, skipping that node's probes (used by in-path wardens)."""
        self.schedule(self.now if at is None else at, self._depart, node, p)

    def _arrive(self, node: int, p: Packet) -> None:
        batch: list[tuple[int, Packet]] = [(0, p)]
        for handle in self._probes.get(node, ()):
            for delay, q in batch:
                handle.observed.append((self.now + delay, q))
            if handle.hook is None:
                continue
            out = []
            for delay, q in batch:
                for item in handle.hook(self, self.now + delay, q):
                    extra, r = item if isinstance(item, tuple) else (0, item)
                    out.append((delay + extra, r))
            batch = out
        for delay, q in batch:
            if delay:
                self.schedule(self.now + delay, self._depart, node, q)
            else:
                self._depart(node, q)

    def _depart(self, node: int, p: Packet) -> None:
        if node == self.path.last_node:
            self.record(node, DELIVERED, p)
            if self.on_deliver:
                self.on_deliver(self.now, p)
            return
        link = self.path.links[node]
        if p.total_length <= link.limit:
            self._cross(node, p)
            return
        may_fragment = (p.version == 4 and not p.df) or (p.version == 6 and node == 0)
        if may_fragment:
            try:
                pieces = fragment(p, link.limit, identification=p.identification or 0)
            except FragmentationError as exc:
                self.record(node, DROPPED_MTU, p, str(exc))
                return
            self.record(node, FRAGMENTED, p, f"into {len(pieces)} at limit {link.limit}")
            for piece in pieces:
                self._cross(node, piece)
            return
        self.record(node, DROPPED_MTU, p, f"limit {link.limit}")
        icmp = icmp_for(p, link.limit, self.path.node_address(node))
        self.record(node, ICMP_EMITTED, p, f"next_hop_mtu={link.limit}")
        self.send_back(icmp, node)

    def _cross(self, node: int, p: Packet) -> None:
        link = self.path.links[node]
        if self._rng_fwd[node].random() < link.loss_prob:
            self.record(node, DROPPED_LOSS, p)
            return
        self.record(node, SENT if node == 0 else FORWARDED, p)
        self.schedule(self.now + link.delay, self._arrive, node + 1, p)

    # reverse direction: ICMP and acks

    def send_back(self, message: IcmpMessage | Ack, from_node: int, at: int | None = None) -> None:
        """Return ``message`` toward the source starting at ``from_node``."""
        if at is not None and at != self.now:
            self.schedule(at, self._reverse_from, from_node, message)
        else:
            self._reverse_from(from_node, message)

    def _reverse_from(self, node: int, message: IcmpMessage | Ack) -> None:
        if node == 0:
            self._reverse_deliver(message)
            return
        link = self.path.links[node - 1]
        if self._rng_rev[node - 1].random() < link.loss_prob:
            self.record(node, DROPPED_LOSS, _carried(message), "reverse")
            return
        self.schedule(self.now + link.delay, self._reverse_arrive, node - 1, message)

    def _reverse_arrive(self, node: int, message: IcmpMessage | Ack) -> None:
        link = self.path.links[node]
        if isinstance(message, IcmpMessage) and link.filters_icmp:
            limit = link.icmp_filter_limit
            if limit is None or self._filtered[node] < limit:
                self._filtered[node] += 1
                self.record(node, ICMP_FILTERED, _carried(message), f"next_hop_mtu={message.next_hop_mtu}")
                return
        self._reverse_from(node, message)

    def _reverse_deliver(self, message: IcmpMessage | Ack) -> None:
        if isinstance(message, IcmpMessage):
            self.record(0, ICMP_DELIVERED, _carried(message), f"next_hop_mtu={message.next_hop_mtu}")
            if self.on_icmp:
                self.on_icmp(self.now, message)
        else:
            self.record(0, ACK_DELIVERED, message.packet)
            if self.on_ack:
                self.on_ack(self.now, message.packet)


def _carried(message: IcmpMessage | Ack) -> Packet:
    if isinstance(message, Ack):
        return message.packet
    # summary of the quoted packet; payload is only the 8 quoted bytes
    return Packet(message.embedded_header, message.embedded_data)


def transmit(p: Packet, path: PathConfig, clock: int = 0) -> list[TraceEvent]:
    """Send one packet from the source and run the path to quiescence."""
    sim = Simulator(path, start=clock)
    sim.send(p)
    return sim.run()


class Collector:
    """Groups delivered packets by reassembly key, in order of first arrival."""

    def __init__(self):
        self.groups: dict[Any, list[tuple[int, Packet]]] = {}

    def __call__(self, time: int, p: Packet) -> None:
        self.groups.setdefault(p.reassembly_key, []).append((time, p))

    def arrivals(self) -> list[list[tuple[int, Packet]]]:
        return list(self.groups.values())
