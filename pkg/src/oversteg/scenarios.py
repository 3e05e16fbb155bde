"""Covert fragment streams run end to end through the simulator.

The steganographic sender (SS) and receiver (SR) can sit at any node.  When
they sit at the endpoints, the source host emits the covert fragments itself
and the destination decodes them.  Placed mid-path, the SS is a hook that swaps each
passing cover packet for its covert emission, and the SR is a hook that
decodes the fragments and sends the rebuilt cover on.  A warden can observe
(or normalize) at one node of its own.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DecodeError, FragmentationError, IncompleteError
from .fragcodecs import (
    Bits,
    ChannelStats,
    Codec,
    Emission,
    Method,
    as_bits,
    encode_stream,
    frame,
    unframe,
)
from .netsim import DELIVERED, SENT, PathConfig, ProbeHandle, Role, Simulator, TraceEvent
from .packet import Packet
from .warden import ActiveWarden, decode_accuracy

SPACING = 100  # virtual ms between cover packets


@dataclass
class ChannelRun:
    method: Method
    sent_bits: list[Bits]
    decoded_bits: list[Bits]
    covers: list[Packet]
    recovered: list[Packet | None]
    stats: ChannelStats
    trace: list[TraceEvent]
    emissions: list[Emission] = field(repr=False, default_factory=list)
    warden: ProbeHandle | None = None
    message: Bits | None = None

    @property
    def covers_intact(self) -> bool:
        return all(r == c for r, c in zip(self.recovered, self.covers))

    @property
    def bits_exact(self) -> bool:
        return all(tuple(d) == tuple(s) for d, s in zip(self.decoded_bits, self.sent_bits))

    def accuracy(self, seed: int = 0) -> float:
        rng = np.random.default_rng(seed)
        correct = total = 0
        for s, d in zip(self.sent_bits, self.decoded_bits):
            k, n = decode_accuracy(s, d, rng)
            correct += k
            total += n
        return correct / total if total else float("nan")

    def per_packet_prbr(self) -> list[tuple[int, float]]:
        """``(fragments emitted, bits carried)`` for each cover that carried bits."""
        return [(len(e.packets), len(e.bits)) for e in self.emissions if e.bits]


def _ident(p: Packet) -> tuple:
    # whole IPv6 packets carry no identification, so tell them apart by content
    return p.reassembly_key if p.is_fragment else (p.reassembly_key, p.payload)


class _Receiver:
    """Collects fragments per cover and decodes once the set can be rebuilt."""

    def __init__(self, codec: Codec, keys: dict[tuple, int]):
        self.codec = codec
        self.keys = keys
        self.arrivals: dict[int, list[tuple[int, Packet]]] = {}
        self.recovered: dict[int, Packet] = {}
        self.decoded: dict[int, Bits] = {}
        self.done_at: dict[int, int] = {}

    def take(self, time: int, p: Packet) -> Packet | None:
        index = self.keys.get(_ident(p))
        if index is None:
            return None
        arr = self.arrivals.setdefault(index, [])
        arr.append((time, p))
        if index in self.recovered:
            return None
        try:
            cover = self.codec.recover(arr)
        except (IncompleteError, DecodeError):
            return None
        except FragmentationError:
            return None
        self.recovered[index] = cover
        self.done_at[index] = time
        return cover

    def finish(self, index: int, capacity: int) -> Bits:
        """Bits read from cover ``index``; empty if nothing decodable arrived."""
        arr = self.arrivals.get(index, [])
        if not capacity or not arr:
            return ()
        try:
            return tuple(self.codec.decode(arr))
        except (DecodeError, FragmentationError):
            return ()


def run_channel(
    codec: Codec,
    covers: Sequence[Packet],
    bits: Sequence[int],
    path: PathConfig,
    *,
    mtu: int | None = None,
    ss_node: int = 0,
    sr_node: int | None = None,
    warden_node: int | None = None,
    normalizer: ActiveWarden | None = None,
    framed: bool = True,
    spacing: int = SPACING,
) -> ChannelRun:
    """Send ``bits`` hidden in ``covers`` from ``ss_node`` to ``sr_node``.

    ``mtu`` is what the SS fragments for; it defaults to the limit of the link
    leaving ``ss_node``.  A ``normalizer`` is installed at ``warden_node``;
    without one, a passive warden only records what passes there.
    """
    sr_node = path.last_node if sr_node is None else sr_node
    if not 0 <= ss_node < sr_node <= path.last_node:
        raise ConfigError(f"need 0 <= SS ({ss_node}) < SR ({sr_node}) <= {path.last_node}")
    mtu = path.links[ss_node].limit if mtu is None else mtu
    for i in range(ss_node):
        for p in covers:
            if p.total_length > path.links[i].limit:
                raise ConfigError(f"cover of {p.total_length} bytes cannot reach the SS over link {i}")

    emissions = encode_stream(codec, covers, bits, mtu, framed=framed)
    keys = {}
    for index, e in enumerate(emissions):
        for f in e.packets:
            keys[_ident(f)] = index

    sim = Simulator(path)
    receiver = _Receiver(codec, keys)
    warden = None
    if warden_node is not None:
        if normalizer is not None:
            warden = normalizer.attach(sim, warden_node)
        else:
            warden = sim.place_probe(warden_node, Role.WARDEN)

    if ss_node == 0:
        for i, e in enumerate(emissions):
            for t, f in e.timed(i * spacing):
                sim.send(f, at=t)
    else:
        by_key = {_ident(covers[i]): e for i, e in enumerate(emissions)}

        def ss_hook(sim_, time, p):
            e = None if p.is_fragment else by_key.get(_ident(p))
            if e is None:
                return [p]
            return [(t, f) for t, f in zip(e.times, e.packets)]

        sim.place_probe(ss_node, Role.STEG_SENDER, ss_hook)
        for i, p in enumerate(covers):
            sim.send(p, at=i * spacing)

    if sr_node == path.last_node:
        sim.on_deliver = receiver.take
    else:

        def sr_hook(sim_, time, p):
            if _ident(p) not in keys or not p.is_fragment:
                return [p]
            cover = receiver.take(time, p)
            return [cover] if cover is not None else []

        sim.place_probe(sr_node, Role.STEG_RECEIVER, sr_hook)

    trace = sim.run()
    caps = [len(e.bits) for e in emissions]
    decoded = [receiver.finish(i, caps[i]) for i in range(len(emissions))]
    recovered = [receiver.recovered.get(i) for i in range(len(emissions))]
    sent_bits = [tuple(e.bits) for e in emissions]

    message = None
    flat = tuple(b for d in decoded for b in d)
    if framed:
        try:
            message = unframe(flat)
        except DecodeError:
            message = None
    else:
        message = flat

    stats = _stats(emissions, trace, receiver, sr_node)
    return ChannelRun(codec.method, sent_bits, decoded, list(covers), recovered, stats, trace, emissions, warden, message)


def _stats(emissions: Sequence[Emission], trace: Sequence[TraceEvent], receiver: _Receiver, sr_node: int) -> ChannelStats:
    carrying = [e for e in emissions if e.bits]
    bits_sent = sum(len(e.bits) for e in carrying)
    sends = [ev.time for ev in trace if ev.kind == SENT]
    ends = list(receiver.done_at.values()) or [ev.time for ev in trace if ev.kind == DELIVERED]
    duration = (max(ends) - min(sends)) / 1000 if sends and ends else 0.0
    return ChannelStats(packets_used=len(carrying), bits_sent=bits_sent, duration=duration)


def random_bits(rng: np.random.Generator, n: int) -> Bits:
    return tuple(int(b) for b in rng.integers(0, 2, n))


def fitting_message(codec: Codec, covers: Sequence[Packet], mtu: int, framed: bool = True) -> int:
    """Longest message (in bits) ``covers`` can carry."""
    total = 0
    for p in covers:
        cap = codec.capacity(p, mtu)
        if codec.method is Method.F3:
            cap -= cap % 8
        total += cap
    return max(0, total - (len(frame(())) if framed else 0))


__all__ = ["ChannelRun", "run_channel", "random_bits", "fitting_message", "as_bits"]
