"""Passive steganalysis and an active, normalizing warden.

Detectors take fragment traffic in any of the shapes the rest of the package
produces (packets, ``(time, packet)`` arrivals, trace events, or pre-grouped
fragment sets) and compare it with an honest baseline.  Each returns a
:class:`DetectionReport`; fewer than ``min_samples`` observations raise
:class:`NeedsData`.

:func:`active_normalize` reassembles every packet it sees and fragments it
again at random, which wipes anything encoded in fragment layout, order or
timing while leaving user data intact.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
from scipy import stats

from .errors import CapacityError, ConfigError, FragmentationError, IncompleteError, NeedsData, OverlapError
from .fragmentation import (
    fragment,
    fragment_header_len,
    max_fragment_payload,
    min_fragment_count,
    reassemble,
    reassemble_gap_tolerant,
    _lay_out,
    _holes,
)
from .fragcodecs import uniform_plan
from .netsim import Role, TraceEvent
from .plpmtud import PROTO_MINI, parse_segment
from .packet import Packet, make_ipv4

log = logging.getLogger(__name__)

ALPHA = 0.01
MIN_SAMPLES = 30
RATE_FLOOR = 1e-3
PSEUDO_COUNT = 0.5
BASELINE_MTU = 1500

SUSPICIOUS = "suspicious"
CLEAN = "clean"


@dataclass(frozen=True)
class DetectionReport:
    detector: str
    statistic: float
    p_value: float
    verdict: str
    samples: int
    details: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_p(cls, detector: str, statistic: float, p: float, samples: int, alpha: float = ALPHA, **details):
        p = float(min(1.0, max(0.0, p)))
        return cls(detector, float(statistic), p, SUSPICIOUS if p < alpha else CLEAN, samples, details)

    @property
    def suspicious(self) -> bool:
        return self.verdict == SUSPICIOUS

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# grouping


def _packets_of(items: Iterable[Any]) -> list[Packet]:
    out = []
    for it in items:
        if isinstance(it, Packet):
            out.append(it)
        elif isinstance(it, TraceEvent):
            if it.packet is not None:
                out.append(it.packet)
        elif isinstance(it, tuple) and len(it) == 2 and isinstance(it[1], Packet):
            out.append(it[1])
        else:
            raise TypeError(f"cannot read a packet from {type(it).__name__}")
    return out


def fragment_sets(traffic: Iterable[Any]) -> list[list[Packet]]:
    """Group fragments by reassembly key, in order of first appearance.

    Unfragmented packets are skipped.  Items that are themselves sequences of
    packets are taken as ready-made sets.
    """
    groups: dict[tuple, list[Packet]] = {}
    ready: list[list[Packet]] = []
    flat = []
    for it in traffic:
        if isinstance(it, (list, tuple)) and it and all(isinstance(x, Packet) for x in it):
            ready.append(list(it))
        elif hasattr(it, "fragments") and not isinstance(it, Packet):
            ready.append(list(it.fragments))
        else:
            flat.append(it)
    for p in _packets_of(flat):
        if p.is_fragment:
            groups.setdefault(p.reassembly_key, []).append(p)
    return [s for s in ready if len(s) > 1 or s[0].is_fragment] + list(groups.values())


def _by_offset(fs: Sequence[Packet]) -> list[Packet]:
    return sorted(fs, key=lambda f: (f.offset, len(f.payload)))


def is_irregular(fs: Sequence[Packet]) -> bool:
    """Non-last fragments differ in size, or the last is larger than them."""
    frags = _by_offset(fs)
    sizes = [len(f.payload) for f in frags]
    if len(sizes) < 2:
        return False
    body = sizes[:-1]
    return len(set(body)) > 1 or sizes[-1] > body[0]


def last_offset(fs: Sequence[Packet]) -> int:
    return max(f.offset for f in fs)


# baseline


@dataclass(frozen=True)
class SetSummary:
    """What the detectors need to know about one fragment set."""

    size: int
    count: int
    last_offset: int
    irregular: bool
    orphan: bool = False

    @classmethod
    def of(cls, fs: Sequence[Packet]) -> SetSummary:
        first = _by_offset(fs)[0]
        total = max(f.byte_offset + len(f.payload) for f in fs) + fragment_header_len(first)
        return cls(total, len(fs), last_offset(fs), is_irregular(fs), _is_orphan(fs))


@dataclass(frozen=True)
class SizeMixture:
    """Packet sizes drawn from uniform components ``(weight, low, high)``."""

    components: tuple[tuple[float, int, int], ...] = (
        (0.25, 40, 64),
        (0.25, 552, 576),
        (0.25, 1400, 1600),
        (0.25, 1601, 8980),
    )

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        w = np.array([c[0] for c in self.components], dtype=float)
        pick = rng.choice(len(w), size=n, p=w / w.sum())
        lo = np.array([c[1] for c in self.components])[pick]
        hi = np.array([c[2] for c in self.components])[pick]
        return rng.integers(lo, hi + 1)

    def oversize(self, rng: np.random.Generator, n: int, mtu: int = BASELINE_MTU) -> list[int]:
        """``n`` sizes from the mixture that need fragmenting at ``mtu``."""
        out: list[int] = []
        while len(out) < n:
            out.extend(int(s) for s in self.sample(rng, 4 * n) if s > mtu)
        return out[:n]


def honest_covers(rng: np.random.Generator, n: int, mtu: int = BASELINE_MTU, mixture: SizeMixture = SizeMixture()):
    """Random-payload IPv4 packets whose sizes follow the baseline mixture above ``mtu``."""
    sizes = mixture.oversize(rng, n, mtu)
    # distinct identifications, so no two covers share a reassembly key
    idents = rng.choice(1 << 16, size=n, replace=False) if n <= 1 << 16 else rng.integers(0, 1 << 16, size=n)
    return [
        make_ipv4(rng.bytes(int(s) - 20), identification=int(i)) for s, i in zip(sizes, idents)
    ]


def generate_baseline(
    n: int = 5000, seed: int = 0, mtu: int = BASELINE_MTU, mixture: SizeMixture = SizeMixture()
) -> list[SetSummary]:
    """Summaries of ``n`` honestly fragmented packets."""
    rng = np.random.default_rng(seed)
    out = []
    for s in mixture.oversize(rng, n, mtu):
        p = make_ipv4(bytes(int(s) - 20))
        out.append(SetSummary.of(list(fragment(p, mtu))))
    return out


def write_baseline(summaries: Iterable[SetSummary], path: str | Path) -> None:
    with open(path, "w") as fh:
        for s in summaries:
            fh.write(json.dumps(asdict(s), sort_keys=True) + "\n")


def read_baseline(path: str | Path) -> list[SetSummary]:
    with open(path) as fh:
        return [SetSummary(**json.loads(line)) for line in fh if line.strip()]


@lru_cache(maxsize=1)
def _shipped() -> tuple[SetSummary, ...]:
    ref = resources.files("oversteg").joinpath("data/baseline.jsonl")
    with resources.as_file(ref) as path:
        return tuple(read_baseline(path))


def default_baseline() -> list[SetSummary]:
    """The baseline shipped with the package (``generate_baseline()`` defaults)."""
    return list(_shipped())


# frequency tests


def _merge_small(expected: np.ndarray, observed: np.ndarray, minimum: float = 5.0):
    """Pool adjacent cells until every expected count reaches ``minimum``."""
    exp, obs = [], []
    e_acc = o_acc = 0.0
    for e, o in zip(expected, observed):
        e_acc += e
        o_acc += o
        if e_acc >= minimum:
            exp.append(e_acc)
            obs.append(o_acc)
            e_acc = o_acc = 0.0
    if e_acc or o_acc:
        if exp:
            exp[-1] += e_acc
            obs[-1] += o_acc
        else:
            exp.append(e_acc)
            obs.append(o_acc)
    return np.array(exp), np.array(obs)


def chi_square_vs(observed: Sequence[int], reference: Sequence[int]) -> tuple[float, float, int]:
    """Goodness of fit of ``observed`` categories to the ``reference`` frequencies."""
    cats = sorted(set(observed) | set(reference))
    obs = np.array([sum(1 for x in observed if x == c) for c in cats], dtype=float)
    ref = np.array([sum(1 for x in reference if x == c) for c in cats], dtype=float) + PSEUDO_COUNT
    expected = ref / ref.sum() * len(observed)
    exp, obs = _merge_small(expected, obs)
    if len(exp) < 2:
        return 0.0, 1.0, 0
    res = stats.chisquare(obs, exp)
    return float(res.statistic), float(res.pvalue), len(exp) - 1


def _need(n: int, min_samples: int, what: str) -> None:
    if n < min_samples:
        raise NeedsData(f"{what}: {n} samples, need {min_samples}")


def _summaries(traffic) -> list[SetSummary]:
    return [SetSummary.of(fs) for fs in fragment_sets(traffic)]


def detect_fragment_count(
    traffic, baseline: Sequence[SetSummary] | None = None, alpha: float = ALPHA, min_samples: int = MIN_SAMPLES
) -> DetectionReport:
    """Chi-square of the fragments-per-packet distribution against the baseline."""
    obs = _summaries(traffic)
    _need(len(obs), min_samples, "fragment count")
    base = default_baseline() if baseline is None else baseline
    chi2, p, dof = chi_square_vs([s.count for s in obs], [s.count for s in base])
    even = sum(s.count % 2 == 0 for s in obs)
    return DetectionReport.from_p("fragment_count", chi2, p, len(obs), alpha, dof=dof, even_fraction=even / len(obs))


def detect_offset_parity(
    traffic, baseline: Sequence[SetSummary] | None = None, alpha: float = ALPHA, min_samples: int = MIN_SAMPLES
) -> DetectionReport:
    """Chi-square of last-fragment offset parity against the baseline."""
    obs = _summaries(traffic)
    _need(len(obs), min_samples, "offset parity")
    base = default_baseline() if baseline is None else baseline
    chi2, p, dof = chi_square_vs([s.last_offset % 2 for s in obs], [s.last_offset % 2 for s in base])
    odd = sum(s.last_offset % 2 for s in obs)
    return DetectionReport.from_p("offset_parity", chi2, p, len(obs), alpha, dof=dof, odd_fraction=odd / len(obs))


def detect_size_irregularity(
    traffic, baseline: Sequence[SetSummary] | None = None, alpha: float = ALPHA, min_samples: int = MIN_SAMPLES
) -> DetectionReport:
    """One-sided binomial test of the irregular-set rate against the baseline rate."""
    obs = _summaries(traffic)
    _need(len(obs), min_samples, "size irregularity")
    base = default_baseline() if baseline is None else baseline
    rate = max(RATE_FLOOR, sum(s.irregular for s in base) / max(1, len(base)))
    k = sum(s.irregular for s in obs)
    p = stats.binomtest(k, len(obs), rate, alternative="greater").pvalue
    return DetectionReport.from_p(
        "size_irregularity", k / len(obs), p, len(obs), alpha, irregular=k, baseline_rate=rate
    )


# anomalies


def _is_orphan(fs: Sequence[Packet]) -> bool:
    """Set that cannot be completed from what was seen: a hole, or no first/last fragment."""
    try:
        end, _, cov = _lay_out(fs)
    except OverlapError:
        return False
    if end is None or not any(f.offset == 0 for f in fs):
        return True
    return bool(_holes(cov, end))


def _conflicts(fs: Sequence[Packet]) -> bool:
    try:
        _lay_out(fs)
    except OverlapError:
        return True
    return False


def detect_fragment_anomalies(
    traffic,
    baseline: Sequence[SetSummary] | None = None,
    alpha: float = ALPHA,
    min_samples: int = 1,
) -> DetectionReport:
    """Overlaps carrying different bytes, and an excess of orphan fragment sets.

    A single conflicting overlap is conclusive (``p = 0``); orphans are tested
    against the baseline orphan rate since genuine loss also leaves them.
    """
    sets = fragment_sets(traffic)
    _need(len(sets), min_samples, "fragment anomalies")
    conflicts = sum(_conflicts(fs) for fs in sets)
    orphans = sum(_is_orphan(fs) for fs in sets)
    base = default_baseline() if baseline is None else baseline
    rate = max(RATE_FLOOR, sum(s.orphan for s in base) / max(1, len(base)))
    p_orphan = stats.binomtest(orphans, len(sets), rate, alternative="greater").pvalue if orphans else 1.0
    p = 0.0 if conflicts else p_orphan
    return DetectionReport.from_p(
        "fragment_anomalies", conflicts + orphans, p, len(sets), alpha, conflicts=conflicts, orphans=orphans
    )


# probe comparison


def _sent_probes(trace: Iterable[Any]) -> list[Packet]:
    out = []
    for it in trace:
        if isinstance(it, TraceEvent):
            if it.kind == "sent" and it.node == 0 and it.packet is not None:
                out.append(it.packet)
        else:
            out.extend(_packets_of([it]))
    return out


def _flow(p: Packet) -> tuple:
    return p.version, p.header.src_addr, p.header.dst_addr, p.protocol


def detect_probe_divergence(trace: Iterable[Any], min_samples: int = 1) -> DetectionReport:
    """Compare probe payloads the way an honest sender would repeat them.

    Transport segments are compared per sequence number (a retransmission
    must equal the original).  Other DF probes in a flow must all share the
    first probe's data over their common length.
    """
    probes = _sent_probes(trace)
    comparisons = mismatches = 0
    first_by_seq: dict[tuple, Packet] = {}
    first_by_flow: dict[tuple, Packet] = {}
    for p in probes:
        if p.protocol == PROTO_MINI:
            key = (_flow(p), parse_segment(p)[0])
            ref = first_by_seq.setdefault(key, p)
            if ref is p:
                continue
            comparisons += 1
            mismatches += ref.payload != p.payload
        elif p.df and not p.is_fragment:
            ref = first_by_flow.setdefault(_flow(p), p)
            if ref is p:
                continue
            n = min(len(ref.payload), len(p.payload))
            comparisons += 1
            mismatches += ref.payload[:n] != p.payload[:n]
    _need(comparisons, min_samples, "probe divergence")
    return DetectionReport.from_p(
        "probe_divergence", mismatches, 0.0 if mismatches else 1.0, comparisons, mismatches=mismatches
    )


# active warden


@dataclass(frozen=True)
class NormalizeEntry:
    key: tuple
    action: str
    reason: str = ""


@dataclass
class NormalizeResult:
    arrivals: list[tuple[int, Packet]]
    log: list[NormalizeEntry]

    @property
    def packets(self) -> list[Packet]:
        return [p for _, p in self.arrivals]


def random_plan(rng: np.random.Generator, payload_len: int, count: int, max_payload: int, last_limit: int):
    """Random fragment sizes: multiples of 8 (but the last), each within the MTU."""
    if count == 1:
        return [payload_len]
    for _ in range(64):
        w = rng.random(count) + 0.2
        raw = payload_len * w / w.sum()
        body = [int(min(max_payload, max(8, 8 * round(x / 8)))) for x in raw[:-1]]
        last = payload_len - sum(body)
        if 0 < last <= last_limit:
            return body + [last]
    return uniform_plan(payload_len, count, max_payload, last_limit)


def refragment(p: Packet, mtu: int, rng: np.random.Generator) -> list[Packet]:
    """``p`` split into ``kmin`` or ``kmin + 1`` randomly sized fragments, ascending."""
    hdr = fragment_header_len(p)
    mp = max_fragment_payload(p, mtu)
    payload_len = len(p.payload)
    kmin = min_fragment_count(payload_len, mp)
    count = kmin + int(rng.integers(0, 2))
    if count == 1:
        return [p]
    ident = p.identification if p.identification is not None else 0
    try:
        plan = random_plan(rng, payload_len, count, mp, mtu - hdr)
        return list(fragment(p, mtu, plan, identification=ident))
    except (FragmentationError, CapacityError) as exc:
        log.debug("random refragmentation failed (%s); using maximal fill", exc)
        return list(fragment(p, mtu, identification=ident))


def active_normalize(
    traffic: Iterable[Any],
    seed: int,
    mtu: int | None = None,
    check_overlap: bool = False,
    gap_policy: str = "collapse",
) -> NormalizeResult:
    """Reassemble and randomly refragment every fragment set in ``traffic``.

    Output fragments of a set are emitted together, in ascending order, at the
    arrival time of the set's last fragment.  ``mtu`` defaults to the largest
    fragment seen in the set.

    Sets whose overlaps disagree are dropped when ``check_overlap`` is on and
    passed through untouched otherwise.  Interior holes are closed up when
    ``gap_policy`` is ``"collapse"`` and passed through with ``"pass"``.  Sets
    missing their first or last fragment are always passed through.
    """
    if gap_policy not in ("collapse", "pass"):
        raise ConfigError(f"unknown gap policy {gap_policy!r}")
    rng = np.random.default_rng(seed)
    timed: list[tuple[int, Packet]] = []
    for i, it in enumerate(traffic):
        if isinstance(it, tuple) and len(it) == 2 and isinstance(it[1], Packet):
            timed.append((int(it[0]), it[1]))
        else:
            (p,) = _packets_of([it])
            timed.append((i, p))
    groups: dict[tuple, list[tuple[int, Packet]]] = {}
    order: list[tuple] = []
    out: list[tuple[int, Packet]] = []
    entries: list[NormalizeEntry] = []
    for t, p in timed:
        if not p.is_fragment:
            out.append((t, p))
            continue
        if p.reassembly_key not in groups:
            order.append(p.reassembly_key)
        groups.setdefault(p.reassembly_key, []).append((t, p))
    for key in order:
        arr = groups[key]
        frags = [p for _, p in arr]
        when = max(t for t, _ in arr)
        limit = mtu or max(f.total_length for f in frags)
        try:
            whole = reassemble(frags)
        except OverlapError as exc:
            if check_overlap:
                entries.append(NormalizeEntry(key, "dropped", str(exc)))
            else:
                entries.append(NormalizeEntry(key, "passed", str(exc)))
                out.extend(arr)
            continue
        except IncompleteError as exc:
            whole = None
            if gap_policy == "collapse" and _closable(frags):
                gaps = _interior_holes(frags)
                whole = reassemble_gap_tolerant(frags, gaps)
                entries.append(NormalizeEntry(key, "collapsed", f"closed {gaps}"))
            else:
                entries.append(NormalizeEntry(key, "passed", str(exc)))
                out.extend(arr)
                continue
        pieces = refragment(whole, limit, rng)
        out.extend((when, f) for f in pieces)
    out.sort(key=lambda tp: tp[0])
    return NormalizeResult(out, entries)


def _closable(frags: Sequence[Packet]) -> bool:
    return any(f.offset == 0 for f in frags) and any(not f.mf for f in frags)


def _interior_holes(frags: Sequence[Packet]) -> list[tuple[int, int]]:
    end, _, cov = _lay_out(frags)
    return _holes(cov, end)


class ActiveWarden:
    """Netsim hook form of :func:`active_normalize`.

    Fragments are held for ``hold`` ms after the first of their set arrives,
    then normalized together and forwarded from the warden's node.
    """

    def __init__(self, seed: int, mtu: int | None = None, check_overlap: bool = False, hold: int = 50, gap_policy="collapse"):
        self.seed = seed
        self.mtu = mtu
        self.check_overlap = check_overlap
        self.hold = hold
        self.gap_policy = gap_policy
        self.node: int | None = None
        self.pending: dict[tuple, list[tuple[int, Packet]]] = {}
        self.log: list[NormalizeEntry] = []
        self._flushes = 0

    def __call__(self, sim, time: int, p: Packet):
        if not p.is_fragment:
            return [p]
        key = p.reassembly_key
        if key not in self.pending:
            self.pending[key] = []
            sim.schedule(time + self.hold, self._flush, sim, key)
        self.pending[key].append((time, p))
        return []

    def _flush(self, sim, key: tuple) -> None:
        arr = self.pending.pop(key)
        self._flushes += 1
        res = active_normalize(arr, self.seed * 1_000_003 + self._flushes, self.mtu, self.check_overlap, self.gap_policy)
        self.log.extend(res.log)
        for _, q in res.arrivals:
            sim.forward(self.node, q)

    def attach(self, sim, node: int):
        """Place this warden at ``node`` of ``sim``."""
        self.node = node
        return sim.place_probe(node, Role.WARDEN, self)


def decode_accuracy(sent: Sequence[int], decoded: Sequence[int], rng: np.random.Generator) -> tuple[int, int]:
    """``(correct, total)`` over ``sent``; positions never decoded count as a coin flip."""
    correct = 0
    for i, b in enumerate(sent):
        guess = decoded[i] if i < len(decoded) else int(rng.integers(0, 2))
        correct += int(guess == b)
    return correct, len(sent)


def binomial_interval(n: int, p: float = 0.5, z: float = 1.96) -> tuple[float, float]:
    half = z * math.sqrt(p * (1 - p) / n)
    return p - half, p + half
