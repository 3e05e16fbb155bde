"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v -s``; the summary
section at the end of any pytest run repeats the verdicts.
"""

import math
import time

import numpy as np
import pytest

from conftest import naive_checksum, record_criterion
from oversteg.errors import PacketError
from oversteg.fixtures import worked_packet, tunnel_path, ladder_path, parity_fragments
from oversteg.fragcodecs import (
    IS_LEN,
    Codec,
    Method,
    bits_to_bytes,
    bytes_to_bits,
    decode_stream,
    encode_stream,
    f2_decode,
    f2_encode,
    f3_capacity_bytes,
)
from oversteg.fragmentation import fragment, reassemble
from oversteg.netsim import Link, PathConfig
from oversteg.packet import internet_checksum, make_ipv4, make_ipv6, parse, serialize
from oversteg.pmtud import covert_probe_exchange, pmtud_discover, rbr_from_trace
from oversteg.scenarios import random_bits, run_channel
from oversteg.warden import (
    active_normalize,
    binomial_interval,
    decode_accuracy,
    detect_probe_divergence,
    detect_size_irregularity,
    fragment_sets,
    honest_covers,
)


def gate(number, title, checks):
    """Record ``checks`` (name -> bool) for ``number`` and fail the test on any miss."""
    failed = [name for name, ok in checks.items() if not ok]
    detail = "all checks hold" if not failed else "failed: " + ", ".join(failed)
    record_criterion(number, title, not failed, detail)
    assert not failed, detail


# 1


def test_criterion_1_worked_fragmentation():
    t0 = time.perf_counter()
    p = worked_packet()
    fs = fragment(p, 1500)
    got = [(f.total_length, int(f.mf), f.offset) for f in fs]
    rebuilt = reassemble(fs)
    elapsed = time.perf_counter() - t0
    gate(
        1,
        "5140-byte packet at MTU 1500",
        {
            "layout": got == [(1500, 1, 0), (1500, 1, 185), (1500, 1, 370), (700, 0, 555)],
            "identification kept": all(f.identification == p.identification for f in fs),
            "reassembles": rebuilt == p,
            "under 1 s": elapsed < 1.0,
        },
    )


# 2


def test_criterion_2_offset_parity_decoding():
    decoded = f2_decode(parity_fragments())
    p = worked_packet()
    fs = fragment(p, 1500, f2_encode(p, "101", 1500))
    parities = ["even" if f.offset % 2 == 0 else "odd" for f in fs[1:]]
    gate(
        2,
        "hand-built set decodes 101; encoding 101 gives even/odd/even",
        {
            "decode": "".join(map(str, decoded)) == "101",
            "parities": parities == ["even", "odd", "even"],
            "round trip": f2_decode(fs) == (1, 0, 1) and reassemble(fs) == p,
        },
    )


# 3


def test_criterion_3_pmtud_fixture():
    res = pmtud_discover(tunnel_path())
    gate(
        3,
        "tunnelled path converges to 942",
        {
            "pmtu": res.pmtu == 942 and res.converged,
            "descent": res.descent == [1500, 1442, 942],
            "one filtered ICMP": res.icmp_filtered == 1,
            "one timeout retry": res.timeouts == 1 and res.probe_sizes.count(1442) == 2,
        },
    )


# 4


def _per_packet(method, n_covers=150, seed=4):
    rng = np.random.default_rng(seed)
    codec = Codec(method, key=b"bench")
    covers = honest_covers(rng, n_covers)
    caps = [codec.capacity(p, 1500) for p in covers]
    if method is Method.F3:
        caps = [c - c % 8 for c in caps]
    msg = random_bits(rng, sum(caps))
    run = run_channel(codec, covers, msg, PathConfig([Link(1500), Link(1500)]), framed=False)
    assert run.message == msg
    return codec, run


def test_criterion_4_bandwidth_formulas():
    checks = {}
    for method in (Method.F1, Method.F2I, Method.F4, Method.F5, Method.F6):
        _, run = _per_packet(method)
        checks[f"{method.value} PRBR = 1"] = run.stats.prbr == 1 and all(b == 1 for _, b in run.per_packet_prbr())
    _, run = _per_packet(Method.F2)
    checks["F2 PRBR = N_F - 1"] = all(b == n - 1 for n, b in run.per_packet_prbr())
    codec, run = _per_packet(Method.F3)
    # configured capacity: (F_S - IS) bytes per covert fragment, in bits
    expect = [
        8 * sum(max(0, len(f.payload) - IS_LEN) for f in fragment(p, 1500)[1 : 1 + codec.conventions.f3_covert_count])
        for p in run.covers
    ]
    checks["F3 PRBR = configured capacity"] = all(
        len(e.bits) == x == 8 * f3_capacity_bytes(p, 1500, 1) for e, x, p in zip(run.emissions, expect, run.covers)
    )
    res = covert_probe_exchange(ladder_path(), np.random.default_rng(4).bytes(3000), b"k")
    oracle = rbr_from_trace(res.trace)
    # independent recomputation from raw trace fields
    sent = [e for e in res.trace if e.kind == "sent" and e.node == 0]
    last = max(e.time for e in res.trace if e.kind == "delivered")
    by_hand = sum(8 * (e.total_length - 20) for e in sent) / ((last - sent[0].time) / 1000)
    checks["PMTUD RBR rel. error < 1e-9"] = (
        abs(res.stats.rbr - oracle) <= 1e-9 * oracle and abs(res.stats.rbr - by_hand) <= 1e-9 * by_hand
    )
    gate(4, "PRBR identities and PMTUD RBR", checks)


# 5

CASES = 1000


def _random_case(rng, method):
    """Random path, cover and message that ``method`` can carry without in-network refragmentation."""
    codec = Codec(method, key=rng.bytes(8))
    version = 6 if rng.random() < 0.2 else 4
    floor = 1280 if version == 6 else 576
    while True:
        n_links = int(rng.integers(1, 5))
        mtus = [int(rng.integers(floor, 9001)) for _ in range(n_links)]
        path = PathConfig(
            [Link(m, delay=int(rng.integers(0, 20))) for m in mtus], ip_version=version, rng_seed=int(rng.integers(2**31))
        )
        mtu = path.pmtu
        size = int(rng.integers(mtu + 1, min(4 * mtu, 60000)))
        if version == 4:
            p = make_ipv4(rng.bytes(size - 20), identification=int(rng.integers(0, 1 << 16)), ttl=int(rng.integers(1, 256)))
        else:
            p = make_ipv6(rng.bytes(size - 40), flow_label=int(rng.integers(0, 1 << 20)))
        cap = codec.capacity(p, mtu)
        if method is Method.F3:
            cap -= cap % 8
        if cap:
            return codec, p, random_bits(rng, cap), path, mtu


@pytest.mark.parametrize("method", list(Method), ids=lambda m: m.value)
def test_criterion_5_round_trip_property(method):
    rng = np.random.default_rng(5000 + list(Method).index(method))
    t0 = time.perf_counter()
    failures = 0
    v6 = 0
    for _ in range(CASES):
        codec, p, bits, path, mtu = _random_case(rng, method)
        v6 += path.ip_version == 6
        run = run_channel(codec, [p], bits, path, mtu=mtu, framed=False)
        failures += not (run.message == bits and run.recovered[0] == p)
    elapsed = time.perf_counter() - t0
    _criterion_5_results[method] = (failures, elapsed, v6)
    ok = failures == 0 and elapsed < 60
    print(f"  {method.value}: {CASES} cases ({v6} IPv6), {failures} failures, {elapsed:.1f} s")
    assert ok


_criterion_5_results: dict = {}


def test_criterion_5_summary():
    missing = [m for m in Method if m not in _criterion_5_results]
    if missing:
        pytest.skip("round-trip cases did not all run")
    total = sum(e for _, e, _ in _criterion_5_results.values())
    gate(
        5,
        f"{CASES} randomized netsim round trips per method",
        {
            **{f"{m.value} zero failures": _criterion_5_results[m][0] == 0 for m in Method},
            **{f"{m.value} has IPv6 cases": _criterion_5_results[m][2] > 0 for m in Method},
            f"under 60 s ({total:.1f} s total)": all(e < 60 for _, e, _ in _criterion_5_results.values()),
        },
    )


# 6

NORMALIZE_BITS = 1000


def _normalized_accuracy(method, seed):
    rng = np.random.default_rng(seed)
    codec = Codec(method)
    covers = []
    capacity = 0
    # one batch, so every cover has its own identification
    for p in honest_covers(rng, 3 * NORMALIZE_BITS):
        c = codec.capacity(p, 1500)
        if c:
            covers.append(p)
            capacity += c
        if capacity >= NORMALIZE_BITS:
            break
    msg = random_bits(rng, capacity)
    emissions = encode_stream(codec, covers, msg, 1500, framed=False)
    traffic = [tf for i, e in enumerate(emissions) for tf in e.timed(100 * i)]
    normalized = active_normalize(traffic, seed=seed)
    by_key = {}
    for t, f in normalized.arrivals:
        by_key.setdefault(f.reassembly_key, []).append((t, f))
    correct = total = 0
    coin = np.random.default_rng(seed + 1)
    for e in emissions:
        arrivals = by_key.get(e.packets[0].reassembly_key, [])
        try:
            decoded = codec.decode(arrivals)
        except Exception:  # noqa: BLE001 - an undecodable set counts as a coin flip
            decoded = ()
        k, n = decode_accuracy(e.bits, decoded, coin)
        correct += k
        total += n
    return correct / total, total


def test_criterion_6_active_warden():
    checks = {}
    for method in (Method.F1, Method.F2, Method.F2I, Method.F4, Method.F6):
        acc, n = _normalized_accuracy(method, seed=6)
        lo, hi = binomial_interval(n)
        print(f"  {method.value}: accuracy {acc:.4f} over {n} bits, interval [{lo:.4f}, {hi:.4f}]")
        checks[f"{method.value} acc {acc:.3f} in [{lo:.3f}, {hi:.3f}] (n={n})"] = lo <= acc <= hi and n >= NORMALIZE_BITS
    key = b"k"
    rng = np.random.default_rng(6)
    codec = Codec(Method.F3, key=key)
    covers = honest_covers(rng, 20)
    steg = rng.bytes(800)
    emissions = encode_stream(codec, covers, bytes_to_bits(steg), 1500, framed=True)
    traffic = [tf for i, e in enumerate(emissions) for tf in e.timed(100 * i)]
    kept = active_normalize(traffic, seed=6, check_overlap=False)
    sets = {fs[0].reassembly_key: [(0, f) for f in fs] for fs in fragment_sets(kept.packets)}
    got, rebuilt = decode_stream(codec, [sets[e.packets[0].reassembly_key] for e in emissions], 1500, framed=True)
    checks["F3 extracts without overlap checking"] = bits_to_bytes(got) == steg and rebuilt == covers
    dropped = active_normalize(traffic, seed=6, check_overlap=True)
    checks["F3 sets dropped with overlap checking"] = not any(
        f.reassembly_key == e.packets[0].reassembly_key for e in emissions if e.bits for f in dropped.packets
    )
    gate(6, "normalization reduces decoding to chance", checks)


# 7


def _stream(method, sets, seed):
    rng = np.random.default_rng(seed)
    codec = Codec(method)
    # one batch, so every cover has its own identification
    covers = [p for p in honest_covers(rng, 4 * sets) if codec.capacity(p, 1500)][:sets]
    assert len(covers) == sets
    out = []
    for p in covers:
        out.extend(codec.encode(p, random_bits(rng, codec.capacity(p, 1500)), 1500).packets)
    return out


def test_criterion_7_detector_contrast():
    n = 200
    murdoch = detect_size_irregularity(_stream(Method.MURDOCH, n, 7))
    f2 = detect_size_irregularity(_stream(Method.F2, n, 7))
    f2i = detect_size_irregularity(_stream(Method.F2I, n, 7))
    for name, rep in (("Murdoch", murdoch), ("F2", f2), ("F2i", f2i)):
        print(f"  {name}: p = {rep.p_value:.3g} over {rep.samples} sets")
    all_mode = detect_probe_divergence(covert_probe_exchange(ladder_path(), bytes(3000), b"k").trace)
    first = detect_probe_divergence(covert_probe_exchange(tunnel_path(), b"a short secret", b"k", mode="first").trace)
    gate(
        7,
        "irregularity flags Murdoch and F2, not F2i; divergence flags all-probes only",
        {
            "Murdoch flagged": murdoch.p_value < 0.01 and murdoch.samples >= n,
            "F2 flagged": f2.p_value < 0.01 and f2.samples >= n,
            "F2i passes": f2i.p_value >= 0.01 and f2i.samples >= n,
            "all-probes flagged": all_mode.suspicious,
            "first-probe passes": not first.suspicious,
        },
    )


# 8

FUZZ = 1_000_000


def _fuzz_inputs(rng, n):
    seeds = [
        serialize(make_ipv4(bytes(40), identification=7)),
        serialize(make_ipv4(b"", flag_df=1)),
        serialize(make_ipv6(bytes(64))),
        serialize(fragment(make_ipv6(bytes(3000)), 1280, identification=3)[1]),
    ]
    pool = rng.bytes(4 * n)
    kind = rng.integers(0, 3, n)
    pos = rng.integers(0, 4 * n - 100, n)
    lens = rng.integers(0, 100, n)
    picks = rng.integers(0, len(seeds), n)
    flips = rng.integers(0, 8 * 60, (n, 3))
    cut = rng.integers(-8, 9, n)
    for i in range(n):
        if kind[i] == 0:
            yield pool[pos[i] : pos[i] + lens[i]]
        elif kind[i] == 1:
            # plausible version nibble so parsing gets past the first byte
            raw = bytearray(pool[pos[i] : pos[i] + lens[i]])
            if raw:
                raw[0] = (0x45 if i % 2 else 0x60) | (raw[0] & 0x0F if i % 4 == 3 else 0)
            yield bytes(raw)
        else:
            raw = bytearray(seeds[picks[i]])
            for bit in flips[i]:
                if bit // 8 < len(raw):
                    raw[bit // 8] ^= 1 << (bit % 8)
            c = int(cut[i])
            yield bytes(raw[:c] if c < 0 else raw + bytes(c))


def test_criterion_8_parse_fuzz_and_checksum():
    rng = np.random.default_rng(8)
    crashes = 0
    parsed = 0
    for data in _fuzz_inputs(rng, FUZZ):
        try:
            parse(data)
            parsed += 1
        except PacketError:
            pass
        except Exception:  # noqa: BLE001 - anything else is a crash
            crashes += 1
    print(f"  {FUZZ} fuzzed parses, {parsed} accepted, {crashes} crashes")
    mismatches = 0
    for _ in range(500):
        hdr = bytearray(rng.bytes(20))
        hdr[0] = 0x45
        hdr[10:12] = b"\x00\x00"
        if internet_checksum(bytes(hdr)) != naive_checksum(bytes(hdr)):
            mismatches += 1
        fields = dict(
            identification=int(rng.integers(0, 1 << 16)),
            ttl=int(rng.integers(0, 256)),
            protocol=int(rng.integers(0, 256)),
            src_addr=int(rng.integers(0, 1 << 32)),
            dst_addr=int(rng.integers(0, 1 << 32)),
            fragment_offset=int(rng.integers(0, 8192)),
            flag_mf=int(rng.integers(0, 2)),
        )
        wire = serialize(make_ipv4(b"", **fields))
        if int.from_bytes(wire[10:12], "big") != naive_checksum(wire[:10] + b"\x00\x00" + wire[10 + 2 : 20]):
            mismatches += 1
    gate(
        8,
        "fuzzed parsing and checksum oracle",
        {
            f"no crashes in {FUZZ} parses": crashes == 0,
            "checksum matches naive oracle on 500 headers": mismatches == 0,
            "fuzz reached valid packets": parsed > 0,
        },
    )


def test_interval_width():
    # the interval used by criterion 6 is 0.5 +/- 1.96 * sqrt(0.25 / n)
    lo, hi = binomial_interval(1000)
    assert hi - 0.5 == pytest.approx(1.96 * math.sqrt(0.25 / 1000))
