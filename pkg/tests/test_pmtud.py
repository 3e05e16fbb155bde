import hashlib

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oversteg.errors import ChannelExhausted, ConfigError
from oversteg.fixtures import tunnel_path, ladder_path
from oversteg.netsim import ICMP_DELIVERED, Link, PathConfig
from oversteg.packet import internet_checksum, ipv4_header_bytes, make_ipv4
from oversteg.pmtud import (
    TtlMarkRule,
    covert_probe_exchange,
    is_fake,
    mark_fake_icmp,
    pmtud_discover,
    pmtud_is,
    rbr_from_trace,
)


@given(st.lists(st.tuples(st.integers(576, 9000), st.sampled_from([0, 0, 20, 58])), min_size=1, max_size=6))
def test_discovers_smallest_limit(hops):
    links = [Link(m, overhead=o) for m, o in hops]
    path = PathConfig(links)
    res = pmtud_discover(path)
    assert res.converged
    assert res.pmtu == min(m - o for m, o in hops)
    # the final probe is the one that got through
    assert res.probe_sizes[-1] == res.pmtu


def test_tunnelled_path_with_filtered_icmp():
    res = pmtud_discover(tunnel_path())
    assert res.pmtu == 942
    assert res.descent == [1500, 1442, 942]
    assert res.timeouts == 1
    assert res.icmp_filtered == 1


def test_black_hole_reports_floor():
    path = PathConfig([Link(1500, filters_icmp=True), Link(1000)])
    res = pmtud_discover(path, max_probes=4)
    assert not res.converged
    assert res.pmtu == 68


def test_ipv6_discovery():
    path = PathConfig([Link(1500), Link(1400), Link(9000)], ip_version=6)
    assert pmtud_discover(path).pmtu == 1400


def test_is_and_mark():
    key = b"k"
    assert pmtud_is(key, 0x1234, 1) == hashlib.sha256(b"k\x12\x34\x01").digest()
    assert pmtud_is(key, 0x1234, 0) != pmtud_is(key, 0x1234, 1)
    with pytest.raises(ValueError):
        pmtud_is(key, 1, 2)
    p = make_ipv4(bytes(100), ttl=64, flag_df=1)
    icmp = mark_fake_icmp(p, TtlMarkRule(), 92)
    assert icmp.embedded_ttl == 65
    assert internet_checksum(ipv4_header_bytes(icmp.embedded_header)) == 0
    assert is_fake(icmp)
    assert not is_fake(mark_fake_icmp(p, TtlMarkRule("value", 78)))
    assert is_fake(mark_fake_icmp(p, TtlMarkRule("value", 78)), TtlMarkRule("value", 78))
    with pytest.raises(ConfigError):
        TtlMarkRule("odd")


def test_all_probes_mode():
    steg = bytes(range(256)) * 11 + b"tail"
    res = covert_probe_exchange(ladder_path(), steg, b"key")
    assert res.received == steg
    sizes = [p.total_length for p in res.probes_sent]
    assert sizes == [1072, 1064, 1056]
    assert len(res.fake_icmps) == 2
    assert all(i.src_addr == ladder_path().node_address(1) for i in res.fake_icmps)
    # each probe opens with the keyed mark and its control bit
    for n, p in enumerate(res.probes_sent):
        cb = int(n < len(sizes) - 1)
        assert p.payload[:32] == pmtud_is(b"key", p.identification, cb)
        assert p.df


def test_rbr_matches_trace():
    res = covert_probe_exchange(ladder_path(), bytes(3000), b"key")
    bits = sum(8 * (p.total_length - 20) for p in res.probes_sent)
    assert res.stats.rbr_bits == bits
    assert res.stats.rbr == pytest.approx(rbr_from_trace(res.trace), rel=1e-12)
    assert res.stats.prbr == 8 * 3000 / 3


def test_first_probe_mode_looks_honest():
    path = tunnel_path()
    res = covert_probe_exchange(path, b"short secret", b"key", mode="first")
    assert res.received == b"short secret"
    assert res.fake_icmps == []
    honest = pmtud_discover(path)
    assert [p.total_length for p in res.probes_sent] == honest.probe_sizes


def test_genuine_icmp_ignored_by_covert_sender():
    # a real router answers too; the sender only follows marked ICMPs
    path = PathConfig([Link(1500), Link(1200), Link(1500)])
    res = covert_probe_exchange(path, bytes(3000), b"key", known_pmtu=1200)
    assert res.received == bytes(3000)
    delivered = [e for e in res.trace if e.kind == ICMP_DELIVERED]
    assert len(delivered) == len(res.fake_icmps)


def test_errors():
    with pytest.raises(ConfigError):
        covert_probe_exchange(ladder_path(), b"x", b"k", known_pmtu=1400)
    with pytest.raises(ValueError):
        covert_probe_exchange(ladder_path(), b"", b"k")
    with pytest.raises(ChannelExhausted):
        covert_probe_exchange(ladder_path(), bytes(60000), b"k", ladder_step=200)
    with pytest.raises(ChannelExhausted):
        covert_probe_exchange(ladder_path(), bytes(2000), b"k", mode="first")


def test_ipv6_covert():
    path = PathConfig([Link(1500), Link(1400)], ip_version=6)
    res = covert_probe_exchange(path, bytes(range(200)) * 10, b"k")
    assert res.received == bytes(range(200)) * 10


def test_single_link_one_probe():
    res = pmtud_discover(PathConfig([Link(1500)]))
    assert res.pmtu == 1500 and res.probe_sizes == [1500]


def test_one_chunk_needs_no_forged_icmp():
    res = covert_probe_exchange(ladder_path(), b"tiny", b"k")
    assert len(res.probes_sent) == 1 and res.fake_icmps == []
    assert res.received == b"tiny"


def test_forged_mtus_descend_below_trigger():
    res = covert_probe_exchange(ladder_path(), bytes(5000), b"k")
    sizes = [p.total_length for p in res.probes_sent]
    for icmp, trigger in zip(res.fake_icmps, sizes):
        assert icmp.next_hop_mtu < trigger
        assert icmp.embedded_header.total_length == trigger


def test_prearranged_ttl_and_honest_icmp():
    import numpy as np

    from oversteg.packet import icmp_for

    p = make_ipv4(bytes(100), ttl=64, flag_df=1)
    assert mark_fake_icmp(p, TtlMarkRule("value", 77)).embedded_ttl == 77
    rng = np.random.default_rng(0)
    for ttl in rng.integers(0, 128, 200) * 2:
        q = make_ipv4(bytes(100), ttl=int(ttl), flag_df=1)
        assert is_fake(mark_fake_icmp(q))
        assert not is_fake(icmp_for(q, 576, 1))
