import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oversteg.errors import ChannelExhausted, ConfigError
from oversteg.fixtures import tunnel_path
from oversteg.netsim import Link, PathConfig
from oversteg.plpmtud import (
    SEGMENT_HEADER,
    PlpmtudSearch,
    marker,
    parse_segment,
    plpmtud_run,
    plpmtud_search,
    retransmission_pairs,
    rsteg_exchange,
)
from oversteg.pmtud import pmtud_discover


@given(st.lists(st.integers(600, 1500), min_size=1, max_size=4), st.sampled_from([1, 8, 16]))
def test_search_lands_within_resolution(mtus, res):
    path = PathConfig([Link(1500)] + [Link(m) for m in mtus])
    true = path.pmtu
    found = plpmtud_search(path, 512, res)
    assert true - res < found <= true


def test_probe_count_bound():
    path = PathConfig([Link(1500), Link(1000)])
    run = plpmtud_run(path, data=b"")
    assert len(run.search.probes) <= math.ceil(math.log2((1501 - 512) / 8))


def test_start_equal_to_pmtu():
    path = PathConfig([Link(1500), Link(512)])
    assert plpmtud_search(path, 512, 8) == 512


def test_exact_resolution_agrees_with_pmtud():
    path = tunnel_path()
    assert plpmtud_search(path, 512, 1) == pmtud_discover(path).pmtu == 942
    assert plpmtud_search(path, 512, 8) == 936


def test_search_validation():
    with pytest.raises(ConfigError):
        PlpmtudSearch(600, 500)
    with pytest.raises(ConfigError):
        PlpmtudSearch(500, 600, 0)
    with pytest.raises(ConfigError):
        plpmtud_run(PathConfig([Link(1500)]), start=1600)


def test_transfer_delivers_data():
    data = bytes(range(256)) * 40
    run = plpmtud_run(PathConfig([Link(1500), Link(1200)]), data=data)
    assert run.delivered == data
    # once the search settles, segments go out at the found size
    assert 1192 < run.pmtu <= 1200
    assert {t.size for t in run.sent[-5:]} == {run.pmtu}


@pytest.mark.parametrize("seed", range(10))
def test_lossy_path_retransmits_verbatim(seed):
    path = PathConfig([Link(1500, 1, 0.1), Link(1300, 1, 0.1)], rng_seed=seed)
    data = bytes(i % 253 for i in range(6000))
    run = plpmtud_run(path, data=data)
    assert run.delivered == data
    for original, again in retransmission_pairs(run.trace):
        assert original == again


def test_rsteg_hides_in_retransmissions():
    path = PathConfig([Link(1500), Link(1200)])
    data = bytes(i % 200 for i in range(20000))
    steg = b"the quick brown fox" * 20
    res = rsteg_exchange(path, steg, b"key", schedule=[10, 12, 14], data=data)
    assert res.received_steg == steg
    assert res.delivered == data
    pairs = retransmission_pairs(res.trace)
    covert = [(a, b) for a, b in pairs if a != b]
    assert covert
    for a, b in covert:
        seq, _, _, area = parse_segment(b)
        assert area.startswith(marker(b"key", seq))
        assert a.total_length == b.total_length
        assert parse_segment(a)[:3] == parse_segment(b)[:3]
    assert res.stats.packets_used <= 3
    assert res.stats.prbr == 8 * len(steg) / res.stats.packets_used


def test_rsteg_user_data_intact():
    path = PathConfig([Link(1500), Link(1000)])
    data = bytes(i % 97 for i in range(15000))
    res = rsteg_exchange(path, b"secret", b"k", schedule=[9], data=data)
    assert res.delivered == data
    assert res.received_steg == b"secret"


def test_rsteg_exhaustion():
    path = PathConfig([Link(1500), Link(1000)])
    with pytest.raises(ChannelExhausted):
        rsteg_exchange(path, bytes(5000), b"k", schedule=[9], data=bytes(15000))
    with pytest.raises(ChannelExhausted):
        rsteg_exchange(path, b"x", b"k", schedule=[10_000], data=bytes(2000))
    with pytest.raises(ValueError):
        rsteg_exchange(path, b"", b"k", schedule=[9])


def test_segment_header_layout():
    assert SEGMENT_HEADER.size == 10


def test_empty_schedule_is_an_honest_run():
    path = PathConfig([Link(1500, 1, 0.05), Link(1000)], rng_seed=3)
    data = bytes(i % 77 for i in range(9000))
    covert = rsteg_exchange(path, b"unsent", b"k", schedule=[], data=data)
    honest = plpmtud_run(path, data=data)
    assert covert.trace == honest.trace
    assert [e.packet for e in covert.trace] == [e.packet for e in honest.trace]
    assert covert.stats.bits_sent == 0 and covert.received_steg == b""


def test_single_chunk_marker_and_stream():
    path = PathConfig([Link(1500), Link(1000)])
    data = bytes(i % 97 for i in range(15000))
    chunk = bytes([0xAB]) * 40
    res = rsteg_exchange(path, chunk, b"k", schedule=[9], data=data)
    assert res.received_steg == chunk
    assert res.delivered == data
    (_, again), = [(a, b) for a, b in retransmission_pairs(res.trace) if a != b]
    area = parse_segment(again)[3]
    assert area[:32] == marker(b"k", 9)
    assert chunk in area
