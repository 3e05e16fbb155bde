import numpy as np
import pytest

from oversteg.errors import ConfigError
from oversteg.fragcodecs import Codec, Method
from oversteg.netsim import DELIVERED, FRAGMENTED, Link, PathConfig
from oversteg.packet import make_ipv6
from oversteg.scenarios import fitting_message, random_bits, run_channel
from oversteg.warden import ActiveWarden, binomial_interval, detect_size_irregularity, honest_covers


def covers(n, seed=0):
    return honest_covers(np.random.default_rng(seed), n)


@pytest.mark.parametrize("index,method", list(enumerate(Method)))
def test_end_to_end(index, method):
    cov = covers(120, seed=index)
    codec = Codec(method, key=b"key")
    rng = np.random.default_rng(1)
    msg = random_bits(rng, min(64, fitting_message(codec, cov, 1500)))
    run = run_channel(codec, cov, msg, PathConfig([Link(1500), Link(1500), Link(1500)]))
    assert run.message == msg
    assert run.covers_intact
    assert run.bits_exact


def test_mid_path_roles_hide_from_downstream_warden():
    # SS and SR on a jumbo path segment; the warden past the SR sees whole packets
    path = PathConfig([Link(9000), Link(1500), Link(1500), Link(9000), Link(9000)])
    cov = covers(60)
    codec = Codec(Method.F2)
    msg = random_bits(np.random.default_rng(2), 40)
    run = run_channel(codec, cov, msg, path, ss_node=1, sr_node=3, warden_node=4)
    assert run.message == msg and run.covers_intact
    assert not any(p.is_fragment for p in run.warden.packets)
    assert len(run.warden.packets) == len(cov)


def test_warden_between_ss_and_sr_sees_fragments():
    path = PathConfig([Link(1500)] * 4)
    run = run_channel(Codec(Method.F2), covers(300), random_bits(np.random.default_rng(3), 200), path, warden_node=2)
    assert run.message is not None
    assert detect_size_irregularity(run.warden.observed).suspicious


def test_ss_must_receive_whole_covers():
    path = PathConfig([Link(1500), Link(9000), Link(1500)])
    with pytest.raises(ConfigError):
        run_channel(Codec(Method.F1), covers(5), (1,), path, ss_node=1)
    with pytest.raises(ConfigError):
        run_channel(Codec(Method.F1), covers(5), (1,), path, ss_node=2, sr_node=1)


def test_in_network_refragmentation_breaks_nothing_for_reassembly():
    # a narrower downstream link splits the covert fragments again
    path = PathConfig([Link(1500), Link(1000), Link(1500)])
    cov = covers(50)
    run = run_channel(Codec(Method.F4), cov, random_bits(np.random.default_rng(0), 8), path)
    assert run.covers_intact
    assert any(e.kind == FRAGMENTED for e in run.trace)


def test_ipv6_channel():
    rng = np.random.default_rng(5)
    cov = [make_ipv6(rng.bytes(int(n))) for n in rng.integers(3000, 8000, 40)]
    codec = Codec(Method.F2)
    msg = random_bits(rng, 30)
    run = run_channel(codec, cov, msg, PathConfig([Link(1500), Link(1500)], ip_version=6))
    assert run.message == msg and run.covers_intact


def test_active_warden_reduces_to_chance():
    path = PathConfig([Link(1500)] * 3, rng_seed=1)
    cov = covers(1000, seed=9)
    msg = random_bits(np.random.default_rng(9), 1000)
    run = run_channel(Codec(Method.F1), cov, msg, path, warden_node=1, normalizer=ActiveWarden(seed=4), framed=False)
    assert run.covers_intact
    lo, hi = binomial_interval(1000)
    assert lo <= run.accuracy(seed=0) <= hi
    assert sum(e.kind == DELIVERED for e in run.trace) > 0


def test_stats():
    cov = covers(100)
    run = run_channel(Codec(Method.MURDOCH), cov, random_bits(np.random.default_rng(0), 80), PathConfig([Link(1500)]))
    for n, b in run.per_packet_prbr():
        assert b == 4 * (n - 1)
    assert run.stats.duration > 0
    assert run.stats.rbr == run.stats.bits_sent / run.stats.duration
