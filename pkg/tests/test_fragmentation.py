import pytest
from hypothesis import given
from hypothesis import strategies as st

from oversteg.errors import DfViolation, IncompleteError, OverlapError, PlanError
from oversteg.fixtures import worked_packet
from oversteg.fragmentation import (
    ReassemblyBuffer,
    find_gaps,
    fragment,
    make_fragment,
    reassemble,
    reassemble_gap_tolerant,
)
from oversteg.packet import make_ipv4, make_ipv6

# (total length, MF, offset) read off the worked 5140-byte example
WORKED_LAYOUT = [(1500, 1, 0), (1500, 1, 185), (1500, 1, 370), (700, 0, 555)]


def test_worked_layout():
    fs = fragment(worked_packet(), 1500)
    assert [(f.total_length, int(f.mf), f.offset) for f in fs] == WORKED_LAYOUT
    assert all(f.identification == worked_packet().identification for f in fs)


def test_parity_plan_layout():
    fs = fragment(worked_packet(), 1500, [1280, 1320, 1320, 1200])
    assert fs.offsets == [0, 160, 325, 490]
    assert fs.total_lengths == [1300, 1340, 1340, 1220]


def test_fits_unchanged():
    p = make_ipv4(b"x" * 100)
    fs = fragment(p, 1500)
    assert list(fs) == [p]


def test_df_violation():
    with pytest.raises(DfViolation):
        fragment(make_ipv4(b"x" * 2000, flag_df=1), 1500)


@pytest.mark.parametrize(
    "plan",
    [[1480, 1480, 1480], [1484, 1480, 1480, 676], [1488, 1480, 1480, 672], [0, 5120], [5120]],
)
def test_bad_plans(plan):
    with pytest.raises(PlanError):
        fragment(worked_packet(), 1500, plan)


def test_reassemble_any_order():
    p = worked_packet()
    frags = list(fragment(p, 1500))
    assert reassemble(frags[::-1]) == p
    assert reassemble([frags[2], frags[0], frags[3], frags[1]]) == p


def test_refragmenting_a_fragment():
    p = worked_packet()
    first, *rest = fragment(p, 1500)
    small = list(fragment(first, 576))
    assert all(f.mf for f in small)
    assert small[0].offset == 0
    assert reassemble(small + rest) == p
    # a middle fragment keeps its base offset
    mid = list(fragment(rest[0], 576))
    assert mid[0].offset == 185


def test_duplicates_and_identical_overlap_tolerated():
    p = worked_packet()
    frags = list(fragment(p, 1500))
    assert reassemble(frags + [frags[1]]) == p
    # an overlapping piece with the same bytes
    extra = make_fragment(p, 100, p.payload[800:1600], True)
    assert reassemble(frags + [extra]) == p


def test_conflicting_overlap():
    p = worked_packet()
    frags = list(fragment(p, 1500))
    bad = make_fragment(p, 185, b"\xff" * 1480, True)
    with pytest.raises(OverlapError):
        reassemble(frags + [bad])


def test_incomplete_reports_missing():
    frags = list(fragment(worked_packet(), 1500))
    with pytest.raises(IncompleteError) as err:
        reassemble([frags[0], frags[2], frags[3]])
    assert err.value.missing == [(1480, 2960)]
    with pytest.raises(IncompleteError):
        reassemble(frags[:3])


def test_gap_tolerant():
    p = worked_packet()
    frags = list(fragment(p, 1500))
    shifted = [frags[0]] + [make_fragment(f, f.offset + 10, f.payload, f.mf) for f in frags[1:]]
    gaps = find_gaps(shifted)
    assert gaps == [(1480, 1560)]
    assert reassemble_gap_tolerant(shifted, gaps) == p
    with pytest.raises(IncompleteError):
        reassemble_gap_tolerant(shifted, [(1480, 1500)])


def test_reassembly_buffer():
    buf = ReassemblyBuffer()
    p, q = worked_packet(1), worked_packet(2)
    out = []
    for a, b in zip(fragment(p, 1500), fragment(q, 1500)):
        out += [x for x in (buf.add(a), buf.add(b)) if x is not None]
    assert out == [p, q]
    assert not buf.pending


def test_ipv6_fragmentation():
    p = make_ipv6(bytes(range(256)) * 12)
    fs = fragment(p, 1280, identification=77)
    assert all(f.total_length <= 1280 for f in fs)
    assert all(f.identification == 77 for f in fs)
    assert all(len(f.payload) % 8 == 0 for f in fs[:-1])
    assert reassemble(fs) == p


@given(st.integers(0, 20000), st.integers(68, 9000), st.integers(0, 0xFFFF))
def test_round_trip_property(size, mtu, ident):
    p = make_ipv4(bytes(i % 256 for i in range(size)), identification=ident)
    try:
        fs = fragment(p, mtu)
    except PlanError:
        assert mtu - 20 < 8
        return
    assert all(f.total_length <= max(mtu, p.total_length if len(fs) == 1 else 0) for f in fs)
    assert sum(len(f.payload) for f in fs) == size
    assert reassemble(fs) == p
