import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=50, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def naive_checksum(data: bytes) -> int:
    """Bit-at-a-time one's-complement sum; deliberately shares no code with the package."""
    if len(data) % 2:
        data = data + b"\x00"
    acc = 0
    for i in range(0, len(data), 2):
        word = 0
        for bit in range(16):
            byte = data[i + bit // 8]
            if byte >> (7 - bit % 8) & 1:
                word |= 1 << (15 - bit)
        acc += word
        if acc > 0xFFFF:
            acc = (acc & 0xFFFF) + 1
    return (~acc) & 0xFFFF


def manual_ipv4_header(total, ident, df, mf, offset, ttl, proto, src, dst, tos=0) -> bytes:
    """IPv4 header assembled field by field, checksum filled in with the naive oracle."""
    words = [
        (4 << 12) | (5 << 8) | tos,
        total,
        ident,
        (df << 14) | (mf << 13) | offset,
        (ttl << 8) | proto,
        0,
        src >> 16,
        src & 0xFFFF,
        dst >> 16,
        dst & 0xFFFF,
    ]
    raw = b"".join(w.to_bytes(2, "big") for w in words)
    csum = naive_checksum(raw)
    return raw[:10] + csum.to_bytes(2, "big") + raw[12:]


# acceptance results, printed once at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (ok, title, detail)
    print(f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}  [{detail}]")
