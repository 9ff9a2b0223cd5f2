import struct
import warnings

import numpy as np
import pytest

from headergan.encoding import fit_schema, train_embeddings
from headergan.trace_io import ReferenceSpec, generate_reference


def ipv4_bytes(dotted):
    return bytes(int(x) for x in dotted.split("."))


def tcp_frame(src="10.0.0.1", dst="10.0.0.2", sport=1234, dport=80, flags=0x02, ttl=64, tos=0, total_len=40, frag=0):
    ip = struct.pack("!BBHHHBBH4s4s", 0x45, tos, total_len, 1, frag, ttl, 6, 0, ipv4_bytes(src), ipv4_bytes(dst))
    tcp = struct.pack("!HHIIBBHHH", sport, dport, 0, 0, 5 << 4, flags, 1024, 0, 0)
    return b"\x00" * 12 + b"\x08\x00" + ip + tcp


def udp_frame(src="10.0.0.3", dst="10.0.0.4", sport=5353, dport=53, ttl=128, tos=0, total_len=60):
    ip = struct.pack("!BBHHHBBH4s4s", 0x45, tos, total_len, 1, 0, ttl, 17, 0, ipv4_bytes(src), ipv4_bytes(dst))
    udp = struct.pack("!HHHH", sport, dport, total_len - 20, 0)
    return b"\x00" * 12 + b"\x08\x00" + ip + udp


def arp_frame():
    return b"\xff" * 6 + b"\x00" * 6 + b"\x08\x06" + b"\x00" * 28


def pcap_bytes(packets, little_endian=True, linktype=1):
    """packets: iterable of (ts_sec, ts_usec, frame_bytes)."""
    e = "<" if little_endian else ">"
    out = [struct.pack(e + "IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, linktype)]
    for sec, usec, frame in packets:
        out.append(struct.pack(e + "IIII", sec, usec, len(frame), len(frame)) + frame)
    return b"".join(out)


@pytest.fixture(scope="session")
def small_trace():
    return generate_reference(ReferenceSpec(n_records=200, seed=7))


@pytest.fixture(scope="session")
def small_schema(small_trace):
    return fit_schema(small_trace, max_vocab=64, buckets_per_field=8)


@pytest.fixture(scope="session")
def small_table(small_trace, small_schema):
    return train_embeddings(small_trace, small_schema, dim=8, epochs=3, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _quiet_degenerate_bucket_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="field .* is constant")
        yield


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
