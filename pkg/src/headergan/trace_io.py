"""Header-trace ingestion (CSV, classic PCAP), seeded reference traces, CSV export."""

from __future__ import annotations

import csv
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import TraceFormatError

FIELDS = (
    "src_ip",
    "dst_ip",
    "src_port",
    "dst_port",
    "protocol",
    "tos",
    "flag",
    "ttl",
    "time",
    "pkt_len",
)
DISCRETE_FIELDS = FIELDS[:7]
CONTINUOUS_FIELDS = FIELDS[7:]
INT_FIELDS = ("src_port", "dst_port", "tos")


@dataclass(frozen=True)
class HeaderRecord:
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: str
    tos: int
    flag: str
    ttl: float
    time: float
    pkt_len: float

    def __post_init__(self):
        for name in ("src_port", "dst_port"):
            v = getattr(self, name)
            if not 0 <= v <= 65535:
                raise TraceFormatError(f"{name}={v} outside [0, 65535]")
        if not 0 <= self.tos <= 255:
            raise TraceFormatError(f"tos={self.tos} outside [0, 255]")
        if not 0 <= self.ttl <= 255:
            raise TraceFormatError(f"ttl={self.ttl} outside [0, 255]")
        if not (self.time >= 0 and math.isfinite(self.time)):
            raise TraceFormatError(f"time={self.time} must be finite and >= 0")
        if not (self.pkt_len > 0 and math.isfinite(self.pkt_len)):
            raise TraceFormatError(f"pkt_len={self.pkt_len} must be finite and > 0")

    def value(self, name: str):
        return getattr(self, name)

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, f) for f in FIELDS)


def make_record(values: dict) -> HeaderRecord:
    """Build a record from loosely typed values (strings, numpy scalars)."""
    kw = {}
    for name in FIELDS:
        v = values[name]
        if name in INT_FIELDS:
            kw[name] = int(v)
        elif name in CONTINUOUS_FIELDS:
            kw[name] = float(v)
        else:
            kw[name] = str(v)
    return HeaderRecord(**kw)


@dataclass
class TraceDataset:
    records: list[HeaderRecord]
    source_label: str = "synthetic"
    skipped: Counter = field(default_factory=Counter)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def subset(self, indices: Iterable[int], label: str | None = None) -> "TraceDataset":
        return TraceDataset([self.records[i] for i in indices], label or self.source_label)

    def __eq__(self, other):
        if not isinstance(other, TraceDataset):
            return NotImplemented
        return self.records == other.records


def _rebase(records: list[HeaderRecord]) -> list[HeaderRecord]:
    if not records:
        return records
    t0 = min(r.time for r in records)
    if t0 == 0:
        return records
    out = []
    for r in records:
        vals = dict(zip(FIELDS, r.as_tuple()))
        vals["time"] = r.time - t0
        out.append(HeaderRecord(**vals))
    return out


# -- CSV ---------------------------------------------------------------------


def read_csv(path) -> TraceDataset:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise TraceFormatError(f"{path}: empty file")
        header = [h.strip() for h in reader.fieldnames]
        missing = [f for f in FIELDS if f not in header]
        if missing:
            raise TraceFormatError(f"{path}: missing column(s): {', '.join(missing)}")
        reader.fieldnames = header
        records = []
        # line 1 is the header
        for lineno, row in enumerate(reader, start=2):
            try:
                records.append(make_record({k: row[k].strip() for k in FIELDS}))
            except (ValueError, TypeError, AttributeError) as exc:
                raise TraceFormatError(f"{path}: row {lineno}: {exc}") from None
    if not records:
        raise TraceFormatError(f"{path}: no data rows")
    return TraceDataset(_rebase(records), source_label=path.name)


def _fmt(name, v) -> str:
    if name in CONTINUOUS_FIELDS:
        return repr(float(v))
    return str(v)


def write_csv(dataset: TraceDataset, path) -> None:
    if len(dataset) == 0:
        raise TraceFormatError("refusing to write an empty dataset")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIELDS)
        for r in dataset.records:
            w.writerow([_fmt(n, v) for n, v in zip(FIELDS, r.as_tuple())])


# -- PCAP --------------------------------------------------------------------

MAGIC_BE = b"\xa1\xb2\xc3\xd4"
MAGIC_LE = b"\xd4\xc3\xb2\xa1"
LINKTYPE_ETHERNET = 1
ETH_HDR = 14
TCP_FLAG_ORDER = ((0x01, "F"), (0x02, "S"), (0x04, "R"), (0x08, "P"), (0x10, "A"), (0x20, "U"))


def tcp_flag_token(flags: int) -> str:
    s = "".join(ch for bit, ch in TCP_FLAG_ORDER if flags & bit)
    return s or "NONE"


def _parse_frame(frame: bytes, skipped: Counter):
    """Return the header-field dict for an Ethernet/IPv4/TCP|UDP frame, or None."""
    if len(frame) < ETH_HDR:
        skipped["short"] += 1
        return None
    ethertype = struct.unpack_from("!H", frame, 12)[0]
    if ethertype != 0x0800:
        skipped["non_ipv4"] += 1
        return None
    if len(frame) < ETH_HDR + 20:
        skipped["short"] += 1
        return None
    vihl, tos, total_len, _ident, frag, ttl, proto = struct.unpack_from("!BBHHHBB", frame, ETH_HDR)
    if vihl >> 4 != 4:
        skipped["non_ipv4"] += 1
        return None
    ihl = (vihl & 0x0F) * 4
    if frag & 0x3FFF:
        skipped["fragment"] += 1
        return None
    if proto not in (6, 17):
        skipped["non_tcp_udp"] += 1
        return None
    l4 = ETH_HDR + ihl
    need = 20 if proto == 6 else 8
    if ihl < 20 or len(frame) < l4 + need:
        skipped["short"] += 1
        return None
    src_ip = ".".join(str(b) for b in frame[ETH_HDR + 12 : ETH_HDR + 16])
    dst_ip = ".".join(str(b) for b in frame[ETH_HDR + 16 : ETH_HDR + 20])
    sport, dport = struct.unpack_from("!HH", frame, l4)
    if proto == 6:
        protocol, flag = "TCP", tcp_flag_token(frame[l4 + 13] & 0x3F)
    else:
        protocol, flag = "UDP", "NONE"
    if total_len == 0:
        skipped["bad_length"] += 1
        return None
    return dict(
        src_ip=src_ip,
        dst_ip=dst_ip,
        src_port=sport,
        dst_port=dport,
        protocol=protocol,
        tos=tos,
        flag=flag,
        ttl=float(ttl),
        pkt_len=float(total_len),
    )


def read_pcap(path) -> TraceDataset:
    """Decode a classic (non-ng) PCAP with Ethernet framing.

    Packets that are not IPv4 TCP/UDP, IP fragments, and frames too short for
    the required headers are skipped; the dataset's ``skipped`` counter says why.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 24:
        raise TraceFormatError(f"{path}: truncated global header")
    magic = data[:4]
    if magic == MAGIC_BE:
        end = ">"
    elif magic == MAGIC_LE:
        end = "<"
    else:
        raise TraceFormatError(f"{path}: bad magic 0x{magic.hex()}")
    linktype = struct.unpack_from(end + "I", data, 20)[0]
    if linktype != LINKTYPE_ETHERNET:
        raise TraceFormatError(f"{path}: unsupported link type {linktype}")

    rows, stamps = [], []
    skipped: Counter = Counter()
    off, n = 24, 0
    while off < len(data):
        if off + 16 > len(data):
            raise TraceFormatError(f"{path}: truncated record header at packet {n}")
        ts_sec, ts_usec, incl_len, _orig = struct.unpack_from(end + "IIII", data, off)
        off += 16
        if off + incl_len > len(data):
            raise TraceFormatError(f"{path}: truncated packet data at packet {n}")
        parsed = _parse_frame(data[off : off + incl_len], skipped)
        off += incl_len
        n += 1
        if parsed is not None:
            rows.append(parsed)
            stamps.append(ts_sec * 1_000_000 + ts_usec)

    # integer microseconds keep the rebase exact
    t0 = min(stamps) if stamps else 0
    records = [make_record({**row, "time": (ts - t0) / 1e6}) for row, ts in zip(rows, stamps)]
    return TraceDataset(records, source_label=path.name, skipped=skipped)


def read_trace(path) -> TraceDataset:
    path = Path(path)
    if path.suffix.lower() in (".pcap", ".cap"):
        return read_pcap(path)
    return read_csv(path)


# -- seeded reference traces -------------------------------------------------


def _default_ports():
    return {
        "TCP": {80: 0.45, 443: 0.4, 22: 0.1, 8080: 0.05},
        "UDP": {53: 0.7, 123: 0.2, 5353: 0.1},
    }


def _default_pkt_len():
    # per protocol: (mean, std, weight) components, clipped to [20, 1500]
    return {
        "TCP": [(60.0, 10.0, 0.45), (1400.0, 80.0, 0.4), (600.0, 150.0, 0.15)],
        "UDP": [(90.0, 20.0, 0.7), (300.0, 60.0, 0.3)],
    }


def _default_flags():
    return {
        "TCP": {"A": 0.5, "PA": 0.3, "S": 0.1, "SA": 0.05, "FA": 0.05},
        "UDP": {"NONE": 1.0},
    }


@dataclass
class ReferenceSpec:
    """Parameters of a synthetic header trace with cross-field correlations."""

    n_records: int = 2000
    seed: int = 7
    protocol_weights: dict = field(default_factory=lambda: {"TCP": 0.7, "UDP": 0.3})
    port_rules: dict = field(default_factory=_default_ports)
    flag_rules: dict = field(default_factory=_default_flags)
    # (mean, std, weight)
    ttl_mixture: list = field(default_factory=lambda: [(64.0, 2.0, 0.6), (128.0, 3.0, 0.3), (250.0, 2.0, 0.1)])
    arrival_rate: float = 100.0
    pkt_len_rules: dict = field(default_factory=_default_pkt_len)
    tos_weights: dict = field(default_factory=lambda: {0: 0.85, 8: 0.1, 184: 0.05})
    n_clients: int = 12
    n_servers: int = 6
    n_src_ports: int = 16


def _draw(rng, table: dict, n: int) -> list:
    keys = list(table)
    p = np.asarray([table[k] for k in keys], dtype=float)
    idx = rng.choice(len(keys), size=n, p=p / p.sum())
    return [keys[i] for i in idx]


def _mixture(rng, comps, n, lo, hi) -> np.ndarray:
    w = np.asarray([c[2] for c in comps], dtype=float)
    which = rng.choice(len(comps), size=n, p=w / w.sum())
    mu = np.asarray([c[0] for c in comps])[which]
    sd = np.asarray([c[1] for c in comps])[which]
    return np.clip(rng.normal(mu, sd), lo, hi)


def _zipf_weights(n: int) -> dict:
    w = 1.0 / np.arange(1, n + 1)
    return dict(zip(range(n), w / w.sum()))


def generate_reference(spec: ReferenceSpec) -> TraceDataset:
    """Deterministic synthetic trace: protocol drives port, flag and length draws."""
    n = spec.n_records
    if n <= 0:
        raise TraceFormatError("n_records must be positive")
    rng = np.random.default_rng(spec.seed)

    protocols = _draw(rng, spec.protocol_weights, n)
    proto_arr = np.asarray(protocols)
    dst_port = np.zeros(n, dtype=np.int64)
    pkt_len = np.zeros(n)
    flags = [""] * n
    for proto in spec.protocol_weights:
        idx = np.flatnonzero(proto_arr == proto)
        if idx.size == 0:
            continue
        dst_port[idx] = _draw(rng, spec.port_rules[proto], idx.size)
        pkt_len[idx] = np.round(_mixture(rng, spec.pkt_len_rules[proto], idx.size, 20, 1500))
        for i, f in zip(idx, _draw(rng, spec.flag_rules[proto], idx.size)):
            flags[i] = f

    clients = _draw(rng, _zipf_weights(spec.n_clients), n)
    servers = _draw(rng, _zipf_weights(spec.n_servers), n)
    sports = rng.integers(0, spec.n_src_ports, size=n)
    tos = _draw(rng, spec.tos_weights, n)
    ttl = np.round(_mixture(rng, spec.ttl_mixture, n, 1, 255))
    gaps = rng.exponential(1.0 / spec.arrival_rate, size=n)
    gaps[0] = 0.0
    times = np.cumsum(gaps)

    records = [
        HeaderRecord(
            src_ip=f"10.0.{c // 256}.{c % 256 + 1}",
            dst_ip=f"192.168.{s // 256}.{s % 256 + 1}",
            src_port=int(49152 + sp * 97),
            dst_port=int(dp),
            protocol=protocols[i],
            tos=int(t),
            flag=flags[i],
            ttl=float(tt),
            time=float(tm),
            pkt_len=float(pl),
        )
        for i, (c, s, sp, dp, t, tt, tm, pl) in enumerate(
            zip(clients, servers, sports, dst_port, tos, ttl, times, pkt_len)
        )
    ]
    return TraceDataset(records, source_label="synthetic")



def to_interarrival(dataset: TraceDataset) -> TraceDataset:
    """Replace relative timestamps with gaps to the previous record (first gap is 0)."""
    out, prev = [], None
    for r in dataset.records:
        vals = dict(zip(FIELDS, r.as_tuple()))
        vals["time"] = 0.0 if prev is None else max(r.time - prev, 0.0)
        prev = r.time
        out.append(HeaderRecord(**vals))
    return TraceDataset(out, dataset.source_label, dataset.skipped)
