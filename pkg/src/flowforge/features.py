"""Flow feature extraction: 20 numerical and 16 categorical features per flow.

The column names and order are frozen in ``data/feature_schema.json``,
which is the single authority for dataset files. Numerical statistics
use the population standard deviation (defined for a single packet) and
mean inter-arrival time (last-first)/(n-1).
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .capture import PacketRecord, format_mac, tcp_flag_letters
from .flows import Flow


def _load_schema() -> dict:
    with resources.files("flowforge.data").joinpath("feature_schema.json").open("rb") as fh:
        return json.load(fh)


SCHEMA = _load_schema()
SCHEMA_VERSION: int = SCHEMA["version"]
NUMERICAL_FEATURES: list[str] = list(SCHEMA["numerical"])
CATEGORICAL_FEATURES: list[str] = list(SCHEMA["categorical"])
LABEL_COLUMNS: list[str] = list(SCHEMA["label_columns"])
DATASET_COLUMNS: list[str] = NUMERICAL_FEATURES + CATEGORICAL_FEATURES + LABEL_COLUMNS

assert len(NUMERICAL_FEATURES) == 20 and len(CATEGORICAL_FEATURES) == 16

# Service names for the well-known port range; anything unlisted below
# 1024 is rendered as "port<n>".
WELL_KNOWN_PORTS = {
    20: "ftp-data", 21: "ftp", 22: "ssh", 23: "telnet", 25: "smtp", 53: "domain",
    67: "bootps", 68: "bootpc", 80: "http", 110: "pop3", 123: "ntp", 143: "imap",
    161: "snmp", 443: "https", 465: "smtps", 587: "submission", 993: "imaps",
    995: "pop3s",
}


@dataclass(frozen=True, slots=True)
class DirStats:
    """Summary of one direction of a flow; all zeros when it saw no packets."""

    pkt_count: int
    byte_count: int
    pkt_len_min: float
    pkt_len_max: float
    pkt_len_mean: float
    pkt_len_std: float
    iat_mean_s: float
    tcp_init_win: int
    ttl_mode: int

    def values(self) -> list[float]:
        return [
            float(self.pkt_count),
            float(self.byte_count),
            self.pkt_len_min,
            self.pkt_len_max,
            self.pkt_len_mean,
            self.pkt_len_std,
            self.iat_mean_s,
            float(self.tcp_init_win),
            float(self.ttl_mode),
        ]


EMPTY_DIR_STATS = DirStats(0, 0, 0.0, 0.0, 0.0, 0.0, 0.0, 0, 0)


def _mode(values) -> int:
    """Most frequent value; ties resolve to the smallest."""
    counts = Counter(values)
    return min(counts, key=lambda v: (-counts[v], v))


def summarize_direction(packets: list[PacketRecord]) -> DirStats:
    if not packets:
        return EMPTY_DIR_STATS
    lens = [p.ip_total_len for p in packets]
    n = len(lens)
    mean = sum(lens) / n
    std = math.sqrt(sum((x - mean) ** 2 for x in lens) / n)
    iat = (packets[-1].ts_us - packets[0].ts_us) / 1e6 / (n - 1) if n >= 2 else 0.0
    first_tcp_win = next((p.tcp_window for p in packets if p.protocol == 6), 0)
    return DirStats(
        pkt_count=n,
        byte_count=sum(lens),
        pkt_len_min=float(min(lens)),
        pkt_len_max=float(max(lens)),
        pkt_len_mean=mean,
        pkt_len_std=std,
        iat_mean_s=iat,
        tcp_init_win=first_tcp_win or 0,
        ttl_mode=_mode(p.ttl for p in packets),
    )


@dataclass(frozen=True, slots=True)
class FeatureVector:
    """The full 36-feature flow representation (20 numerical + 16 categorical)."""

    duration_s: float
    local: DirStats
    remote: DirStats
    byte_ratio: float
    protocol: int
    local_ip: str
    remote_ip: str
    local_port: int
    remote_port: int
    local_mac: str
    remote_mac: str
    local_tcp_flags_union: str
    remote_tcp_flags_union: str
    local_tcp_options_summary: str
    remote_tcp_options_summary: str
    first_pkt_direction: str
    vlan_id: str
    dscp_local: int
    dscp_remote: int
    l4_service_guess: str

    def numerical(self) -> list[float]:
        return [self.duration_s] + self.local.values() + self.remote.values() + [self.byte_ratio]

    def categorical(self) -> list[str]:
        return [
            str(self.protocol),
            self.local_ip,
            self.remote_ip,
            str(self.local_port),
            str(self.remote_port),
            self.local_mac,
            self.remote_mac,
            self.local_tcp_flags_union,
            self.remote_tcp_flags_union,
            self.local_tcp_options_summary,
            self.remote_tcp_options_summary,
            self.first_pkt_direction,
            self.vlan_id,
            str(self.dscp_local),
            str(self.dscp_remote),
            self.l4_service_guess,
        ]


def _flags_union(packets) -> str:
    union = 0
    for p in packets:
        if p.tcp_flags:
            union |= p.tcp_flags
    return tcp_flag_letters(union)


def _options_summary(packets) -> str:
    lens = sorted({p.tcp_opt_len for p in packets if p.tcp_opt_len})
    return "+".join(str(x) for x in lens) if lens else "none"


def _service_guess(protocol: int, port_a: int, port_b: int) -> str:
    if protocol not in (6, 17):
        return "none"
    low = min(port_a, port_b)
    if low <= 1023:
        return WELL_KNOWN_PORTS.get(low, f"port{low}")
    return "unregistered"


def extract_features(flow: Flow) -> FeatureVector:
    if flow.packet_count == 0:
        raise ValueError("cannot extract features from an empty flow")
    local = summarize_direction(flow.local_packets)
    remote = summarize_direction(flow.remote_packets)
    total_bytes = local.byte_count + remote.byte_count
    assert total_bytes > 0, "nonempty flow with zero bytes"
    byte_ratio = local.byte_count / total_bytes

    if flow.local_packets:
        local_mac = format_mac(flow.local_packets[0].src_mac)
        remote_mac = format_mac(flow.local_packets[0].dst_mac)
    else:
        local_mac = format_mac(flow.remote_packets[0].dst_mac)
        remote_mac = format_mac(flow.remote_packets[0].src_mac)
    first_pkt = min(
        flow.local_packets + flow.remote_packets, key=lambda p: p.ts_us
    )

    return FeatureVector(
        duration_s=(flow.last_ts_us - flow.first_ts_us) / 1e6,
        local=local,
        remote=remote,
        byte_ratio=byte_ratio,
        protocol=flow.key.protocol,
        local_ip=flow.local_ip,
        remote_ip=flow.remote_ip,
        local_port=flow.local_port,
        remote_port=flow.remote_port,
        local_mac=local_mac,
        remote_mac=remote_mac,
        local_tcp_flags_union=_flags_union(flow.local_packets),
        remote_tcp_flags_union=_flags_union(flow.remote_packets),
        local_tcp_options_summary=_options_summary(flow.local_packets),
        remote_tcp_options_summary=_options_summary(flow.remote_packets),
        first_pkt_direction=flow.first_pkt_direction,
        vlan_id="none" if first_pkt.vlan_id is None else str(first_pkt.vlan_id),
        dscp_local=_mode(p.dscp for p in flow.local_packets) if flow.local_packets else 0,
        dscp_remote=_mode(p.dscp for p in flow.remote_packets) if flow.remote_packets else 0,
        l4_service_guess=_service_guess(flow.key.protocol, flow.key.port_a, flow.key.port_b),
    )


def numerical_matrix(dataset: list[FeatureVector]) -> tuple[np.ndarray, list[str]]:
    """Stack the 20 numerical features into an n-by-20 float matrix.

    Column order follows NUMERICAL_FEATURES; row order follows the input.
    """
    if not dataset:
        raise ValueError("dataset must be nonempty")
    matrix = np.array([fv.numerical() for fv in dataset], dtype=np.float64)
    return matrix, list(NUMERICAL_FEATURES)
