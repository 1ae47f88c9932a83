"""Bidirectional flow assembly: canonical 5-tuple grouping with an idle timeout.

A flow is the packet sequence sharing one canonical 5-tuple; a silence
longer than the idle timeout splits the sequence and increments the
key's epoch counter. Assembly is a single streaming fold over packets
sorted by timestamp; the result does not depend on input order.
"""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field
from enum import Enum

from .capture import PacketRecord, ip_to_int

DEFAULT_IDLE_TIMEOUT_S = 60.0


class Orientation(Enum):
    """Packet direction relative to the canonical key: FORWARD means the
    source is the key's (ip_a, port_a) endpoint. Ties (equal endpoints)
    resolve to FORWARD."""

    FORWARD = "forward"
    REVERSE = "reverse"


@dataclass(frozen=True, slots=True)
class FlowKey:
    """Canonical 5-tuple: (ip_a, port_a) is the numerically smaller (ip, port) pair."""

    ip_a: str
    port_a: int
    ip_b: str
    port_b: int
    protocol: int


def canonical_key(pkt: PacketRecord) -> tuple[FlowKey, Orientation]:
    src = (ip_to_int(pkt.src_ip), pkt.src_port)
    dst = (ip_to_int(pkt.dst_ip), pkt.dst_port)
    if src <= dst:
        return (
            FlowKey(pkt.src_ip, pkt.src_port, pkt.dst_ip, pkt.dst_port, pkt.protocol),
            Orientation.FORWARD,
        )
    return (
        FlowKey(pkt.dst_ip, pkt.dst_port, pkt.src_ip, pkt.src_port, pkt.protocol),
        Orientation.REVERSE,
    )


@dataclass(slots=True)
class Flow:
    """One epoch of a canonical 5-tuple, split into local/remote packet lists.

    The local side is the endpoint inside the configured subnet. ``foreign``
    flags flows with no endpoint in the subnet (excluded from labelling);
    ``ambiguous_local`` flags flows with both endpoints inside, where the
    first packet's source is taken as local.
    """

    key: FlowKey
    epoch: int
    first_ts_us: int
    last_ts_us: int
    local_packets: list[PacketRecord]
    remote_packets: list[PacketRecord]
    local_is_a: bool
    first_pkt_direction: str  # "local" or "remote"
    foreign: bool = False
    ambiguous_local: bool = False

    @property
    def local_ip(self) -> str:
        return self.key.ip_a if self.local_is_a else self.key.ip_b

    @property
    def local_port(self) -> int:
        return self.key.port_a if self.local_is_a else self.key.port_b

    @property
    def remote_ip(self) -> str:
        return self.key.ip_b if self.local_is_a else self.key.ip_a

    @property
    def remote_port(self) -> int:
        return self.key.port_b if self.local_is_a else self.key.port_a

    @property
    def packet_count(self) -> int:
        return len(self.local_packets) + len(self.remote_packets)


def packet_sort_key(pkt: PacketRecord):
    # Content-based total order so that assembly is stable under any
    # permutation of the input, including equal timestamps.
    return (
        pkt.ts_us,
        ip_to_int(pkt.src_ip),
        ip_to_int(pkt.dst_ip),
        pkt.src_port,
        pkt.dst_port,
        pkt.protocol,
        pkt.ip_total_len,
        pkt.payload_len,
        pkt.ttl,
        pkt.dscp,
        -1 if pkt.tcp_flags is None else pkt.tcp_flags,
        -1 if pkt.tcp_window is None else pkt.tcp_window,
        pkt.src_mac,
        pkt.dst_mac,
        -1 if pkt.vlan_id is None else pkt.vlan_id,
    )


@dataclass(slots=True)
class _OpenFlow:
    epoch: int
    members: list[tuple[PacketRecord, Orientation]] = field(default_factory=list)
    last_ts_us: int = 0


def assemble_flows(
    packets,
    subnet: str,
    idle_timeout_s: float = DEFAULT_IDLE_TIMEOUT_S,
) -> list[Flow]:
    """Partition packets into flows by canonical key and idle timeout.

    Every IPv4 input packet lands in exactly one flow. Flows are returned
    sorted by (first_ts_us, key).
    """
    if idle_timeout_s <= 0:
        raise ValueError("idle_timeout_s must be positive")
    net = ipaddress.ip_network(subnet)
    net_int, mask = int(net.network_address), int(net.netmask)
    timeout_us = int(idle_timeout_s * 1_000_000)

    ordered = sorted(packets, key=packet_sort_key)
    open_flows: dict[FlowKey, _OpenFlow] = {}
    done: list[Flow] = []

    def finalize(key: FlowKey, state: _OpenFlow) -> None:
        a_local = (ip_to_int(key.ip_a) & mask) == net_int
        b_local = (ip_to_int(key.ip_b) & mask) == net_int
        foreign = ambiguous = False
        first_pkt, first_orient = state.members[0]
        if a_local and not b_local:
            local_is_a = True
        elif b_local and not a_local:
            local_is_a = False
        elif a_local and b_local:
            # Both endpoints inside: take the first packet's source as local.
            local_is_a = first_orient is Orientation.FORWARD
            ambiguous = True
        else:
            local_is_a = True
            foreign = True
        local, remote = [], []
        for pkt, orient in state.members:
            src_is_a = orient is Orientation.FORWARD
            (local if src_is_a == local_is_a else remote).append(pkt)
        done.append(
            Flow(
                key=key,
                epoch=state.epoch,
                first_ts_us=state.members[0][0].ts_us,
                last_ts_us=state.last_ts_us,
                local_packets=local,
                remote_packets=remote,
                local_is_a=local_is_a,
                first_pkt_direction=(
                    "local" if (first_orient is Orientation.FORWARD) == local_is_a else "remote"
                ),
                foreign=foreign,
                ambiguous_local=ambiguous,
            )
        )

    for pkt in ordered:
        key, orient = canonical_key(pkt)
        state = open_flows.get(key)
        if state is not None and pkt.ts_us - state.last_ts_us > timeout_us:
            finalize(key, state)
            state = _OpenFlow(epoch=state.epoch + 1)
            open_flows[key] = state
        elif state is None:
            state = _OpenFlow(epoch=0)
            open_flows[key] = state
        state.members.append((pkt, orient))
        state.last_ts_us = pkt.ts_us

    for key, state in open_flows.items():
        finalize(key, state)

    done.sort(key=lambda f: (f.first_ts_us, ip_to_int(f.key.ip_a), f.key.port_a,
                             ip_to_int(f.key.ip_b), f.key.port_b, f.key.protocol, f.epoch))
    return done
