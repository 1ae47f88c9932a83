"""Classic pcap file I/O and Ethernet/IPv4/TCP/UDP frame codecs.

Reading is a single pass over the file; all returned records are immutable.
Only link type 1 (Ethernet) is handled. Non-IPv4 frames are skipped and
counted, never fatal. IPv6 is intentionally out of scope.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass, field

from .errors import (
    CaptureFormatError,
    FrameDecodeError,
    NotIPv4Error,
    TruncatedCaptureError,
    UnsupportedLinkTypeError,
)

MAGIC_US = 0xA1B2C3D4
MAGIC_US_SWAPPED = 0xD4C3B2A1
MAGIC_NS = 0xA1B23C4D
MAGIC_NS_SWAPPED = 0x4D3CB2A1

LINKTYPE_ETHERNET = 1
ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_VLAN = 0x8100

GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16
SNAPLEN = 262144

# TCP flag bits in header order; letter code used by the feature extractor.
TCP_FIN = 0x01
TCP_SYN = 0x02
TCP_RST = 0x04
TCP_PSH = 0x08
TCP_ACK = 0x10
TCP_URG = 0x20
TCP_ECE = 0x40
TCP_CWR = 0x80
TCP_FLAG_LETTERS = "FSRPAUEC"


def ip_to_int(ip: str) -> int:
    return int.from_bytes(socket.inet_aton(ip), "big")


def int_to_ip(value: int) -> str:
    return socket.inet_ntoa(value.to_bytes(4, "big"))


def format_mac(mac: bytes) -> str:
    return ":".join(f"{b:02x}" for b in mac)


def tcp_flag_letters(flags: int) -> str:
    """Render a flag byte as a subset of "FSRPAUEC" in that fixed order."""
    return "".join(letter for i, letter in enumerate(TCP_FLAG_LETTERS) if flags & (1 << i))


@dataclass(frozen=True, slots=True)
class PacketRecord:
    """One captured packet, decoded down to its transport header.

    ``payload_len`` is the L4 payload (IP total length minus IP and L4
    header lengths). ``src_port``/``dst_port`` are 0 for protocols other
    than TCP (6) and UDP (17), and for non-first IP fragments. The three
    ``tcp_*`` fields are present exactly when ``protocol`` is 6.
    """

    ts_us: int
    src_mac: bytes
    dst_mac: bytes
    src_ip: str
    dst_ip: str
    protocol: int
    src_port: int
    dst_port: int
    ip_total_len: int
    payload_len: int
    ttl: int
    dscp: int
    vlan_id: int | None = None
    tcp_flags: int | None = None
    tcp_window: int | None = None
    tcp_opt_len: int | None = None

    def __post_init__(self):
        if len(self.src_mac) != 6 or len(self.dst_mac) != 6:
            raise ValueError("MAC addresses must be 6 bytes")
        if not 0 <= self.payload_len <= self.ip_total_len:
            raise ValueError("payload_len must be within [0, ip_total_len]")
        tcp_fields = (self.tcp_flags, self.tcp_window, self.tcp_opt_len)
        if self.protocol == 6:
            if any(v is None for v in tcp_fields):
                raise ValueError("TCP packets must carry tcp_flags/tcp_window/tcp_opt_len")
        else:
            if any(v is not None for v in tcp_fields):
                raise ValueError("tcp_* fields are only valid for protocol 6")
        if self.protocol not in (6, 17) and (self.src_port or self.dst_port):
            raise ValueError("ports must be 0 for protocols other than TCP/UDP")
        if self.vlan_id is not None and not 0 <= self.vlan_id <= 4094:
            raise ValueError("vlan_id out of range")


@dataclass
class CaptureMeta:
    """Summary of one capture file read."""

    link_type: int = LINKTYPE_ETHERNET
    ts_resolution_us: int = 1
    packet_count: int = 0
    skipped_non_ip: int = 0
    skipped_malformed: int = 0

    @property
    def skip_count(self) -> int:
        return self.skipped_non_ip + self.skipped_malformed


def _checksum16(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def decode_frame(frame: bytes, link_type: int = LINKTYPE_ETHERNET, ts_us: int = 0) -> PacketRecord:
    """Decode an Ethernet frame into a PacketRecord.

    Raises NotIPv4Error for non-IPv4 ethertypes (skippable) and
    FrameDecodeError for anything shorter than its declared headers.
    Total over arbitrary byte strings: always a record or one of those
    two errors.
    """
    if link_type != LINKTYPE_ETHERNET:
        raise UnsupportedLinkTypeError(f"cannot decode link type {link_type}")
    if len(frame) < 14:
        raise FrameDecodeError(f"frame of {len(frame)} bytes is shorter than an Ethernet header")
    dst_mac, src_mac = frame[0:6], frame[6:12]
    ethertype = struct.unpack("!H", frame[12:14])[0]
    offset = 14
    vlan_id = None
    if ethertype == ETHERTYPE_VLAN:
        if len(frame) < 18:
            raise FrameDecodeError("frame truncated inside 802.1Q tag")
        tci, ethertype = struct.unpack("!HH", frame[14:18])
        vlan_id = tci & 0x0FFF
        if vlan_id == 4095:
            raise FrameDecodeError("reserved VLAN id 4095")
        offset = 18
    if ethertype != ETHERTYPE_IPV4:
        raise NotIPv4Error(ethertype)

    ip = frame[offset:]
    if len(ip) < 20:
        raise FrameDecodeError("frame shorter than a minimal IPv4 header")
    ver_ihl, tos, total_len, _ident, flags_frag, ttl, protocol, _cksum = struct.unpack(
        "!BBHHHBBH", ip[0:12]
    )
    if ver_ihl >> 4 != 4:
        raise FrameDecodeError(f"IP version {ver_ihl >> 4} is not 4")
    ihl = (ver_ihl & 0x0F) * 4
    if ihl < 20:
        raise FrameDecodeError(f"IPv4 header length {ihl} below minimum")
    if total_len < ihl:
        raise FrameDecodeError("IPv4 total length smaller than its header")
    if len(ip) < total_len:
        raise FrameDecodeError(
            f"frame carries {len(ip)} IP bytes but declares total length {total_len}"
        )
    src_ip = socket.inet_ntoa(ip[12:16])
    dst_ip = socket.inet_ntoa(ip[16:20])
    frag_offset = flags_frag & 0x1FFF
    dscp = tos >> 2

    src_port = dst_port = 0
    tcp_flags = tcp_window = tcp_opt_len = None
    payload_len = total_len - ihl
    l4 = ip[ihl:total_len]
    if frag_offset == 0 and protocol == 6:
        if len(l4) < 20:
            raise FrameDecodeError("frame shorter than a minimal TCP header")
        src_port, dst_port = struct.unpack("!HH", l4[0:4])
        data_offset = (l4[12] >> 4) * 4
        if data_offset < 20:
            raise FrameDecodeError(f"TCP data offset {data_offset} below minimum")
        if len(l4) < data_offset:
            raise FrameDecodeError("frame shorter than its declared TCP header")
        tcp_flags = l4[13]
        tcp_window = struct.unpack("!H", l4[14:16])[0]
        tcp_opt_len = data_offset - 20
        payload_len = total_len - ihl - data_offset
    elif frag_offset == 0 and protocol == 17:
        if len(l4) < 8:
            raise FrameDecodeError("frame shorter than a UDP header")
        src_port, dst_port = struct.unpack("!HH", l4[0:4])
        payload_len = total_len - ihl - 8
    elif protocol == 6:
        # Non-first fragment of a TCP packet: no transport header to read.
        tcp_flags = tcp_window = tcp_opt_len = 0

    return PacketRecord(
        ts_us=ts_us,
        src_mac=src_mac,
        dst_mac=dst_mac,
        src_ip=src_ip,
        dst_ip=dst_ip,
        protocol=protocol,
        src_port=src_port,
        dst_port=dst_port,
        ip_total_len=total_len,
        payload_len=payload_len,
        ttl=ttl,
        dscp=dscp,
        vlan_id=vlan_id,
        tcp_flags=tcp_flags,
        tcp_window=tcp_window,
        tcp_opt_len=tcp_opt_len,
    )


def encode_frame(pkt: PacketRecord) -> bytes:
    """Serialize a record as an Ethernet/IPv4(+TCP|UDP) frame.

    The layout is fixed (IHL 5, zero-filled payload and options, real
    checksums) so that decode_frame(encode_frame(p)) == p field for field.
    """
    l4_len = 0
    if pkt.protocol == 6:
        l4_len = 20 + (pkt.tcp_opt_len or 0)
        if (pkt.tcp_opt_len or 0) % 4:
            raise ValueError("tcp_opt_len must be a multiple of 4")
    elif pkt.protocol == 17:
        l4_len = 8
    expected_payload = pkt.ip_total_len - 20 - l4_len
    if pkt.payload_len != expected_payload:
        raise ValueError(
            f"payload_len {pkt.payload_len} inconsistent with ip_total_len for this protocol"
        )

    if pkt.vlan_id is not None:
        eth = pkt.dst_mac + pkt.src_mac + struct.pack(
            "!HHH", ETHERTYPE_VLAN, pkt.vlan_id, ETHERTYPE_IPV4
        )
    else:
        eth = pkt.dst_mac + pkt.src_mac + struct.pack("!H", ETHERTYPE_IPV4)

    ip_header = struct.pack(
        "!BBHHHBBH4s4s",
        0x45,
        pkt.dscp << 2,
        pkt.ip_total_len,
        0,
        0,
        pkt.ttl,
        pkt.protocol,
        0,
        socket.inet_aton(pkt.src_ip),
        socket.inet_aton(pkt.dst_ip),
    )
    ip_header = ip_header[:10] + struct.pack("!H", _checksum16(ip_header)) + ip_header[12:]

    payload = b"\x00" * pkt.payload_len
    if pkt.protocol == 6:
        data_offset = (20 + (pkt.tcp_opt_len or 0)) // 4
        tcp = struct.pack(
            "!HHIIBBHHH",
            pkt.src_port,
            pkt.dst_port,
            0,
            0,
            data_offset << 4,
            pkt.tcp_flags or 0,
            pkt.tcp_window or 0,
            0,
            0,
        ) + b"\x00" * (pkt.tcp_opt_len or 0)
        pseudo = (
            socket.inet_aton(pkt.src_ip)
            + socket.inet_aton(pkt.dst_ip)
            + struct.pack("!BBH", 0, 6, len(tcp) + len(payload))
        )
        cksum = _checksum16(pseudo + tcp + payload)
        tcp = tcp[:16] + struct.pack("!H", cksum) + tcp[18:]
        l4_bytes = tcp
    elif pkt.protocol == 17:
        udp_len = 8 + pkt.payload_len
        udp = struct.pack("!HHHH", pkt.src_port, pkt.dst_port, udp_len, 0)
        pseudo = (
            socket.inet_aton(pkt.src_ip)
            + socket.inet_aton(pkt.dst_ip)
            + struct.pack("!BBH", 0, 17, udp_len)
        )
        cksum = _checksum16(pseudo + udp + payload) or 0xFFFF
        udp = udp[:6] + struct.pack("!H", cksum)
        l4_bytes = udp
    else:
        l4_bytes = b""

    return eth + ip_header + l4_bytes + payload


def write_capture(packets, path) -> None:
    """Write records as a classic microsecond pcap (magic 0xa1b2c3d4)."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("!IHHiIII", MAGIC_US, 2, 4, 0, 0, SNAPLEN, LINKTYPE_ETHERNET))
        for pkt in packets:
            frame = encode_frame(pkt)
            fh.write(
                struct.pack(
                    "!IIII", pkt.ts_us // 1_000_000, pkt.ts_us % 1_000_000, len(frame), len(frame)
                )
            )
            fh.write(frame)


def read_capture(path) -> tuple[list[PacketRecord], CaptureMeta]:
    """Read a classic pcap file into records plus a CaptureMeta.

    Accepts both byte orders and both the microsecond and nanosecond
    magics (nanoseconds are truncated to microseconds). Records are
    returned in file order; non-IPv4 frames are skipped and counted.
    """
    with open(path, "rb") as fh:
        header = fh.read(GLOBAL_HEADER_LEN)
        if len(header) < GLOBAL_HEADER_LEN:
            raise CaptureFormatError(f"file too short for a pcap global header: {path}")
        magic = struct.unpack("!I", header[0:4])[0]
        if magic in (MAGIC_US, MAGIC_NS):
            endian = "!"
        elif magic in (MAGIC_US_SWAPPED, MAGIC_NS_SWAPPED):
            endian = "<"
            magic = struct.unpack("<I", header[0:4])[0]
        else:
            raise CaptureFormatError(f"unrecognized pcap magic 0x{magic:08x}")
        nanos = magic == MAGIC_NS
        _vmaj, _vmin, _zone, _sigfigs, _snaplen, network = struct.unpack(
            endian + "HHiIII", header[4:24]
        )
        if network != LINKTYPE_ETHERNET:
            raise UnsupportedLinkTypeError(f"link type {network} is not Ethernet")

        meta = CaptureMeta(link_type=network)
        records: list[PacketRecord] = []
        offset = GLOBAL_HEADER_LEN
        while True:
            rec_header = fh.read(RECORD_HEADER_LEN)
            if not rec_header:
                break
            if len(rec_header) < RECORD_HEADER_LEN:
                raise TruncatedCaptureError("record header cut short", offset)
            ts_sec, ts_frac, incl_len, _orig_len = struct.unpack(endian + "IIII", rec_header)
            frame = fh.read(incl_len)
            if len(frame) < incl_len:
                raise TruncatedCaptureError(
                    f"record body has {len(frame)} of {incl_len} bytes", offset
                )
            ts_us = ts_sec * 1_000_000 + (ts_frac // 1000 if nanos else ts_frac)
            try:
                records.append(decode_frame(frame, network, ts_us))
            except NotIPv4Error:
                meta.skipped_non_ip += 1
            except FrameDecodeError:
                meta.skipped_malformed += 1
            offset += RECORD_HEADER_LEN + incl_len
        meta.packet_count = len(records)
        return records, meta
