"""Ground-truth labelling of flows from device-side socket-event logs.

Each device reports open/poll/close events for its sockets together with
the owning identity: a numeric UID on Android, a process name on iOS.
Flows are matched to these episodes by canonical 5-tuple and time
overlap; the owner is resolved to an application through the UID map.
The procedure only looks at socket ownership, so background-generated
flows are labelled exactly like foreground ones.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

from .errors import DataFormatError, LabellingError
from .features import FeatureVector, extract_features
from .flows import Flow, FlowKey, canonical_key

DEFAULT_GRACE_S = 2.0

UNKNOWN_APP = "unknown"
CONF_EXACT = "exact"
CONF_NEAREST = "nearest_in_time"
CONF_UNLABELLED = "unlabelled"


@dataclass(frozen=True, slots=True)
class SocketEvent:
    """One device-side socket observation; src is always the device itself."""

    ts_us: int
    device_id: str
    event: str  # "open", "poll", or "close"
    src_ip: str
    src_port: int
    dst_ip: str
    dst_port: int
    protocol: int
    uid: int | None = None
    process: str | None = None

    @property
    def owner(self) -> str:
        return str(self.uid) if self.uid is not None else (self.process or "")


@dataclass(frozen=True, slots=True)
class DeviceEntry:
    device_id: str
    os: str
    os_version: str


@dataclass(slots=True)
class LabelledFlow:
    flow: Flow
    features: FeatureVector
    app_label: str
    os_label: str
    device_id: str
    label_confidence: str


@dataclass(slots=True)
class _EventEpisode:
    device_id: str
    owner: str
    open_us: int
    close_us: int


def _event_key(ev: SocketEvent) -> FlowKey:
    a = (_ip_int(ev.src_ip), ev.src_port)
    b = (_ip_int(ev.dst_ip), ev.dst_port)
    if a <= b:
        return FlowKey(ev.src_ip, ev.src_port, ev.dst_ip, ev.dst_port, ev.protocol)
    return FlowKey(ev.dst_ip, ev.dst_port, ev.src_ip, ev.src_port, ev.protocol)


def _ip_int(ip: str) -> int:
    import socket

    return int.from_bytes(socket.inet_aton(ip), "big")


def _build_episodes(events: list[SocketEvent]) -> dict[FlowKey, list[_EventEpisode]]:
    """Pair open/close events per (device, 5-tuple) into time intervals.

    An open without a close yields a degenerate interval ending at the
    open itself; poll events only ever extend an open episode.
    """
    episodes: dict[FlowKey, list[_EventEpisode]] = {}
    pending: dict[tuple, _EventEpisode] = {}
    for ev in sorted(events, key=lambda e: (e.ts_us, e.device_id, e.src_port)):
        key = _event_key(ev)
        pkey = (ev.device_id, key)
        if ev.event == "open":
            if pkey in pending:
                episodes.setdefault(key, []).append(pending.pop(pkey))
            pending[pkey] = _EventEpisode(ev.device_id, ev.owner, ev.ts_us, ev.ts_us)
        elif ev.event in ("poll", "close"):
            ep = pending.get(pkey)
            if ep is None:
                # Stray close/poll: treat as a point episode.
                ep = _EventEpisode(ev.device_id, ev.owner, ev.ts_us, ev.ts_us)
                pending[pkey] = ep
            ep.close_us = max(ep.close_us, ev.ts_us)
            if ev.event == "close":
                episodes.setdefault(key, []).append(pending.pop(pkey))
        else:
            raise DataFormatError(f"unknown socket event kind {ev.event!r}")
    for (device_id, key), ep in pending.items():
        episodes.setdefault(key, []).append(ep)
    for eps in episodes.values():
        eps.sort(key=lambda e: e.open_us)
    return episodes


def label_flows(
    flows: list[Flow],
    socket_events: list[SocketEvent],
    uid_map: dict[tuple[str, str], str],
    device_map: dict[str, DeviceEntry],
    grace_s: float = DEFAULT_GRACE_S,
) -> list[LabelledFlow]:
    """Assign app and OS labels to flows by 5-tuple and time overlap.

    A flow matches episodes with its canonical 5-tuple whose padded
    [open, close] interval overlaps the flow; the best overlap wins
    (ties go to the earlier episode). If no padded interval overlaps but
    same-key episodes exist, the nearest in time is used. Flows with no
    same-key episode at all are kept with the label "unknown". Foreign
    flows (no endpoint in the subnet) are skipped entirely.
    """
    grace_us = int(grace_s * 1e6)
    episodes = _build_episodes(socket_events)
    out: list[LabelledFlow] = []
    for flow in flows:
        if flow.foreign:
            continue
        entry = device_map.get(flow.local_ip)
        if entry is None:
            raise LabellingError(f"device map has no entry for local IP {flow.local_ip}")
        candidates = episodes.get(flow.key, [])
        chosen, confidence = _match_episode(flow, candidates, grace_us)
        if chosen is None:
            app = UNKNOWN_APP
        else:
            app = uid_map.get((chosen.device_id, chosen.owner))
            if app is None:
                raise LabellingError(
                    f"owner {chosen.owner!r} on device {chosen.device_id!r} "
                    "is missing from the UID map"
                )
        out.append(
            LabelledFlow(
                flow=flow,
                features=extract_features(flow),
                app_label=app,
                os_label=entry.os,
                device_id=entry.device_id,
                label_confidence=confidence,
            )
        )
    return out


def _match_episode(flow: Flow, candidates: list[_EventEpisode], grace_us: int):
    if not candidates:
        return None, CONF_UNLABELLED
    best = None
    best_overlap = -1
    for ep in candidates:
        lo, hi = ep.open_us - grace_us, ep.close_us + grace_us
        overlap = min(hi, flow.last_ts_us) - max(lo, flow.first_ts_us)
        if overlap >= 0 and overlap > best_overlap:
            best, best_overlap = ep, overlap
    if best is not None:
        return best, CONF_EXACT
    # No padded interval overlaps: fall back to the episode nearest in time.
    def distance(ep: _EventEpisode) -> int:
        if ep.open_us > flow.last_ts_us:
            return ep.open_us - flow.last_ts_us
        return flow.first_ts_us - ep.close_us

    best = min(candidates, key=lambda e: (distance(e), e.open_us))
    return best, CONF_NEAREST


def label_accuracy(labelled: list[LabelledFlow], truth: dict) -> tuple[float, list[str]]:
    """Fraction of flows whose app label matches the simulator truth.

    Unknowns count as mismatches. Returns (fraction, mismatch report).
    """
    if not labelled:
        return 1.0, []
    mismatches = []
    hits = 0
    for lf in labelled:
        key = (lf.flow.key, lf.flow.epoch)
        expected = truth.get(key)
        if expected is None:
            mismatches.append(f"{key}: not covered by truth (labelled {lf.app_label})")
            continue
        expected_app = expected.app_name if hasattr(expected, "app_name") else expected[0]
        if lf.app_label == expected_app:
            hits += 1
        else:
            mismatches.append(f"{key}: labelled {lf.app_label!r}, truth {expected_app!r}")
    return hits / len(labelled), mismatches


# --- file formats ---------------------------------------------------------

def write_socket_events(events: list[SocketEvent], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            row = {
                "ts_us": ev.ts_us,
                "device_id": ev.device_id,
                "event": ev.event,
                "proto": ev.protocol,
                "src_ip": ev.src_ip,
                "src_port": ev.src_port,
                "dst_ip": ev.dst_ip,
                "dst_port": ev.dst_port,
            }
            if ev.uid is not None:
                row["uid"] = ev.uid
            else:
                row["process"] = ev.process
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")


def read_socket_events(path) -> list[SocketEvent]:
    events = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                events.append(
                    SocketEvent(
                        ts_us=int(row["ts_us"]),
                        device_id=row["device_id"],
                        event=row["event"],
                        src_ip=row["src_ip"],
                        src_port=int(row["src_port"]),
                        dst_ip=row["dst_ip"],
                        dst_port=int(row["dst_port"]),
                        protocol=int(row["proto"]),
                        uid=int(row["uid"]) if "uid" in row else None,
                        process=row.get("process"),
                    )
                )
            except (KeyError, ValueError, json.JSONDecodeError) as exc:
                raise DataFormatError(f"{path}:{lineno}: bad socket event: {exc}") from exc
    return events


def write_uid_map(uid_map: dict[tuple[str, str], str], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["device_id", "owner", "app_name"])
        for (device_id, owner), app in sorted(uid_map.items()):
            writer.writerow([device_id, owner, app])


def read_uid_map(path) -> dict[tuple[str, str], str]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"device_id", "owner", "app_name"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataFormatError(f"{path}: UID map must have columns {sorted(required)}")
        for row in reader:
            out[(row["device_id"], row["owner"])] = row["app_name"]
    return out


def write_device_map(device_map: dict[str, DeviceEntry], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ip", "device_id", "os", "os_version"])
        for ip, entry in sorted(device_map.items()):
            writer.writerow([ip, entry.device_id, entry.os, entry.os_version])


def read_device_map(path) -> dict[str, DeviceEntry]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"ip", "device_id", "os", "os_version"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataFormatError(f"{path}: device map must have columns {sorted(required)}")
        for row in reader:
            out[row["ip"]] = DeviceEntry(row["device_id"], row["os"], row["os_version"])
    return out
