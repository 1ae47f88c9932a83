"""Deterministic testbed simulator.

Five device profiles run weighted, sequenced application actions against
fixed server endpoints; the output is a packet trace, a device-side
socket-event log, an automation run log, and exact per-flow ground
truth. Everything is derived from the scenario seed: equal configs give
byte-identical outputs.
"""

from __future__ import annotations

import hashlib
import ipaddress
import random
import socket
from dataclasses import dataclass, field

from .capture import PacketRecord, TCP_ACK, TCP_FIN, TCP_PSH, TCP_SYN
from .errors import ConfigError
from .flows import FlowKey, canonical_key, packet_sort_key
from .labelling import DeviceEntry, SocketEvent
from .reliability import (
    EXECUTION_FAILURE,
    LAUNCH_FAILURE,
    SUCCESS,
    ActionRecord,
)

ANDROID = "Android"
IOS = "iOS"

# Scenario clock starts at 2026-01-01T00:00:00Z.
START_EPOCH_US = 1_767_225_600 * 1_000_000

EPHEMERAL_LO, EPHEMERAL_HI = 49152, 65535
BACKGROUND_POLL = "Background Poll"
POLL_DURATION_BOUNDS = (1.0, 3.0)
SERVER_TTL = 64
ANDROID_UID_BASE = 10000
IN_EPISODE_POLL_PERIOD_US = 15_000_000

# iOS reports traffic owners as process names rather than numeric UIDs.
IOS_PROCESS_NAMES = {
    "Safari": "MobileSafari",
    "Apple Mail": "MobileMail",
    "Apple Maps": "Maps",
}


@dataclass(frozen=True, slots=True)
class TrafficBurst:
    """One unidirectional packet burst template; all bounds are inclusive."""

    direction: str  # "up" (device to server) or "down"
    pkt_count: tuple[int, int]
    pkt_len: tuple[int, int]
    inter_pkt_gap_us: tuple[int, int]
    tcp_window_base: int


@dataclass(frozen=True, slots=True)
class ActionModel:
    action_name: str
    weight: float
    steps: tuple[TrafficBurst, ...]
    duration_s: tuple[float, float]


@dataclass(frozen=True, slots=True)
class AppModel:
    app_name: str
    os_availability: frozenset[str]
    protocol: int
    server_endpoints: tuple[tuple[str, int], ...]
    actions: tuple[ActionModel, ...]
    background_poll_period_s: float | None = None


@dataclass(frozen=True, slots=True)
class DeviceProfile:
    device_id: str
    os: str
    os_version: str
    local_ip: str
    mac: bytes
    installed_apps: tuple[str, ...]
    ttl_default: int = 64


@dataclass(slots=True)
class ScenarioConfig:
    duration_s: float
    devices: list[DeviceProfile]
    apps: list[AppModel]
    subnet: str
    seed: int
    failure_rates: dict[tuple[str, str], tuple[float, float]] = field(default_factory=dict)
    idle_bounds_s: tuple[float, float] = (5.0, 60.0)
    idle_timeout_s: float = 60.0
    port_reuse_gap_s: float = 90.0

    def app(self, name: str) -> AppModel:
        return self._apps_by_name[name]

    @property
    def _apps_by_name(self) -> dict[str, AppModel]:
        return {a.app_name: a for a in self.apps}

    def validate(self) -> None:
        if self.duration_s < 0:
            raise ConfigError("duration_s must be nonnegative")
        try:
            net = ipaddress.ip_network(self.subnet)
        except ValueError as exc:
            raise ConfigError(f"bad subnet {self.subnet!r}: {exc}") from exc
        apps = self._apps_by_name
        if len(apps) != len(self.apps):
            raise ConfigError("duplicate app names")
        for app in self.apps:
            if not app.os_availability:
                raise ConfigError(f"{app.app_name}: empty os_availability")
            if app.protocol not in (6, 17):
                raise ConfigError(f"{app.app_name}: protocol must be 6 or 17")
            if not app.server_endpoints:
                raise ConfigError(f"{app.app_name}: no server endpoints")
            for ip, port in app.server_endpoints:
                if ipaddress.ip_address(ip) in net:
                    raise ConfigError(f"{app.app_name}: endpoint {ip} inside testbed subnet")
                if not 0 < port <= 65535:
                    raise ConfigError(f"{app.app_name}: bad endpoint port {port}")
            if not app.actions:
                raise ConfigError(f"{app.app_name}: no actions")
            for act in app.actions:
                if act.weight < 0:
                    raise ConfigError(f"{app.app_name}/{act.action_name}: negative weight")
                if not act.steps:
                    raise ConfigError(f"{app.app_name}/{act.action_name}: empty steps")
                if not 0 < act.duration_s[0] <= act.duration_s[1]:
                    raise ConfigError(f"{app.app_name}/{act.action_name}: bad duration bounds")
                for st in act.steps:
                    if st.direction not in ("up", "down"):
                        raise ConfigError(f"{app.app_name}: burst direction {st.direction!r}")
                    if st.pkt_count[0] < 1 or st.pkt_count[0] > st.pkt_count[1]:
                        raise ConfigError(f"{app.app_name}: bad pkt_count bounds")
                    if not 40 <= st.pkt_len[0] <= st.pkt_len[1] <= 1500:
                        raise ConfigError(f"{app.app_name}: pkt_len bounds outside 40-1500")
                    if st.inter_pkt_gap_us[0] < 1 or st.inter_pkt_gap_us[0] > st.inter_pkt_gap_us[1]:
                        raise ConfigError(f"{app.app_name}: bad inter_pkt_gap bounds")
        seen_ips = set()
        for dev in self.devices:
            if dev.os not in (ANDROID, IOS):
                raise ConfigError(f"{dev.device_id}: os must be Android or iOS")
            if ipaddress.ip_address(dev.local_ip) not in net:
                raise ConfigError(f"{dev.device_id}: {dev.local_ip} outside subnet {self.subnet}")
            if dev.local_ip in seen_ips:
                raise ConfigError(f"duplicate device IP {dev.local_ip}")
            seen_ips.add(dev.local_ip)
            if len(dev.mac) != 6:
                raise ConfigError(f"{dev.device_id}: MAC must be 6 bytes")
            if not dev.installed_apps:
                raise ConfigError(f"{dev.device_id}: installed_apps is empty")
            for name in dev.installed_apps:
                if name not in apps:
                    raise ConfigError(f"{dev.device_id}: unknown app {name!r}")
                if dev.os not in apps[name].os_availability:
                    raise ConfigError(f"{dev.device_id}: {name} is not available on {dev.os}")
        for (dev_id, app_name), (lf, ef) in self.failure_rates.items():
            if not (0.0 <= lf <= 1.0 and 0.0 <= ef <= 1.0):
                raise ConfigError(f"failure rates for ({dev_id}, {app_name}) outside [0, 1]")
        if not 0 < self.idle_bounds_s[0] <= self.idle_bounds_s[1]:
            raise ConfigError("idle_bounds_s must be positive and ordered")
        if self.idle_timeout_s <= 0:
            raise ConfigError("idle_timeout_s must be positive")


@dataclass(frozen=True, slots=True)
class ScheduledAction:
    ts_us: int
    device_id: str
    app_name: str
    action_name: str
    duration_us: int
    n_steps: int
    background: bool = False


@dataclass(frozen=True, slots=True)
class ExecutedAction:
    """A scheduled action plus its injected outcome.

    ``steps_completed`` is None for successes (all steps ran) and the
    number of completed steps otherwise; launch failures complete zero.
    """

    action: ScheduledAction
    outcome: str
    steps_completed: int | None

    def record(self) -> ActionRecord:
        return ActionRecord(
            ts_us=self.action.ts_us,
            device_id=self.action.device_id,
            app_name=self.action.app_name,
            action_name=self.action.action_name,
            outcome=self.outcome,
        )


@dataclass(frozen=True, slots=True)
class TruthEntry:
    app_name: str
    os: str
    device_id: str


@dataclass(slots=True)
class ScenarioOutput:
    packets: list[PacketRecord]
    socket_events: list[SocketEvent]
    run_log: list[ActionRecord]
    truth: dict[tuple[FlowKey, int], TruthEntry]


def _derive_seed(*parts) -> int:
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big")


def uid_for(config: ScenarioConfig, app_name: str) -> int:
    names = sorted(a.app_name for a in config.apps)
    return ANDROID_UID_BASE + names.index(app_name)


def process_for(app_name: str) -> str:
    return IOS_PROCESS_NAMES.get(app_name, app_name.replace(" ", ""))


def owner_for(config: ScenarioConfig, device: DeviceProfile, app_name: str) -> str:
    if device.os == ANDROID:
        return str(uid_for(config, app_name))
    return process_for(app_name)


def build_uid_map(config: ScenarioConfig) -> dict[tuple[str, str], str]:
    """The dumpsys-style table resolving (device, socket owner) to an app name."""
    table = {}
    for dev in config.devices:
        for app_name in dev.installed_apps:
            table[(dev.device_id, owner_for(config, dev, app_name))] = app_name
    return table


def build_device_map(config: ScenarioConfig) -> dict[str, DeviceEntry]:
    """Map device IP to its identity, OS, and OS version."""
    return {d.local_ip: DeviceEntry(d.device_id, d.os, d.os_version) for d in config.devices}


def poll_steps(app: AppModel) -> tuple[TrafficBurst, ...]:
    """Small keepalive exchange used for background refreshes."""
    base = app.actions[0].steps[0].tcp_window_base
    return (
        TrafficBurst("up", (1, 2), (60, 110), (5_000, 20_000), base),
        TrafficBurst("down", (1, 3), (80, 300), (5_000, 20_000), base),
    )


def schedule_actions(config: ScenarioConfig) -> list[ScheduledAction]:
    """Sample the per-device action timeline.

    Foreground actions are serialized per device (one at a time) and
    chosen by normalized weight over the device's installed apps;
    background polls run on their own period and may overlap.
    """
    config.validate()
    apps = {a.app_name: a for a in config.apps}
    out: list[ScheduledAction] = []
    for dev in config.devices:
        pool = [(apps[name], act) for name in dev.installed_apps for act in apps[name].actions]
        weights = [act.weight for _, act in pool]
        if sum(weights) <= 0:
            raise ConfigError(f"{dev.device_id}: all action weights are zero")
        rng = random.Random(_derive_seed(config.seed, "sched", dev.device_id))
        t = 0.0
        while True:
            t += rng.uniform(*config.idle_bounds_s)
            app, act = rng.choices(pool, weights=weights, k=1)[0]
            dur = rng.uniform(*act.duration_s)
            if t + dur > config.duration_s:
                break
            out.append(
                ScheduledAction(
                    ts_us=START_EPOCH_US + int(t * 1e6),
                    device_id=dev.device_id,
                    app_name=app.app_name,
                    action_name=act.action_name,
                    duration_us=int(dur * 1e6),
                    n_steps=len(act.steps),
                )
            )
            t += dur
        for name in dev.installed_apps:
            app = apps[name]
            period = app.background_poll_period_s
            if not period:
                continue
            prng = random.Random(_derive_seed(config.seed, "poll", dev.device_id, name))
            t = prng.uniform(0.0, period)
            while True:
                dur = prng.uniform(*POLL_DURATION_BOUNDS)
                if t + dur > config.duration_s:
                    break
                out.append(
                    ScheduledAction(
                        ts_us=START_EPOCH_US + int(t * 1e6),
                        device_id=dev.device_id,
                        app_name=name,
                        action_name=BACKGROUND_POLL,
                        duration_us=int(dur * 1e6),
                        n_steps=len(poll_steps(app)),
                        background=True,
                    )
                )
                t += period
    out.sort(key=lambda a: (a.ts_us, a.device_id, a.app_name, a.action_name))
    return out


def inject_failures(
    schedule: list[ScheduledAction],
    failure_rates: dict[tuple[str, str], tuple[float, float]],
    seed: int,
) -> list[ExecutedAction]:
    """Assign launch/execution outcomes to every scheduled action.

    A launch failure suppresses all traffic; an execution failure keeps a
    strict prefix of the action's bursts (possibly empty).
    """
    for key, (lf, ef) in failure_rates.items():
        if not (0.0 <= lf <= 1.0 and 0.0 <= ef <= 1.0):
            raise ConfigError(f"failure rates for {key} outside [0, 1]")
    out = []
    for i, act in enumerate(schedule):
        lf, ef = failure_rates.get((act.device_id, act.app_name), (0.0, 0.0))
        rng = random.Random(_derive_seed(seed, "fail", i, act.device_id))
        if rng.random() < lf:
            out.append(ExecutedAction(act, LAUNCH_FAILURE, 0))
        elif rng.random() < ef:
            out.append(ExecutedAction(act, EXECUTION_FAILURE, rng.randrange(act.n_steps)))
        else:
            out.append(ExecutedAction(act, SUCCESS, None))
    return out


def _server_mac(server_ip: str) -> bytes:
    return b"\x02\x53" + socket.inet_aton(server_ip)


@dataclass(slots=True)
class _Episode:
    device: DeviceProfile
    app_name: str
    tuple5: tuple[str, int, str, int, int]
    packets: list[PacketRecord]

    @property
    def t_open(self) -> int:
        return self.packets[0].ts_us

    @property
    def t_close(self) -> int:
        return self.packets[-1].ts_us


class _EpisodeBuilder:
    """Emits one socket episode's packets with monotone timestamps."""

    def __init__(self, rng: random.Random, device: DeviceProfile, app: AppModel,
                 server: tuple[str, int], sport: int, start_us: int, os_win_offset: int):
        self.rng = rng
        self.device = device
        self.app = app
        self.server_ip, self.server_port = server
        self.sport = sport
        self.t = start_us
        self.win_jitter = rng.randrange(0, 8) * 16
        self.os_win_offset = os_win_offset
        self.server_mac = _server_mac(self.server_ip)
        self.packets: list[PacketRecord] = []

    def _window(self, base: int) -> int:
        return min(65535, base + self.os_win_offset + self.win_jitter)

    def emit(self, direction: str, total_len: int, win_base: int,
             flags: int | None = None, opt_len: int = 0) -> None:
        tcp = self.app.protocol == 6
        hdr = 20 + (20 + opt_len if tcp else 8 if self.app.protocol == 17 else 0)
        total_len = max(total_len, hdr)
        up = direction == "up"
        if tcp and flags is None:
            flags = TCP_PSH | TCP_ACK if total_len > hdr else TCP_ACK
        self.packets.append(
            PacketRecord(
                ts_us=self.t,
                src_mac=self.device.mac if up else self.server_mac,
                dst_mac=self.server_mac if up else self.device.mac,
                src_ip=self.device.local_ip if up else self.server_ip,
                dst_ip=self.server_ip if up else self.device.local_ip,
                protocol=self.app.protocol,
                src_port=self.sport if up else self.server_port,
                dst_port=self.server_port if up else self.sport,
                ip_total_len=total_len,
                payload_len=total_len - hdr,
                ttl=self.device.ttl_default if up else SERVER_TTL,
                dscp=0,
                tcp_flags=flags if tcp else None,
                tcp_window=self._window(win_base) if tcp else None,
                tcp_opt_len=opt_len if tcp else None,
            )
        )

    def handshake(self, win_base: int) -> None:
        rtt = self.rng.randrange(8_000, 40_000)
        self.emit("up", 48, win_base, flags=TCP_SYN, opt_len=8)
        self.t += rtt
        self.emit("down", 48, win_base, flags=TCP_SYN | TCP_ACK, opt_len=8)
        self.t += rtt // 2
        self.emit("up", 40, win_base, flags=TCP_ACK)

    def teardown(self, win_base: int) -> None:
        rtt = self.rng.randrange(8_000, 40_000)
        self.t += self.rng.randrange(2_000, 20_000)
        self.emit("up", 40, win_base, flags=TCP_FIN | TCP_ACK)
        self.t += rtt
        self.emit("down", 40, win_base, flags=TCP_FIN | TCP_ACK)
        self.t += rtt // 2
        self.emit("up", 40, win_base, flags=TCP_ACK)

    def run_bursts(self, steps, start_us: int, slot_us: int) -> None:
        for k, burst in enumerate(steps):
            self.t = max(self.t, start_us + k * slot_us)
            for _ in range(self.rng.randint(*burst.pkt_count)):
                self.t += self.rng.randint(*burst.inter_pkt_gap_us)
                self.emit(burst.direction, self.rng.randint(*burst.pkt_len), burst.tcp_window_base)


def _realize_episode(
    config: ScenarioConfig,
    idx: int,
    ex: ExecutedAction,
    device: DeviceProfile,
    app: AppModel,
    recent_close: dict[tuple, int],
) -> _Episode | None:
    act = ex.action
    steps = poll_steps(app) if act.background else next(
        a.steps for a in app.actions if a.action_name == act.action_name
    )
    if ex.steps_completed is not None:
        steps = steps[: ex.steps_completed]
    if not steps:
        return None

    rng = random.Random(_derive_seed(config.seed, "traffic", idx))
    server = app.server_endpoints[rng.randrange(len(app.server_endpoints))]
    min_gap_us = int(config.port_reuse_gap_s * 1e6)
    sport = None
    for _ in range(200):
        cand = rng.randrange(EPHEMERAL_LO, EPHEMERAL_HI + 1)
        t5 = (device.local_ip, cand, server[0], server[1], app.protocol)
        last = recent_close.get(t5)
        if last is None or act.ts_us - last >= min_gap_us:
            sport = cand
            break
    if sport is None:
        raise ConfigError(f"{device.device_id}: ephemeral port space exhausted")

    builder = _EpisodeBuilder(
        rng, device, app, server, sport, act.ts_us,
        os_win_offset=1024 if device.os == IOS else 0,
    )
    win_base = steps[0].tcp_window_base
    if app.protocol == 6:
        builder.handshake(win_base)
    slot_us = act.duration_us // max(act.n_steps, 1)
    builder.run_bursts(steps, act.ts_us, slot_us)
    if app.protocol == 6:
        builder.teardown(win_base)

    t5 = (device.local_ip, sport, server[0], server[1], app.protocol)
    recent_close[t5] = builder.packets[-1].ts_us
    return _Episode(device=device, app_name=app.app_name, tuple5=t5, packets=builder.packets)


def _episode_events(config: ScenarioConfig, ep: _Episode) -> list[SocketEvent]:
    dev = ep.device
    owner = owner_for(config, dev, ep.app_name)
    uid = int(owner) if dev.os == ANDROID else None
    process = owner if dev.os == IOS else None
    src_ip, src_port, dst_ip, dst_port, proto = ep.tuple5

    def event(kind: str, ts: int) -> SocketEvent:
        return SocketEvent(
            ts_us=ts, device_id=dev.device_id, event=kind,
            src_ip=src_ip, src_port=src_port, dst_ip=dst_ip, dst_port=dst_port,
            protocol=proto, uid=uid, process=process,
        )

    events = [event("open", ep.t_open)]
    t = ep.t_open + IN_EPISODE_POLL_PERIOD_US
    while t < ep.t_close:
        events.append(event("poll", t))
        t += IN_EPISODE_POLL_PERIOD_US
    events.append(event("close", ep.t_close))
    return events


def _compute_truth(
    episodes: list[_Episode], idle_timeout_s: float
) -> dict[tuple[FlowKey, int], TruthEntry]:
    timeout_us = int(idle_timeout_s * 1e6)
    per_key: dict[FlowKey, list[tuple[int, _Episode]]] = {}
    for ep in episodes:
        for pkt in ep.packets:
            key, _ = canonical_key(pkt)
            per_key.setdefault(key, []).append((pkt.ts_us, ep))
    truth: dict[tuple[FlowKey, int], TruthEntry] = {}
    for key, items in per_key.items():
        items.sort(key=lambda x: x[0])
        epoch, last = 0, None
        for ts, ep in items:
            if last is not None and ts - last > timeout_us:
                epoch += 1
            last = ts
            entry = TruthEntry(ep.app_name, ep.device.os, ep.device.device_id)
            prior = truth.setdefault((key, epoch), entry)
            if prior != entry:
                raise RuntimeError(f"5-tuple collision within one flow epoch: {key}")
    return truth


def run_scenario(config: ScenarioConfig) -> ScenarioOutput:
    """Simulate the full scenario; deterministic for a given config and seed."""
    config.validate()
    schedule = schedule_actions(config)
    executed = inject_failures(schedule, config.failure_rates, config.seed)
    apps = {a.app_name: a for a in config.apps}
    devices = {d.device_id: d for d in config.devices}
    recent_close: dict[str, dict[tuple, int]] = {d.device_id: {} for d in config.devices}

    episodes: list[_Episode] = []
    for idx, ex in enumerate(executed):
        if ex.outcome == LAUNCH_FAILURE:
            continue
        dev = devices[ex.action.device_id]
        ep = _realize_episode(config, idx, ex, dev, apps[ex.action.app_name],
                              recent_close[dev.device_id])
        if ep is not None:
            episodes.append(ep)

    packets = sorted((p for ep in episodes for p in ep.packets), key=packet_sort_key)
    events = sorted(
        (e for ep in episodes for e in _episode_events(config, ep)),
        key=lambda e: (e.ts_us, e.device_id, e.src_port, e.event),
    )
    return ScenarioOutput(
        packets=packets,
        socket_events=events,
        run_log=[ex.record() for ex in executed],
        truth=_compute_truth(episodes, config.idle_timeout_s),
    )
