"""Automation reliability analytics: launch- and execution-failure rates.

A launch failure (LF) means the app never started, so the action
produced no traffic; an execution failure (EF) means the app launched
but the scripted sequence did not complete. Rates are reported per
application, per device, and per (device, application).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

from .errors import DataFormatError

SUCCESS = "success"
LAUNCH_FAILURE = "launch_failure"
EXECUTION_FAILURE = "execution_failure"
OUTCOMES = (SUCCESS, LAUNCH_FAILURE, EXECUTION_FAILURE)


@dataclass(frozen=True, slots=True)
class ActionRecord:
    ts_us: int
    device_id: str
    app_name: str
    action_name: str
    outcome: str

    def __post_init__(self):
        if self.outcome not in OUTCOMES:
            raise ValueError(f"unknown outcome {self.outcome!r}")


@dataclass(slots=True)
class GroupStats:
    attempts: int = 0
    lf_count: int = 0
    ef_count: int = 0

    @property
    def zero_attempts(self) -> bool:
        return self.attempts == 0

    def lf_pct(self) -> float:
        return 100.0 * self.lf_count / self.attempts if self.attempts else 0.0

    def ef_pct(self, denominator: str = "all") -> float:
        if denominator == "all":
            base = self.attempts
        elif denominator == "launched":
            base = self.attempts - self.lf_count
        else:
            raise ValueError(f"unknown EF denominator {denominator!r}")
        return 100.0 * self.ef_count / base if base else 0.0


@dataclass(slots=True)
class ReliabilityReport:
    by_device_app: dict[tuple[str, str], GroupStats] = field(default_factory=dict)
    by_device: dict[str, GroupStats] = field(default_factory=dict)
    by_app: dict[str, GroupStats] = field(default_factory=dict)
    ef_denominator: str = "all"

    @property
    def empty(self) -> bool:
        return not self.by_device_app


def compute_reliability(run_log: list[ActionRecord], ef_denominator: str = "all") -> ReliabilityReport:
    """Aggregate outcome counts; invariant under permutation of the log."""
    if ef_denominator not in ("all", "launched"):
        raise ValueError(f"unknown EF denominator {ef_denominator!r}")
    report = ReliabilityReport(ef_denominator=ef_denominator)
    for rec in run_log:
        for stats in (
            report.by_device_app.setdefault((rec.device_id, rec.app_name), GroupStats()),
            report.by_device.setdefault(rec.device_id, GroupStats()),
            report.by_app.setdefault(rec.app_name, GroupStats()),
        ):
            stats.attempts += 1
            if rec.outcome == LAUNCH_FAILURE:
                stats.lf_count += 1
            elif rec.outcome == EXECUTION_FAILURE:
                stats.ef_count += 1
    return report


def format_device_pct(x: float) -> str:
    return f"{x:.3f}"


def format_app_pct(x: float) -> str:
    # Two significant figures; zero is just "0".
    return "0" if x == 0 else f"{x:.2g}"


def _sections(report: ReliabilityReport):
    dev_app = [
        (f"{d}/{a}", stats, format_app_pct)
        for (d, a), stats in sorted(report.by_device_app.items())
    ]
    apps = [(a, stats, format_app_pct) for a, stats in sorted(report.by_app.items())]
    devices = [(d, stats, format_device_pct) for d, stats in sorted(report.by_device.items())]
    return [("application", apps), ("device", devices), ("device/application", dev_app)]


def render_reliability(report: ReliabilityReport, fmt: str = "table") -> str:
    """Render the report; columns are always name, EF %, LF % (then counts)."""
    if fmt == "table":
        lines = []
        for title, rows in _sections(report):
            lines.append(f"[{title}]")
            lines.append(f"{title:<28} {'EF %':>8} {'LF %':>8} {'attempts':>9}")
            for name, stats, pct in rows:
                lines.append(
                    f"{name:<28} {pct(stats.ef_pct(report.ef_denominator)):>8} "
                    f"{pct(stats.lf_pct()):>8} {stats.attempts:>9}"
                )
            lines.append("")
        return "\n".join(lines)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["scope", "name", "ef_pct", "lf_pct", "attempts", "ef_count", "lf_count"])
        for title, rows in _sections(report):
            for name, stats, pct in rows:
                writer.writerow(
                    [
                        title,
                        name,
                        pct(stats.ef_pct(report.ef_denominator)),
                        pct(stats.lf_pct()),
                        stats.attempts,
                        stats.ef_count,
                        stats.lf_count,
                    ]
                )
        return buf.getvalue()
    raise ValueError(f"unknown format {fmt!r}")


def write_run_log(run_log: list[ActionRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in run_log:
            fh.write(
                json.dumps(
                    {
                        "ts_us": rec.ts_us,
                        "device_id": rec.device_id,
                        "app": rec.app_name,
                        "action": rec.action_name,
                        "outcome": rec.outcome,
                    },
                    separators=(",", ":"),
                )
                + "\n"
            )


def read_run_log(path) -> list[ActionRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                out.append(
                    ActionRecord(
                        ts_us=int(row["ts_us"]),
                        device_id=row["device_id"],
                        app_name=row["app"],
                        action_name=row["action"],
                        outcome=row["outcome"],
                    )
                )
            except (KeyError, ValueError, json.JSONDecodeError) as exc:
                raise DataFormatError(f"{path}:{lineno}: bad run log entry: {exc}") from exc
    return out
