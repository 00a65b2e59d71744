"""Timed operation schedules and their on-disk format.

Scenario files are plain text, one record per line:

    time_s, op, power_w        # op in {charge, discharge, no_op}

Blank lines and '#' comments are allowed.  Times must be strictly
increasing.  On the wire, positive setpoint watts command charging and
negative discharging; inside the battery model positive power discharges,
so the sign flips exactly once, at the outstation boundary.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

OPS = ("charge", "discharge", "no_op")


class ScenarioError(Exception):
    pass


@dataclass(frozen=True)
class ScenarioEvent:
    time: float      # s
    op: str          # charge | discharge | no_op
    power_w: float   # magnitude, watts

    def wire_watts(self) -> float:
        if self.op == "charge":
            return self.power_w
        if self.op == "discharge":
            return -self.power_w
        return 0.0


def parse_scenario(path: str | Path) -> list[ScenarioEvent]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"{path}: cannot read scenario file: {exc}") from exc

    events: list[ScenarioEvent] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise ScenarioError(
                f"{path}:{lineno}: expected 'time_s, op, power_w', got {raw!r}")
        try:
            t = float(parts[0])
            power = float(parts[2])
        except ValueError as exc:
            raise ScenarioError(f"{path}:{lineno}: {exc}") from exc
        op = parts[1]
        if op not in OPS:
            raise ScenarioError(f"{path}:{lineno}: op must be one of {OPS}, got {op!r}")
        if power < 0.0:
            raise ScenarioError(f"{path}:{lineno}: power must be non-negative (op gives the sign)")
        if events and t <= events[-1].time:
            raise ScenarioError(f"{path}:{lineno}: times must be strictly increasing")
        events.append(ScenarioEvent(time=t, op=op, power_w=power))
    return events


def validate_lead(events: list[ScenarioEvent], lead: float) -> None:
    for ev in events:
        if ev.time < lead:
            raise ScenarioError(
                f"operation at t={ev.time} s precedes the authentication lead {lead} s")
