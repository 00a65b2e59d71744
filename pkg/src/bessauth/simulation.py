"""Deterministic co-simulation of master, outstation, pack and channel.

A single clock advances in dt steps; every tick the channel delivers due
frames (applying any scheduled faults), then the outstation runs, then the
master, then both physics models advance.  The order is total, so two runs
with identical (scenario, pack, seed, dt) produce byte-identical outputs.

Outputs per run: per-cell measurement CSV, an authentication-round CSV, a
machine-parseable event log, a JSON report of applied/skipped operations
and the master's session store file.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from .agents import AgentConfig, LogEvent, MasterAgent, OutstationAgent
from .battery import Pack, load_pack
from .bits import mix64
from .scenario import ScenarioEvent, parse_scenario, validate_lead
from .store import SessionStore
from .framing import MsgType, decode_frame

DEFAULT_DT = 0.1
DEFAULT_HORIZON = 5000.0
DEFAULT_LATENCY = 0.01

TO_MASTER = "to_master"
TO_OUTSTATION = "to_outstation"

FAULT_KINDS = ("bit_flip", "drop", "replay", "duplicate")


class SimulationError(Exception):
    pass


@dataclass(frozen=True)
class ChannelFault:
    """One-shot fault armed at `time`, applied to the next matching frame.

    kind: bit_flip (flips `position` mod frame bits), drop, duplicate, or
    replay, which substitutes the bytes of previously transmitted message
    `message_index` for the matched frame (man-in-the-middle swap).
    Optional filters narrow the match to a direction and/or message type.
    """
    time: float
    kind: str
    position: int = 0
    message_index: int = 0
    direction: str | None = None
    msg_type: MsgType | None = None

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise SimulationError(f"unknown fault kind {self.kind!r}")


@dataclass
class _InFlight:
    arrival: float
    data: bytes
    order: int


class Channel:
    """Fixed-latency duplex byte channel with scripted, reproducible faults."""

    def __init__(self, latency: float = DEFAULT_LATENCY,
                 faults: list[ChannelFault] = ()):
        self.latency = latency
        self.pending: dict[str, list[_InFlight]] = {TO_MASTER: [], TO_OUTSTATION: []}
        self.history: list[tuple[str, bytes]] = []  # every submitted frame, in order
        self.faults = sorted(faults, key=lambda f: f.time)
        self.fault_log: list[str] = []
        self._order = 0

    def _match_fault(self, now: float, direction: str, data: bytes) -> ChannelFault | None:
        for i, f in enumerate(self.faults):
            if now < f.time:
                break
            if f.direction is not None and f.direction != direction:
                continue
            if f.msg_type is not None:
                try:
                    if decode_frame(data).msg_type != f.msg_type:
                        continue
                except Exception:
                    continue
            return self.faults.pop(i)
        return None

    def send(self, now: float, direction: str, data: bytes) -> None:
        self.history.append((direction, data))
        fault = self._match_fault(now, direction, data)
        if fault is not None:
            data = self._apply_fault(now, direction, fault, data)
            if data is None:
                return
        self._enqueue(now, direction, data)

    def _apply_fault(self, now: float, direction: str, fault: ChannelFault,
                     data: bytes) -> bytes | None:
        if fault.kind == "drop":
            self.fault_log.append(f"t={now:.3f} drop {direction}")
            return None
        if fault.kind == "bit_flip":
            pos = fault.position % (8 * len(data))
            flipped = bytearray(data)
            flipped[pos // 8] ^= 1 << (7 - pos % 8)
            self.fault_log.append(f"t={now:.3f} bit_flip bit={pos} {direction}")
            return bytes(flipped)
        if fault.kind == "duplicate":
            self.fault_log.append(f"t={now:.3f} duplicate {direction}")
            self._enqueue(now, direction, data)
            return data
        # replay: substitute an earlier transmission for this frame.  The
        # REPLAY_PREVIOUS sentinel picks the most recent earlier frame of the
        # same direction and message type (a record-and-replay adversary).
        if fault.message_index == REPLAY_PREVIOUS:
            kind = _msg_type(data)
            earlier = [d for dirn, d in self.history[:-1]
                       if dirn == direction and _msg_type(d) == kind]
            if not earlier:
                return data
            old = earlier[-1]
            self.fault_log.append(f"t={now:.3f} replay of previous {direction}")
        else:
            _, old = self.history[fault.message_index]
            self.fault_log.append(
                f"t={now:.3f} replay of message {fault.message_index} {direction}")
        return old

    def _enqueue(self, now: float, direction: str, data: bytes) -> None:
        self.pending[direction].append(
            _InFlight(arrival=now + self.latency, data=data, order=self._order))
        self._order += 1

    def deliver(self, now: float, direction: str) -> bytes:
        due = [m for m in self.pending[direction] if m.arrival <= now]
        if not due:
            return b""
        due.sort(key=lambda m: (m.arrival, m.order))
        self.pending[direction] = [m for m in self.pending[direction] if m.arrival > now]
        return b"".join(m.data for m in due)


@dataclass
class SimResult:
    ops: list                          # OpStatus per scheduled operation
    verdicts: list[tuple[float, bool, str]]
    events: list[LogEvent]
    auth_rows: list[dict]
    fault_log: list[str]
    out_dir: Path | None
    store_path: Path | None

    @property
    def all_applied(self) -> bool:
        return all(op.applied for op in self.ops)


def derive_seeds(seed: int) -> tuple[int, int]:
    """Distinct streams for the master's challenges and the outstation's
    enrollment, both keyed by the one run seed."""
    return mix64(seed ^ 0x6D61737465720A), mix64(seed ^ 0x6F75747374610A)


def run_scenario(scenario: list[ScenarioEvent] | str | Path,
                 pack: Pack | str | Path,
                 seed: int = 42,
                 dt: float = DEFAULT_DT,
                 horizon: float = DEFAULT_HORIZON,
                 faults: list[ChannelFault] = (),
                 out_dir: str | Path | None = None,
                 cfg: AgentConfig = AgentConfig(),
                 latency: float = DEFAULT_LATENCY,
                 csv_full_rate: bool = False) -> SimResult:
    """Run the co-simulation over `horizon` seconds and write the outputs."""
    if isinstance(scenario, (str, Path)):
        scenario = parse_scenario(scenario)
    if isinstance(pack, (str, Path)):
        pack = load_pack(pack)
    validate_lead(scenario, cfg.lead)
    for ev in scenario:
        if ev.time > horizon:
            raise SimulationError(
                f"operation at t={ev.time} s is beyond the {horizon} s horizon")

    master_seed, outstation_seed = derive_seeds(seed)
    out_path = Path(out_dir) if out_dir is not None else None
    store = None
    store_path = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        store_path = out_path / f"session_seed{seed}.store"
        store = SessionStore(store_path)

    outstation = OutstationAgent(pack, cfg, random.Random(outstation_seed))
    master = MasterAgent(pack.replica(noise_sigma=0.0), scenario, cfg,
                         random.Random(master_seed), store,
                         store_stamp=f"sim-t0.000-seed{seed}")
    channel = Channel(latency=latency, faults=list(faults))

    meas_rows: list[str] = []

    def sample_csv(now: float) -> None:
        for cell in range(pack.n_cells):
            v, soc = pack.measure(cell)
            meas_rows.append(f"{now:.3f},{cell},{v:.6f},{soc:.6f}")

    n_ticks = int(round(horizon / dt))
    cadence = max(1, int(round(1.0 / dt)))  # one row per simulated second
    outstation.start(0.0)
    _flush(channel, 0.0, outstation, master)
    sample_csv(0.0)

    for k in range(1, n_ticks + 1):
        now = k * dt
        outstation.handle_bytes(now, channel.deliver(now, TO_OUTSTATION))
        outstation.tick(now)
        master.handle_bytes(now, channel.deliver(now, TO_MASTER))
        master.tick(now)
        _flush(channel, now, outstation, master)
        outstation.step_physics(dt)
        master.step_physics(dt)
        if csv_full_rate or k % cadence == 0:
            sample_csv(now)

    if store is not None:
        store.close()

    events = sorted(outstation.events + master.events,
                    key=lambda e: (e.t, e.agent == "master"))
    auth_rows = _auth_rows(master)
    result = SimResult(ops=master.ops, verdicts=master.verdicts, events=events,
                       auth_rows=auth_rows, fault_log=channel.fault_log,
                       out_dir=out_path, store_path=store_path)
    if out_path is not None:
        _write_outputs(out_path, meas_rows, auth_rows, events, result,
                       outstation, master)
    return result


def _flush(channel: Channel, now: float, outstation: OutstationAgent,
           master: MasterAgent) -> None:
    for data in outstation.outbox:
        channel.send(now, TO_MASTER, data)
    outstation.outbox.clear()
    for data in master.outbox:
        channel.send(now, TO_OUTSTATION, data)
    master.outbox.clear()


def _auth_rows(master: MasterAgent) -> list[dict]:
    """One row per completed verification round, keyed by the time the
    round's challenge went out (master clock)."""
    rows = []
    challenge_time = None
    challenge_hex = None
    for ev in master.events:
        if ev.kind == "challenge_sent":
            challenge_time = ev.t
            challenge_hex = ev.fields["challenge"]
        elif ev.kind in ("auth_accepted", "auth_rejected"):
            rows.append({
                "time_s": challenge_time,
                "round": len(rows) + 1,
                "challenge_hex": ev.fields["challenge"],
                "reply_wire_hex": ev.fields["reply"],
                "verdict": "accepted" if ev.kind == "auth_accepted" else "rejected",
                "reason": ev.fields.get("reason", ""),
            })
    return rows


def _write_outputs(out_path: Path, meas_rows: list[str], auth_rows: list[dict],
                   events: list[LogEvent], result: SimResult,
                   outstation: OutstationAgent, master: MasterAgent) -> None:
    (out_path / "measurements.csv").write_text(
        "time_s,cell_id,voltage_v,soc_pct\n" + "\n".join(meas_rows) + "\n",
        encoding="utf-8")
    auth_lines = ["time_s,round,challenge_hex,reply_wire_hex,verdict,reason"]
    for r in auth_rows:
        auth_lines.append(f"{r['time_s']:.3f},{r['round']},{r['challenge_hex']},"
                          f"{r['reply_wire_hex']},{r['verdict']},{r['reason']}")
    (out_path / "auth_log.csv").write_text("\n".join(auth_lines) + "\n",
                                           encoding="utf-8")
    (out_path / "events.log").write_text(
        "".join(ev.line() + "\n" for ev in events), encoding="utf-8")
    report = {
        "operations": [
            {
                "time_s": op.event.time,
                "op": op.event.op,
                "power_w": op.event.power_w,
                "applied": op.applied,
                "applied_at": op.applied_at,
                "skipped_reason": op.skipped_reason,
            }
            for op in result.ops
        ],
        "rounds": len(result.verdicts),
        "accepted_rounds": sum(1 for _, ok, _ in result.verdicts if ok),
        "faults_injected": result.fault_log,
        "agent_faults": master.faults + outstation.faults,
        "all_operations_applied": result.all_applied,
    }
    (out_path / "report.json").write_text(json.dumps(report, indent=2) + "\n",
                                          encoding="utf-8")


def audit_gating(events: list[LogEvent], window: float) -> list[str]:
    """Trace-level check: every applied setpoint must fall inside a window
    opened by an accepted round on the outstation.  Returns violations."""
    violations = []
    accepted_times = [ev.t for ev in events
                      if ev.agent == "outstation" and ev.kind == "auth_accepted"]
    for ev in events:
        if ev.agent == "outstation" and ev.kind == "setpoint_applied":
            if not any(0.0 <= ev.t - t_acc <= window for t_acc in accepted_times):
                violations.append(
                    f"setpoint at t={ev.t:.3f} outside any accepted auth window")
    return violations


def reference_scenario() -> list[ScenarioEvent]:
    return [
        ScenarioEvent(500.0, "discharge", 10.0),
        ScenarioEvent(2000.0, "no_op", 0.0),
        ScenarioEvent(3000.0, "charge", 10.0),
        ScenarioEvent(4500.0, "no_op", 0.0),
    ]


REPLAY_PREVIOUS = -1


def replay_faults(scenario: list[ScenarioEvent], round_index: int,
                  lead: float = 5.0) -> list[ChannelFault]:
    """Fault schedule for a replay attack on round `round_index` (1-based):
    the adversary swaps that round's REPLY for the recorded previous one."""
    if round_index < 2:
        raise SimulationError("replay needs a prior round to replay from")
    t_arm = scenario[round_index - 1].time - lead
    return [ChannelFault(time=t_arm, kind="replay",
                         message_index=REPLAY_PREVIOUS,
                         direction=TO_MASTER, msg_type=MsgType.REPLY)]


def _msg_type(data: bytes) -> MsgType | None:
    try:
        return decode_frame(data).msg_type
    except Exception:
        return None


def run_replay_attack(pack: Pack | str | Path, seed: int = 42,
                      dt: float = DEFAULT_DT) -> SimResult:
    """Two-operation scenario where round 2's reply is swapped for the
    recorded round-1 reply; the attack must be rejected and the legitimate
    retry must succeed."""
    if isinstance(pack, (str, Path)):
        pack = load_pack(pack)
    scenario = [ScenarioEvent(20.0, "discharge", 10.0),
                ScenarioEvent(60.0, "no_op", 0.0)]
    cfg = AgentConfig()
    master_seed, outstation_seed = derive_seeds(seed)
    outstation = OutstationAgent(pack, cfg, random.Random(outstation_seed))
    master = MasterAgent(pack.replica(), scenario, cfg, random.Random(master_seed))
    channel = Channel(faults=replay_faults(scenario, 2))

    n_ticks = int(round(100.0 / dt))
    outstation.start(0.0)
    _flush(channel, 0.0, outstation, master)
    for k in range(1, n_ticks + 1):
        now = k * dt
        outstation.handle_bytes(now, channel.deliver(now, TO_OUTSTATION))
        outstation.tick(now)
        master.handle_bytes(now, channel.deliver(now, TO_MASTER))
        master.tick(now)
        _flush(channel, now, outstation, master)
        outstation.step_physics(dt)
        master.step_physics(dt)

    events = sorted(outstation.events + master.events,
                    key=lambda e: (e.t, e.agent == "master"))
    return SimResult(ops=master.ops, verdicts=master.verdicts, events=events,
                     auth_rows=_auth_rows(master), fault_log=channel.fault_log,
                     out_dir=None, store_path=None)
