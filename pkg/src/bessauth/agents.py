"""Master and outstation state machines.

Both agents are transport-agnostic: a driver (the co-simulation kernel or
the live TCP loop) feeds received bytes plus the current time and drains
``outbox``.  All protocol behavior lives here so simulated and live modes
cannot diverge.

Master flow per scheduled operation: issue a challenge `lead` seconds
before the operation, verify the reply against the shadow battery model,
commit the table update on acceptance, then release the setpoint at the
operation time inside the authenticated window.  Rejections and timeouts
re-challenge with fresh randomness up to `max_retries`.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from . import auth
from .auth import (AuthOutcome, CellReplyTable, Challenge, MalformedChallenge,
                   RejectReason, build_challenge, build_reply, decode_challenge,
                   dequantize_measurement, enrollment_init, quantize_measurement,
                   update_table, verify_reply)
from .battery import Pack, PackFault
from .framing import (Deframer, ErrorReason, Frame, FrameDefect, FrameError,
                      MsgType, encode_frame, pack_analog, pack_auth_result,
                      pack_enroll, pack_setpoint, unpack_analog,
                      unpack_auth_result, unpack_enroll, unpack_setpoint)
from .scenario import ScenarioEvent
from .store import RoundRecord, SessionStore, table_digest

CHALLENGE_POINT = 0
REPLY_POINT = 1
SETPOINT_POINT = 2

_REASON_CODES = {
    RejectReason.AUTH_BLOCK_MISMATCH: 1,
    RejectReason.MEASUREMENT_OUT_OF_TOLERANCE: 2,
    RejectReason.MALFORMED_CHALLENGE: 3,
    RejectReason.DECODE_FAILURE: 4,
}
_CODE_REASONS = {v: k for k, v in _REASON_CODES.items()}


@dataclass(frozen=True)
class AgentConfig:
    lead: float = 5.0            # s before the operation the challenge goes out
    window: float = 10.0         # s the authentication stays valid
    timeout: float = 2.0         # s to wait for a reply / ack
    max_retries: int = 3
    tolerance: int = auth.DEFAULT_TOLERANCE


@dataclass(frozen=True)
class LogEvent:
    t: float
    agent: str
    kind: str
    fields: dict[str, str] = field(default_factory=dict)

    def line(self) -> str:
        extra = "".join(f" {k}={v}" for k, v in self.fields.items())
        return f"t={self.t:.3f} agent={self.agent} event={self.kind}{extra}"


class MasterSession(Enum):
    UNENROLLED = "unenrolled"
    IDLE = "idle"
    CHALLENGE_SENT = "challenge_sent"
    AUTH_WINDOW = "authenticated_window"


class OutstationSession(Enum):
    UNENROLLED = "unenrolled"
    IDLE = "idle"
    AWAITING_RESULT = "awaiting_result"


# Legal (from, to) pairs; every _goto asserts membership, and the test suite
# enumerates these to prove e.g. idle can never jump straight to an open
# authenticated window.
MASTER_TRANSITIONS = frozenset({
    (MasterSession.UNENROLLED, MasterSession.IDLE),
    (MasterSession.IDLE, MasterSession.CHALLENGE_SENT),
    (MasterSession.CHALLENGE_SENT, MasterSession.CHALLENGE_SENT),
    (MasterSession.CHALLENGE_SENT, MasterSession.AUTH_WINDOW),
    (MasterSession.CHALLENGE_SENT, MasterSession.IDLE),
    (MasterSession.AUTH_WINDOW, MasterSession.IDLE),
})

OUTSTATION_TRANSITIONS = frozenset({
    (OutstationSession.UNENROLLED, OutstationSession.IDLE),
    (OutstationSession.IDLE, OutstationSession.AWAITING_RESULT),
    (OutstationSession.AWAITING_RESULT, OutstationSession.AWAITING_RESULT),
    (OutstationSession.AWAITING_RESULT, OutstationSession.IDLE),
})


class _Link:
    """Per-direction sequence bookkeeping plus stream deframing."""

    def __init__(self):
        self.deframer = Deframer()
        self._next_seq = 0
        self._last_accepted = None

    def next_seq(self) -> int:
        seq = self._next_seq
        self._next_seq = (self._next_seq + 1) & 0xFF
        return seq

    def accept(self, frame: Frame) -> bool:
        if frame.seq == self._last_accepted:
            return False
        self._last_accepted = frame.seq
        return True


class _AgentBase:
    name = "agent"
    _transitions: frozenset

    def __init__(self):
        self.link = _Link()
        self.outbox: list[bytes] = []
        self.events: list[LogEvent] = []
        self.faults: list[str] = []

    def _goto(self, new) -> None:
        assert (self.session, new) in self._transitions, \
            f"illegal {self.name} transition {self.session} -> {new}"
        self.session = new

    def _send(self, msg_type: MsgType, payload: bytes) -> int:
        seq = self.link.next_seq()
        self.outbox.append(encode_frame(msg_type, seq, payload))
        return seq

    def _log(self, now: float, kind: str, **fields) -> None:
        self.events.append(LogEvent(now, self.name, kind,
                                    {k: str(v) for k, v in fields.items()}))

    def handle_bytes(self, now: float, data: bytes) -> None:
        for item in self.link.deframer.feed(data):
            if isinstance(item, FrameDefect):
                self._log(now, "frame_defect", reason=item.reason.name.lower())
                self._send(MsgType.ERROR, bytes([item.reason]))
                continue
            if not self.link.accept(item):
                self._log(now, "duplicate_dropped", msg_type=item.msg_type.name,
                          seq=item.seq)
                continue
            try:
                self.on_frame(now, item)
            except FrameError as exc:
                self._log(now, "frame_malformed", msg_type=item.msg_type.name,
                          detail=repr(str(exc)))
                self._send(MsgType.ERROR, bytes([ErrorReason.MALFORMED]))

    def on_frame(self, now: float, frame: Frame) -> None:
        raise NotImplementedError


@dataclass
class OpStatus:
    event: ScenarioEvent
    applied: bool = False
    applied_at: float | None = None
    skipped_reason: str | None = None


class MasterAgent(_AgentBase):
    """Control-center agent: issues challenges, verifies replies against the
    noise-free shadow pack, gates setpoints behind accepted rounds."""

    name = "master"
    _transitions = MASTER_TRANSITIONS

    def __init__(self, shadow_pack: Pack, schedule: Sequence[ScenarioEvent],
                 cfg: AgentConfig, rng: random.Random,
                 store: SessionStore | None = None, store_stamp: str = "live"):
        super().__init__()
        self.shadow = shadow_pack
        self.cfg = cfg
        self.rng = rng
        self.store = store
        self.store_stamp = store_stamp
        self.table: CellReplyTable | None = None
        self.session = MasterSession.UNENROLLED
        self.ops = [OpStatus(ev) for ev in sorted(schedule, key=lambda e: e.time)]
        self.op_index = 0
        self.retry_count = 0
        self.attempt = 0                     # strictly increasing round-record id
        self.challenge: Challenge | None = None
        self.deadline = 0.0
        self.window_expiry = 0.0
        self.setpoint_sent = False
        self.ack_deadline = 0.0
        self.shadow_power_w = 0.0            # battery sign: + discharges
        self._acked_power_w = 0.0
        self.verdicts: list[tuple[float, bool, str]] = []

    # -- frame handling -----------------------------------------------------

    def on_frame(self, now: float, frame: Frame) -> None:
        if frame.msg_type == MsgType.ENROLL:
            self._on_enroll(now, frame)
        elif frame.msg_type == MsgType.REPLY:
            self._on_reply(now, frame)
        elif frame.msg_type == MsgType.ACK:
            self._on_ack(now, frame)
        elif frame.msg_type == MsgType.ERROR:
            self._on_error(now, frame)
        else:
            self._log(now, "unexpected_frame", msg_type=frame.msg_type.name)

    def _on_enroll(self, now: float, frame: Frame) -> None:
        if self.session != MasterSession.UNENROLLED:
            self._log(now, "unexpected_frame", msg_type="ENROLL")
            return
        replies, counter = unpack_enroll(frame.payload)
        if len(replies) != self.shadow.n_cells:
            self._log(now, "enroll_mismatch", got=len(replies),
                      expected=self.shadow.n_cells)
            self.faults.append("enrollment cell count mismatch")
            return
        self.table = CellReplyTable(replies, counter)
        if self.store is not None:
            self.store.open_session(self.store_stamp, self.shadow.rng_seed, self.table)
        self._log(now, "enrolled", n_cells=len(replies))
        self._goto(MasterSession.IDLE)

    def _on_reply(self, now: float, frame: Frame) -> None:
        if self.session != MasterSession.CHALLENGE_SENT:
            self._log(now, "stale_reply_dropped")
            return
        _, wire = unpack_analog(frame.payload)
        expected = [quantize_measurement(*self.shadow.measure(c))
                    for c in self.challenge.polled_cells()]
        outcome = verify_reply(self.challenge, wire, self.table, expected,
                               self.cfg.tolerance)
        self.attempt += 1
        if outcome.accepted:
            self.table = update_table(self.table, self.challenge, outcome.pre_transform)
            self._shadow_sync(outcome)
            self._record(now, wire, "accepted", "")
            self._send(MsgType.AUTH_RESULT, pack_auth_result(True))
            self._log(now, "auth_accepted", challenge=f"0x{self.challenge.encode():016x}",
                      reply=f"0x{wire:016x}", round=self.table.round_counter)
            self.verdicts.append((now, True, ""))
            self.window_expiry = now + self.cfg.window
            self.setpoint_sent = False
            self._goto(MasterSession.AUTH_WINDOW)
        else:
            reason = outcome.reason.value
            self._record(now, wire, "rejected", reason)
            self._send(MsgType.AUTH_RESULT,
                       pack_auth_result(False, _REASON_CODES[outcome.reason]))
            self._log(now, "auth_rejected", challenge=f"0x{self.challenge.encode():016x}",
                      reply=f"0x{wire:016x}", reason=reason)
            self.verdicts.append((now, False, reason))
            self._retry(now, f"rejected: {reason}")

    def _on_ack(self, now: float, frame: Frame) -> None:
        if self.session == MasterSession.AUTH_WINDOW and self.setpoint_sent:
            op = self.ops[self.op_index]
            op.applied = True
            op.applied_at = now
            self._acked_power_w = self.shadow_power_w
            self._log(now, "setpoint_acked", op=op.event.op, power_w=op.event.power_w)
            self.op_index += 1
            self._goto(MasterSession.IDLE)

    def _on_error(self, now: float, frame: Frame) -> None:
        reason = "unknown"
        if frame.payload:
            try:
                reason = ErrorReason(frame.payload[0]).name.lower()
            except ValueError:
                reason = f"code_{frame.payload[0]}"
        self._log(now, "peer_error", reason=reason)
        if self.session == MasterSession.AUTH_WINDOW and self.setpoint_sent:
            self._skip_op(now, f"setpoint refused: {reason}")

    # -- timers -------------------------------------------------------------

    def tick(self, now: float) -> None:
        if self.session == MasterSession.IDLE and self.table is not None:
            if self.op_index < len(self.ops):
                op = self.ops[self.op_index]
                if now >= op.event.time - self.cfg.lead:
                    self.retry_count = 0
                    self._issue_challenge(now)
        elif self.session == MasterSession.CHALLENGE_SENT and now >= self.deadline:
            self._log(now, "reply_timeout", challenge=f"0x{self.challenge.encode():016x}")
            self._retry(now, "timeout")
        elif self.session == MasterSession.AUTH_WINDOW:
            op = self.ops[self.op_index]
            if not self.setpoint_sent:
                if now >= op.event.time:
                    self._send_setpoint(now, op.event)
                elif now >= self.window_expiry:
                    self._skip_op(now, "window expired before operation time")
            elif now >= self.ack_deadline:
                self.shadow_power_w = self._acked_power_w  # assume not applied
                self._skip_op(now, "no ack for setpoint")

    def _issue_challenge(self, now: float) -> None:
        self.challenge = build_challenge(self.rng, self.shadow.n_cells)
        self.deadline = now + self.cfg.timeout
        self._send(MsgType.CHALLENGE, pack_analog(CHALLENGE_POINT, self.challenge.encode()))
        self._log(now, "challenge_sent", challenge=f"0x{self.challenge.encode():016x}",
                  op_time=self.ops[self.op_index].event.time)
        self._goto(MasterSession.CHALLENGE_SENT)

    def _retry(self, now: float, why: str) -> None:
        self.retry_count += 1
        if self.retry_count > self.cfg.max_retries:
            self._skip_op(now, f"retries exhausted ({why})")
            return
        self._log(now, "re_challenge", retry=self.retry_count)
        self._issue_challenge(now)

    def _skip_op(self, now: float, reason: str) -> None:
        op = self.ops[self.op_index]
        op.skipped_reason = reason
        self.faults.append(
            f"operation '{op.event.op}' at t={op.event.time} skipped: {reason}")
        self._log(now, "op_skipped", op=op.event.op, op_time=op.event.time,
                  reason=repr(reason))
        self.op_index += 1
        self.challenge = None
        self._goto(MasterSession.IDLE)

    def _send_setpoint(self, now: float, ev: ScenarioEvent) -> None:
        watts = ev.wire_watts()
        self._send(MsgType.SETPOINT, pack_setpoint(SETPOINT_POINT, watts))
        self.setpoint_sent = True
        self.ack_deadline = now + self.cfg.timeout
        self.shadow_power_w = -watts  # wire + = charge; battery + = discharge
        self._log(now, "setpoint_sent", op=ev.op, wire_watts=watts)

    # -- shadow model -------------------------------------------------------

    def _shadow_sync(self, outcome: AuthOutcome) -> None:
        """Correct shadow states for the polled cells to the accepted
        received measurements, bounding drift between rounds."""
        for cell, (q_v, q_soc) in zip(self.challenge.polled_cells(), outcome.measurements):
            volts, soc = dequantize_measurement(q_v, q_soc)
            st = self.shadow.states[cell]
            model = self.shadow.models[cell]
            st.extracted_charge = model.q * (1.0 - q_soc / 255.0)
            st.soc = 100.0 * (1.0 - st.extracted_charge / model.q)
            st.terminal_voltage = volts
            self.shadow.reported_v[cell] = volts

    def step_physics(self, dt: float) -> None:
        try:
            self.shadow.step(self.shadow_power_w, dt)
        except PackFault:
            self.shadow_power_w = 0.0
            self.shadow.step(0.0, dt)

    def _record(self, now: float, wire: int, verdict: str, reason: str) -> None:
        if self.store is None:
            return
        self.store.append_round(RoundRecord(
            round=self.attempt, timestamp=now, challenge=self.challenge.encode(),
            reply_wire=wire, verdict=verdict, reason=reason,
            table_digest=table_digest(self.table)))

    @property
    def done(self) -> bool:
        return self.op_index >= len(self.ops) and self.session in (
            MasterSession.IDLE, MasterSession.UNENROLLED)


class OutstationAgent(_AgentBase):
    """Field-side agent: owns the live pack, answers challenges with fresh
    measurements, applies setpoints only inside an open auth window."""

    name = "outstation"
    _transitions = OUTSTATION_TRANSITIONS

    def __init__(self, pack: Pack, cfg: AgentConfig, rng: random.Random):
        super().__init__()
        self.pack = pack
        self.cfg = cfg
        self.rng = rng
        self.table: CellReplyTable | None = None
        self.session = OutstationSession.UNENROLLED
        self.held: tuple[int, Challenge] | None = None
        self.window_expiry = float("-inf")
        self.applied_power_w = 0.0           # battery sign: + discharges
        self.setpoints_applied: list[tuple[float, float]] = []

    def start(self, now: float) -> None:
        meas = [self.pack.measure(i) for i in range(self.pack.n_cells)]
        self.table = enrollment_init(self.rng, self.pack.n_cells, meas)
        self._send(MsgType.ENROLL, pack_enroll(self.table.replies,
                                               self.table.round_counter))
        self._log(now, "enrollment_sent", n_cells=self.pack.n_cells)
        self._goto(OutstationSession.IDLE)

    def on_frame(self, now: float, frame: Frame) -> None:
        if frame.msg_type == MsgType.CHALLENGE:
            self._on_challenge(now, frame)
        elif frame.msg_type == MsgType.AUTH_RESULT:
            self._on_auth_result(now, frame)
        elif frame.msg_type == MsgType.SETPOINT:
            self._on_setpoint(now, frame)
        elif frame.msg_type == MsgType.ERROR:
            self._log(now, "peer_error", reason=frame.payload[:1].hex() or "unknown")
        else:
            self._log(now, "unexpected_frame", msg_type=frame.msg_type.name)

    def _on_challenge(self, now: float, frame: Frame) -> None:
        if self.session == OutstationSession.UNENROLLED:
            self._log(now, "unexpected_frame", msg_type="CHALLENGE")
            return
        _, word = unpack_analog(frame.payload)
        try:
            challenge = decode_challenge(word, self.pack.n_cells)
        except MalformedChallenge as exc:
            self._send(MsgType.ERROR, bytes([ErrorReason.MALFORMED]))
            self._log(now, "challenge_malformed", challenge=f"0x{word:016x}",
                      detail=repr(str(exc)))
            return
        if self.session == OutstationSession.AWAITING_RESULT:
            # master re-challenged (timeout / lost verdict): drop held state
            self.held = None
        meas = [self.pack.measure(c) for c in challenge.polled_cells()]
        reply = build_reply(challenge, meas, self.table)
        self.held = (reply.pre_transform, challenge)
        self._send(MsgType.REPLY, pack_analog(REPLY_POINT, reply.wire))
        self._log(now, "reply_sent", challenge=f"0x{word:016x}",
                  reply=f"0x{reply.wire:016x}")
        self._goto(OutstationSession.AWAITING_RESULT)

    def _on_auth_result(self, now: float, frame: Frame) -> None:
        if self.session != OutstationSession.AWAITING_RESULT or self.held is None:
            self._log(now, "unexpected_frame", msg_type="AUTH_RESULT")
            return
        accepted, code = unpack_auth_result(frame.payload)
        pre, challenge = self.held
        self.held = None
        if accepted:
            self.table = update_table(self.table, challenge, pre)
            self.window_expiry = now + self.cfg.window
            self._log(now, "auth_accepted", round=self.table.round_counter,
                      window_until=f"{self.window_expiry:.3f}")
        else:
            reason = _CODE_REASONS.get(code)
            self._log(now, "auth_rejected",
                      reason=reason.value if reason else f"code_{code}")
        self._goto(OutstationSession.IDLE)

    def _on_setpoint(self, now: float, frame: Frame) -> None:
        _, watts = unpack_setpoint(frame.payload)
        if now > self.window_expiry:
            self._send(MsgType.ERROR, bytes([ErrorReason.UNAUTHENTICATED]))
            self._log(now, "setpoint_rejected", wire_watts=watts,
                      reason="unauthenticated")
            return
        self.applied_power_w = -watts  # wire + = charge; battery + = discharge
        self.setpoints_applied.append((now, self.applied_power_w))
        self._send(MsgType.ACK, bytes([frame.seq]))
        self._log(now, "setpoint_applied", wire_watts=watts,
                  pack_power_w=self.applied_power_w)

    def tick(self, now: float) -> None:
        pass  # outstation is purely reactive

    def step_physics(self, dt: float) -> None:
        try:
            self.pack.step(self.applied_power_w, dt)
        except PackFault as exc:
            self.faults.append(str(exc))
            self.applied_power_w = 0.0
            self.pack.step(0.0, dt)
