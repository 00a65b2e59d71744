"""Live TCP mode: one agent loop per process, outstation listens, master
connects.  Protocol behavior is identical to simulation because both modes
drive the same agent classes; only the clock and the wire differ.

The virtual clock can run faster than wall time (``time_scale``) so the
full 5000 s case study finishes in seconds on loopback.  Both processes
must be given the same scale.
"""

from __future__ import annotations

import random
import select
import socket
import time
from pathlib import Path

from .agents import AgentConfig, MasterAgent, OutstationAgent
from .battery import Pack
from .scenario import ScenarioEvent, validate_lead
from .simulation import derive_seeds
from .store import SessionStore

POLL_S = 0.001


class _Clock:
    def __init__(self, scale: float):
        self.scale = scale
        self.t0 = time.monotonic()

    def now(self) -> float:
        return (time.monotonic() - self.t0) * self.scale


def _pump_once(agent, conn: socket.socket, now: float, phys_time: float,
               dt: float) -> tuple[float, bool]:
    """One wake of the live loop: drain the socket, run timers, catch up
    physics in dt steps, flush the outbox.  Returns (phys_time, closed)."""
    closed = False
    readable, _, _ = select.select([conn], [], [], POLL_S)
    if readable:
        data = conn.recv(65536)
        if not data:
            closed = True
        else:
            agent.handle_bytes(now, data)
    agent.tick(now)
    while phys_time + dt <= now:
        agent.step_physics(dt)
        phys_time += dt
    if agent.outbox and not closed:
        conn.sendall(b"".join(agent.outbox))
        agent.outbox.clear()
    return phys_time, closed


def _write_events(out_dir: str | Path | None, name: str, agent) -> None:
    if out_dir is None:
        return
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    (path / f"{name}_events.log").write_text(
        "".join(ev.line() + "\n" for ev in agent.events), encoding="utf-8")


def run_outstation(pack: Pack, host: str, port: int, *, seed: int = 42,
                   dt: float = 0.1, time_scale: float = 1.0, once: bool = False,
                   cfg: AgentConfig = AgentConfig(),
                   out_dir: str | Path | None = None) -> int:
    """Listen for master sessions; one session at a time, extra connections
    are refused.  Returns a process exit code."""
    _, outstation_seed = derive_seeds(seed)
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind((host, port))
    listener.listen(1)
    bound = listener.getsockname()
    print(f"listening on {bound[0]}:{bound[1]}", flush=True)
    try:
        while True:
            conn, peer = listener.accept()
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            print(f"session from {peer[0]}:{peer[1]}", flush=True)
            agent = OutstationAgent(pack, cfg, random.Random(outstation_seed))
            clock = _Clock(time_scale)
            agent.start(clock.now())
            phys_time = 0.0
            try:
                while True:
                    # refuse concurrent sessions while this one is active
                    extra, _, _ = select.select([listener], [], [], 0)
                    if extra:
                        reject, _ = listener.accept()
                        reject.close()
                    phys_time, closed = _pump_once(agent, conn, clock.now(),
                                                   phys_time, dt)
                    if closed:
                        break
            finally:
                conn.close()
                _write_events(out_dir, "outstation", agent)
            print(f"session ended: {len(agent.setpoints_applied)} setpoints applied",
                  flush=True)
            if once:
                return 0
    except KeyboardInterrupt:
        return 0
    finally:
        listener.close()


def run_master(shadow_pack: Pack, schedule: list[ScenarioEvent], host: str,
               port: int, *, seed: int = 42, dt: float = 0.1,
               time_scale: float = 1.0, horizon: float = 5000.0,
               cfg: AgentConfig = AgentConfig(),
               out_dir: str | Path | None = None,
               connect_retries: int = 10) -> int:
    """Drive the schedule against a live outstation.  Exit 0 iff every
    scheduled operation was applied."""
    validate_lead(schedule, cfg.lead)
    conn = None
    for attempt in range(connect_retries):
        try:
            conn = socket.create_connection((host, port), timeout=2.0)
            break
        except OSError:
            time.sleep(0.3)
    if conn is None:
        print(f"error: cannot connect to {host}:{port} "
              f"after {connect_retries} attempts", flush=True)
        return 1
    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    conn.setblocking(True)

    store = None
    stamp = time.strftime("%Y%m%dT%H%M%S")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        store = SessionStore(out / f"session_{stamp}_seed{seed}.store")

    master_seed, _ = derive_seeds(seed)
    agent = MasterAgent(shadow_pack, schedule, cfg, random.Random(master_seed),
                        store, store_stamp=stamp)
    clock = _Clock(time_scale)
    phys_time = 0.0
    try:
        while True:
            now = clock.now()
            phys_time, closed = _pump_once(agent, conn, now, phys_time, dt)
            if closed:
                print("error: connection closed by outstation", flush=True)
                return 1
            if now >= horizon or (agent.done and agent.op_index >= len(agent.ops)):
                break
    except KeyboardInterrupt:
        pass
    finally:
        conn.close()
        if store is not None:
            store.close()
        _write_events(out_dir, "master", agent)

    applied = sum(1 for op in agent.ops if op.applied)
    accepted = sum(1 for _, ok, _ in agent.verdicts if ok)
    print(f"rounds: {len(agent.verdicts)} ({accepted} accepted); "
          f"operations applied: {applied}/{len(agent.ops)}", flush=True)
    for line in agent.faults:
        print(f"fault: {line}", flush=True)
    return 0 if applied == len(agent.ops) else 1
