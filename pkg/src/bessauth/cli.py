"""Command-line entry point.

Subcommands: simulate, outstation, master, extract-params, discharge-curve.
Exit codes: 0 success, 1 protocol/operation/network failure, 2 usage or
file parse error.  Numeric flags fall back to BESSAUTH_* environment
variables before their built-in defaults (flags win).
"""

from __future__ import annotations

import argparse
import os
import re
import sys
from pathlib import Path

from .agents import AgentConfig
from .battery import (BatteryError, ExtractionError, PackFileError, load_pack,
                      write_discharge_csv)
from .scenario import ScenarioError, parse_scenario
from .simulation import (DEFAULT_DT, DEFAULT_HORIZON, DEFAULT_LATENCY,
                         REPLAY_PREVIOUS, TO_MASTER, ChannelFault,
                         SimulationError, run_scenario)
from .framing import MsgType

DEFAULT_PORT = 20000

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _usage_error(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)
    raise SystemExit(EXIT_USAGE)


def _env(name: str, cast, default):
    raw = os.environ.get(f"BESSAUTH_{name}")
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError:
        _usage_error(f"BESSAUTH_{name}={raw!r} is not a valid {cast.__name__}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=_env("SEED", int, 42),
                   help="64-bit run seed (default %(default)s)")
    p.add_argument("--dt", type=float, default=_env("DT", float, DEFAULT_DT),
                   help="physics step in seconds (default %(default)s)")
    p.add_argument("--tolerance", type=int,
                   default=_env("TOLERANCE", int, AgentConfig.tolerance),
                   help="measurement tolerance in counts (default %(default)s)")
    p.add_argument("--lead", type=float, default=_env("LEAD", float, AgentConfig.lead),
                   help="challenge lead before each operation, s (default %(default)s)")
    p.add_argument("--window", type=float, default=AgentConfig.window,
                   help="auth window length, s (default %(default)s)")
    p.add_argument("--timeout", type=float, default=AgentConfig.timeout,
                   help="reply/ack timeout, s (default %(default)s)")
    p.add_argument("--retries", type=int, default=AgentConfig.max_retries,
                   help="max re-challenges per operation (default %(default)s)")


def _cfg(args: argparse.Namespace) -> AgentConfig:
    return AgentConfig(lead=args.lead, window=args.window, timeout=args.timeout,
                       max_retries=args.retries, tolerance=args.tolerance)


def _check_ranges(args: argparse.Namespace) -> None:
    checks = [
        ("--dt", getattr(args, "dt", 0.1), lambda v: 0.0 < v <= 10.0),
        ("--tolerance", getattr(args, "tolerance", 0), lambda v: 0 <= v <= 255),
        ("--lead", getattr(args, "lead", 5.0), lambda v: 0.0 < v <= 3600.0),
        ("--window", getattr(args, "window", 10.0), lambda v: 0.0 < v <= 3600.0),
        ("--timeout", getattr(args, "timeout", 2.0), lambda v: 0.0 < v <= 3600.0),
        ("--retries", getattr(args, "retries", 3), lambda v: 0 <= v <= 100),
    ]
    for name, value, ok in checks:
        if not ok(value):
            _usage_error(f"{name}={value} out of range")


_FAULT_RE = re.compile(r"^(replay|flip|drop|dup)_round(\d+)(?::(\d+))?$")


def parse_fault_presets(spec: str, scenario, lead: float) -> list[ChannelFault]:
    """Comma-separated presets targeting a round's REPLY frame:
    replay_roundK | flip_roundK[:BIT] | drop_roundK | dup_roundK."""
    faults = []
    for item in filter(None, (s.strip() for s in spec.split(","))):
        m = _FAULT_RE.match(item)
        if not m:
            raise SimulationError(
                f"bad fault preset {item!r}; expected e.g. replay_round2, "
                f"flip_round2:40, drop_round1, dup_round3")
        kind, round_index, bit = m.group(1), int(m.group(2)), m.group(3)
        if not 1 <= round_index <= len(scenario):
            raise SimulationError(
                f"{item!r}: scenario has only {len(scenario)} operations")
        t_arm = scenario[round_index - 1].time - lead
        common = dict(time=t_arm, direction=TO_MASTER, msg_type=MsgType.REPLY)
        if kind == "replay":
            if round_index < 2:
                raise SimulationError(f"{item!r}: replay needs a prior round")
            faults.append(ChannelFault(kind="replay",
                                       message_index=REPLAY_PREVIOUS, **common))
        elif kind == "flip":
            faults.append(ChannelFault(kind="bit_flip",
                                       position=int(bit) if bit else 40, **common))
        elif kind == "drop":
            faults.append(ChannelFault(kind="drop", **common))
        else:
            faults.append(ChannelFault(kind="duplicate", **common))
    return faults


def _cmd_simulate(args: argparse.Namespace) -> int:
    scenario = parse_scenario(args.scenario)
    pack = load_pack(args.pack)
    faults = []
    if args.faults:
        try:
            faults = parse_fault_presets(args.faults, scenario, args.lead)
        except SimulationError as exc:
            _usage_error(str(exc))
    result = run_scenario(scenario, pack, seed=args.seed, dt=args.dt,
                          horizon=args.horizon, faults=faults,
                          out_dir=args.out, cfg=_cfg(args),
                          latency=args.latency, csv_full_rate=args.full_rate)
    accepted = sum(1 for _, ok, _ in result.verdicts if ok)
    print(f"rounds: {len(result.verdicts)} ({accepted} accepted)")
    for op in result.ops:
        status = (f"applied at t={op.applied_at:.3f}" if op.applied
                  else f"SKIPPED ({op.skipped_reason})")
        print(f"  {op.event.op:9s} {op.event.power_w:6.1f} W @ {op.event.time:8.1f} s: {status}")
    if result.out_dir is not None:
        print(f"outputs in {result.out_dir}")
    if not result.all_applied:
        print("error: not all scheduled operations were applied", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def _parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host:
        host, port = addr, str(DEFAULT_PORT)
    try:
        return host, int(port)
    except ValueError:
        _usage_error(f"bad address {addr!r}, expected HOST[:PORT]")


def _cmd_outstation(args: argparse.Namespace) -> int:
    from .live import run_outstation
    pack = load_pack(args.pack)
    host, port = _parse_addr(args.listen)
    try:
        return run_outstation(pack, host, port, seed=args.seed, dt=args.dt,
                              time_scale=args.time_scale, once=args.once,
                              cfg=_cfg(args), out_dir=args.out)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def _cmd_master(args: argparse.Namespace) -> int:
    from .live import run_master
    schedule = parse_scenario(args.scenario)
    pack = load_pack(args.pack)
    host, port = _parse_addr(args.connect)
    try:
        return run_master(pack.replica(noise_sigma=0.0), schedule, host, port,
                          seed=args.seed, dt=args.dt, time_scale=args.time_scale,
                          horizon=args.horizon, cfg=_cfg(args), out_dir=args.out)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def _cmd_extract_params(args: argparse.Namespace) -> int:
    pack = load_pack(args.pack)
    for i, (params, model) in enumerate(zip(pack.params, pack.models)):
        print(f"cell {i}: E0={model.e0:.6f} V  K={model.k:.6f} V/Ah  "
              f"A={model.a:.6f} V  B={model.b:.6f} 1/Ah  "
              f"R={model.r:.6f} ohm  Q={model.q:.6f} Ah")
    return EXIT_OK


def _cmd_discharge_curve(args: argparse.Namespace) -> int:
    pack = load_pack(args.pack)
    if not 0 <= args.cell < pack.n_cells:
        _usage_error(f"--cell {args.cell} out of range 0..{pack.n_cells - 1}")
    write_discharge_csv(args.out, pack.params[args.cell], pack.models[args.cell])
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bessauth",
        description="Battery-entropy challenge-reply authentication testbed: "
                    "co-simulation, live TCP agents and cell characterization.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the deterministic co-simulation")
    p.add_argument("--scenario", required=True, help="scenario file (time_s, op, power_w)")
    p.add_argument("--pack", required=True, help="pack definition INI file")
    p.add_argument("--out", default=None, help="output directory for CSVs/logs/store")
    p.add_argument("--horizon", type=float, default=DEFAULT_HORIZON,
                   help="simulated seconds (default %(default)s)")
    p.add_argument("--faults", default=None,
                   help="fault presets, e.g. 'flip_round2' or 'replay_round2,drop_round3'")
    p.add_argument("--latency", type=float, default=DEFAULT_LATENCY,
                   help="one-way channel latency, s (default %(default)s)")
    p.add_argument("--full-rate", action="store_true",
                   help="write one CSV row per dt step instead of per second")
    _add_common(p)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("outstation", help="run the field-side agent over TCP")
    p.add_argument("--pack", required=True)
    p.add_argument("--listen", default=f"127.0.0.1:{_env('PORT', int, DEFAULT_PORT)}",
                   help="HOST[:PORT] to listen on (default %(default)s)")
    p.add_argument("--once", action="store_true", help="exit after one session")
    p.add_argument("--time-scale", type=float,
                   default=_env("TIME_SCALE", float, 1.0),
                   help="virtual seconds per wall second (default %(default)s)")
    p.add_argument("--out", default=None, help="directory for the event log")
    _add_common(p)
    p.set_defaults(func=_cmd_outstation)

    p = sub.add_parser("master", help="drive a scenario against a live outstation")
    p.add_argument("--connect", required=True, help="HOST[:PORT] of the outstation")
    p.add_argument("--scenario", required=True)
    p.add_argument("--pack", required=True,
                   help="pack definition for the shadow model (same file as the outstation)")
    p.add_argument("--horizon", type=float, default=DEFAULT_HORIZON)
    p.add_argument("--time-scale", type=float,
                   default=_env("TIME_SCALE", float, 1.0),
                   help="virtual seconds per wall second (default %(default)s)")
    p.add_argument("--out", default=None, help="directory for store + event log")
    _add_common(p)
    p.set_defaults(func=_cmd_master)

    p = sub.add_parser("extract-params", help="print extracted model constants per cell")
    p.add_argument("--pack", required=True)
    p.set_defaults(func=_cmd_extract_params)

    p = sub.add_parser("discharge-curve", help="write steady-state discharge curves as CSV")
    p.add_argument("--pack", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--cell", type=int, default=0, help="cell index (default %(default)s)")
    p.set_defaults(func=_cmd_discharge_curve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _check_ranges(args)
    try:
        return args.func(args)
    except (PackFileError, ScenarioError, ExtractionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BatteryError, SimulationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except KeyboardInterrupt:
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
