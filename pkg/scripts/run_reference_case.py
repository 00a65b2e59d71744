#!/usr/bin/env python3
"""Run the bundled reference case study and print a round/operation summary.

Usage: python scripts/run_reference_case.py [OUT_DIR] [SEED]
"""

import sys

from bessauth import REFERENCE_PACK, REFERENCE_SCENARIO, data_path
from bessauth.battery import load_pack
from bessauth.scenario import parse_scenario
from bessauth.simulation import audit_gating, run_scenario

out_dir = sys.argv[1] if len(sys.argv) > 1 else "out/reference"
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 42

result = run_scenario(parse_scenario(data_path(REFERENCE_SCENARIO)),
                      load_pack(data_path(REFERENCE_PACK)),
                      seed=seed, out_dir=out_dir)

print(f"outputs: {result.out_dir}")
for row in result.auth_rows:
    print(f"round {row['round']}: challenge@t={row['time_s']:.1f}s "
          f"{row['challenge_hex']} -> {row['reply_wire_hex']} {row['verdict']}")
for op in result.ops:
    status = f"applied at {op.applied_at:.1f}s" if op.applied else f"SKIPPED ({op.skipped_reason})"
    print(f"op {op.event.op:9s} {op.event.power_w:5.1f} W @ {op.event.time:6.1f}s: {status}")
violations = audit_gating(result.events, 10.0)
print(f"gating violations: {violations or 'none'}")
sys.exit(0 if result.all_applied and not violations else 1)
