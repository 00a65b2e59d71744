#!/usr/bin/env python3
"""Plot per-cell voltage and SoC traces from a simulation output directory.

Usage: python scripts/run_reference_case.py out/reference
       python scripts/plot_traces.py out/reference
"""

import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

out_dir = Path(sys.argv[1] if len(sys.argv) > 1 else "out/reference")
data = np.genfromtxt(out_dir / "measurements.csv", delimiter=",", names=True)

fig, (ax_v, ax_s) = plt.subplots(2, 1, figsize=(9, 7), sharex=True)
for cell in sorted(set(data["cell_id"].astype(int))):
    sel = data["cell_id"] == cell
    ax_v.plot(data["time_s"][sel], data["voltage_v"][sel], lw=0.7, label=f"cell {cell}")
    ax_s.plot(data["time_s"][sel], data["soc_pct"][sel], lw=1.2, label=f"cell {cell}")
ax_v.set_ylabel("terminal voltage [V]")
ax_s.set_ylabel("SoC [%]")
ax_s.set_xlabel("time [s]")
ax_v.legend(ncol=3, fontsize=8)
for ax in (ax_v, ax_s):
    ax.grid(alpha=0.3)

png = out_dir / "traces.png"
fig.tight_layout()
fig.savefig(png, dpi=140)
print(f"wrote {png}")
