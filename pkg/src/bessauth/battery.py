"""Li-ion cell and series-pack simulation.

Each cell follows the generic charge/discharge voltage model

    discharge (i* >= 0):
        V = E0 - R*i - K*(Q/(Q - it))*(it + i*) + A*exp(-B*it)
    charge (i* < 0):
        V = E0 - R*i - K*(Q/(it + 0.1*Q))*i* - K*(Q/(Q - it))*it + A*exp(-B*it)

where it is the extracted charge in Ah, i the instantaneous current in A
(positive = discharge) and i* the low-pass-filtered current feeding the
polarization term.  Model constants are extracted from datasheet-style
anchor points so the curve at nominal current reproduces them exactly.

Gaussian sensor noise (seeded) is applied to *reported* voltages only;
cell state is always noise-free.
"""

from __future__ import annotations

import configparser
import math
import random
from dataclasses import dataclass

import numpy as np


class BatteryError(Exception):
    """Base class for battery model failures."""


class ExtractionError(BatteryError):
    """Model constants cannot be extracted from the given cell parameters."""


class PackFault(BatteryError):
    """Simulation-level fault (depleted pack asked to discharge, bad bus voltage)."""


class PackFileError(BatteryError):
    """Pack definition file is missing, malformed or inconsistent."""


@dataclass(frozen=True)
class CellParams:
    """Static electro-chemical parameters of one cell (datasheet values)."""

    nominal_voltage: float        # V
    rated_capacity: float         # Ah
    initial_soc: float            # percent
    response_time: float          # s, current-filter time constant
    max_capacity: float           # Ah (Q)
    cutoff_voltage: float         # V
    full_voltage: float           # V
    nominal_current: float        # A
    internal_resistance: float    # ohm
    capacity_nominal: float       # Ah at nominal voltage (Q_nom)
    exp_voltage: float            # V at end of exponential zone
    exp_capacity: float           # Ah at end of exponential zone

    def validate(self) -> None:
        if not (self.cutoff_voltage < self.nominal_voltage < self.full_voltage):
            raise ExtractionError(
                "voltage ordering violated: need cutoff_voltage < nominal_voltage "
                f"< full_voltage, got {self.cutoff_voltage}, {self.nominal_voltage}, "
                f"{self.full_voltage}"
            )
        if not (0.0 < self.exp_capacity < self.capacity_nominal < self.max_capacity):
            raise ExtractionError(
                "capacity ordering violated: need 0 < exp_capacity < capacity_nominal "
                f"< max_capacity, got {self.exp_capacity}, {self.capacity_nominal}, "
                f"{self.max_capacity}"
            )
        if not (0.0 <= self.initial_soc <= 100.0):
            raise ExtractionError(f"initial_soc {self.initial_soc} outside [0, 100]")
        if self.response_time <= 0.0:
            raise ExtractionError(f"response_time {self.response_time} must be > 0")


@dataclass(frozen=True)
class DischargeModel:
    """Extracted voltage-model constants for one cell."""

    e0: float   # V, constant voltage
    k: float    # V/Ah, polarization constant
    a: float    # V, exponential zone amplitude
    b: float    # 1/Ah, exponential zone inverse capacity
    r: float    # ohm, internal resistance
    q: float    # Ah, max capacity


@dataclass(slots=True)
class CellState:
    """Dynamic state of one cell; a fresh instance is produced per step."""

    extracted_charge: float    # Ah (it)
    soc: float                 # percent
    filtered_current: float    # A (i*)
    terminal_voltage: float    # V, noise-free
    time: float                # s


def discharge_voltage(m: DischargeModel, it: float, i: float, i_star: float) -> float:
    return (m.e0 - m.r * i - m.k * (m.q / (m.q - it)) * (it + i_star)
            + m.a * math.exp(-m.b * it))


def charge_voltage(m: DischargeModel, it: float, i: float, i_star: float) -> float:
    return (m.e0 - m.r * i - m.k * (m.q / (it + 0.1 * m.q)) * i_star
            - m.k * (m.q / (m.q - it)) * it + m.a * math.exp(-m.b * it))


def terminal_voltage(m: DischargeModel, it: float, i: float, i_star: float) -> float:
    """Mode selection: the filtered current decides charge vs discharge shape."""
    if i_star >= 0.0:
        return discharge_voltage(m, it, i, i_star)
    return charge_voltage(m, it, i, i_star)


def extract_model(params: CellParams) -> DischargeModel:
    """Fit (E0, K, A) so the curve at steady nominal current passes exactly
    through (0, full_voltage), (exp_capacity, exp_voltage) and
    (capacity_nominal, nominal_voltage); B is fixed at 3/exp_capacity.

    The three anchors give a 3x3 linear system, since the discharge equation
    is linear in E0, K and A for fixed B and steady i = i* = nominal_current.
    """
    params.validate()
    q = params.max_capacity
    i = params.nominal_current
    b = 3.0 / params.exp_capacity

    def pol(it: float) -> float:
        return (q / (q - it)) * (it + i)

    anchors = (
        (0.0, params.full_voltage),
        (params.exp_capacity, params.exp_voltage),
        (params.capacity_nominal, params.nominal_voltage),
    )
    lhs = np.array([[1.0, -pol(it), math.exp(-b * it)] for it, _ in anchors])
    rhs = np.array([v + params.internal_resistance * i for _, v in anchors])
    try:
        e0, k, a = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as exc:
        raise ExtractionError(
            "degenerate anchor points (exp_capacity, capacity_nominal, "
            "max_capacity make the anchor system singular)"
        ) from exc

    model = DischargeModel(e0=float(e0), k=float(k), a=float(a), b=b,
                           r=params.internal_resistance, q=q)
    bad = [name for name, v in
           (("E0", model.e0), ("K", model.k), ("A", model.a), ("B", model.b))
           if v <= 0.0]
    if bad:
        raise ExtractionError(
            f"extracted constants {', '.join(bad)} are not positive; offending "
            f"inputs: full_voltage={params.full_voltage}, exp_voltage={params.exp_voltage}, "
            f"nominal_voltage={params.nominal_voltage}, exp_capacity={params.exp_capacity}, "
            f"capacity_nominal={params.capacity_nominal}"
        )
    return model


def initial_state(params: CellParams, model: DischargeModel) -> CellState:
    it = params.max_capacity * (1.0 - params.initial_soc / 100.0)
    return CellState(
        extracted_charge=it,
        soc=params.initial_soc,
        filtered_current=0.0,
        terminal_voltage=terminal_voltage(model, it, 0.0, 0.0),
        time=0.0,
    )


def step_cell(model: DischargeModel, state: CellState, current: float,
              dt: float, response_time: float) -> CellState:
    """Advance one cell by dt seconds at the given current (A, + = discharge)."""
    if dt <= 0.0:
        raise ValueError(f"dt must be > 0, got {dt}")
    it = state.extracted_charge + current * dt / 3600.0
    it = min(max(it, 0.0), model.q)
    i_star = state.filtered_current + (dt / response_time) * (current - state.filtered_current)
    soc = 100.0 * (1.0 - it / model.q)
    v = terminal_voltage(model, it, current, i_star)
    assert abs(soc - 100.0 * (1.0 - it / model.q)) <= 1e-9
    if v < 0.0:
        raise PackFault(f"cell terminal voltage went negative ({v:.3f} V) at it={it:.4f} Ah")
    return CellState(extracted_charge=it, soc=soc, filtered_current=i_star,
                     terminal_voltage=v, time=state.time + dt)


def cell_depleted(params: CellParams, model: DischargeModel, state: CellState) -> bool:
    """Depletion is judged on the noise-free terminal voltage."""
    return (state.extracted_charge >= model.q
            or state.terminal_voltage <= params.cutoff_voltage)


class Pack:
    """Series pack: one shared current, per-cell states, seeded sensor noise.

    ``measure`` reports the latest noisy voltage and the exact SoC; state is
    never perturbed by noise, so two packs with equal seeds produce
    bit-identical trajectories.
    """

    def __init__(self, cells: list[CellParams], noise_sigma: float = 0.0,
                 rng_seed: int = 0):
        if not cells:
            raise PackFileError("pack needs at least one cell")
        for p in cells:
            p.validate()
        self.params = list(cells)
        self.models = [extract_model(p) for p in cells]
        self.states = [initial_state(p, m) for p, m in zip(cells, self.models)]
        self.noise_sigma = noise_sigma
        self.rng_seed = rng_seed
        self._rng = random.Random(rng_seed)
        self.reported_v = [self._report(s.terminal_voltage) for s in self.states]
        # raw ampere-hour throughput per cell, for conservation audits
        self.charge_integral_ah = [0.0] * len(cells)

    @property
    def n_cells(self) -> int:
        return len(self.params)

    def _report(self, v: float) -> float:
        if self.noise_sigma > 0.0:
            return v + self._rng.gauss(0.0, self.noise_sigma)
        return v

    def replica(self, noise_sigma: float = 0.0) -> "Pack":
        """Fresh pack with identical parameters (shadow models run noise-free)."""
        return Pack(self.params, noise_sigma=noise_sigma, rng_seed=self.rng_seed)

    def depleted(self) -> bool:
        return any(cell_depleted(p, m, s)
                   for p, m, s in zip(self.params, self.models, self.states))

    def step(self, power_w: float, dt: float) -> list[tuple[float, float]]:
        """Advance every cell by dt at the series current power_w / sum(V).

        power_w > 0 discharges the pack.  Returns the per-cell measurement
        vector [(reported voltage, exact soc), ...].
        """
        if power_w > 0.0 and self.depleted():
            raise PackFault("pack depleted; discharge refused")
        v_sum = sum(s.terminal_voltage for s in self.states)
        if v_sum <= 0.0:
            raise PackFault(f"non-positive pack voltage {v_sum:.3f} V")
        current = power_w / v_sum
        self.states = [
            step_cell(m, s, current, dt, p.response_time)
            for p, m, s in zip(self.params, self.models, self.states)
        ]
        dq = current * dt / 3600.0
        for i in range(len(self.charge_integral_ah)):
            self.charge_integral_ah[i] += dq
        self.reported_v = [self._report(s.terminal_voltage) for s in self.states]
        return [(rv, s.soc) for rv, s in zip(self.reported_v, self.states)]

    def measure(self, cell_index: int) -> tuple[float, float]:
        if not 0 <= cell_index < self.n_cells:
            raise IndexError(f"cell index {cell_index} out of range 0..{self.n_cells - 1}")
        return self.reported_v[cell_index], self.states[cell_index].soc


_FIELD_KEYS = {
    "nominal_voltage": "nominal_voltage_v",
    "rated_capacity": "rated_capacity_ah",
    "initial_soc": "initial_soc_pct",
    "response_time": "response_time_s",
    "max_capacity": "max_capacity_ah",
    "cutoff_voltage": "cutoff_voltage_v",
    "full_voltage": "full_voltage_v",
    "nominal_current": "nominal_current_a",
    "internal_resistance": "internal_resistance_ohm",
    "capacity_nominal": "capacity_at_nominal_ah",
    "exp_voltage": "exp_zone_voltage_v",
    "exp_capacity": "exp_zone_capacity_ah",
}


def load_pack(path: str) -> Pack:
    """Parse the INI pack definition: a [pack] section plus [cell N] sections."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cp.read_file(fh, source=path)
    except OSError as exc:
        raise PackFileError(f"{path}: cannot read pack file: {exc}") from exc
    except configparser.Error as exc:
        raise PackFileError(f"{path}: {exc}") from exc

    if "pack" not in cp:
        raise PackFileError(f"{path}: missing [pack] section")
    try:
        noise_sigma = cp.getfloat("pack", "noise_sigma_v", fallback=0.0)
        rng_seed = cp.getint("pack", "seed", fallback=0)
    except ValueError as exc:
        raise PackFileError(f"{path}: bad value in [pack]: {exc}") from exc

    cell_sections = sorted(
        (s for s in cp.sections() if s.startswith("cell ")),
        key=lambda s: int(s.split()[1]),
    )
    if not cell_sections:
        raise PackFileError(f"{path}: no [cell N] sections")
    indices = [int(s.split()[1]) for s in cell_sections]
    if indices != list(range(len(indices))):
        raise PackFileError(f"{path}: cell indices must be contiguous from 0, got {indices}")

    cells = []
    for section in cell_sections:
        kwargs = {}
        for field, key in _FIELD_KEYS.items():
            if not cp.has_option(section, key):
                raise PackFileError(f"{path}: [{section}] missing key '{key}'")
            try:
                kwargs[field] = cp.getfloat(section, key)
            except ValueError as exc:
                raise PackFileError(f"{path}: [{section}] {key}: {exc}") from exc
        cells.append(CellParams(**kwargs))
    return Pack(cells, noise_sigma=noise_sigma, rng_seed=rng_seed)


def discharge_curve_rows(params: CellParams, model: DischargeModel,
                         rate_multiples: tuple[float, ...] = (0.5, 1.0, 2.0),
                         points: int = 400) -> list[tuple[float, float, float]]:
    """Steady-state discharge curves, one block per C-rate multiple of the
    nominal rate.  Rows are (it_ah, voltage_v, c_rate); each block stops at
    the cutoff voltage or just short of max capacity.
    """
    rows = []
    nominal_rate = params.nominal_current / model.q
    grid = [model.q * 0.999 * j / (points - 1) for j in range(points)]
    # keep the datasheet anchors on the grid so the curve is checkable
    sweep = sorted(set(grid) | {0.0, params.exp_capacity, params.capacity_nominal})
    for mult in rate_multiples:
        c_rate = mult * nominal_rate
        current = c_rate * model.q
        for it in sweep:
            v = discharge_voltage(model, it, current, current)
            if v <= params.cutoff_voltage:
                break
            rows.append((it, v, c_rate))
    return rows


def write_discharge_csv(path: str, params: CellParams, model: DischargeModel,
                        cell_id: int | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("it_ah,voltage_v,c_rate\n")
        for it, v, c in discharge_curve_rows(params, model):
            fh.write(f"{it:.6f},{v:.6f},{c:.6f}\n")
