"""Electrical elements in the globally rotating common DQ frame.

Conventions used throughout:
  * DQ quantities are amplitude (peak) phasors in a frame rotating at the
    anchor frequency omega_g; per-level SI volts and amps.
  * Complex shorthand x_D + j*x_Q obeys dx/dt = (...)/L - j*omega_g*x for a
    series RL branch, i.e. the usual d-axis +omega*i_Q / q-axis -omega*i_D
    cross coupling.
  * Three-phase power from amplitude phasors: p = 1.5*(v_d*i_d + v_q*i_q),
    q = 1.5*(v_q*i_d - v_d*i_q).
  * Bus voltages come from the virtual-resistor method: each bus carries a
    large shunt resistor and v_bus = R_N * (net injected current), applied
    per axis. Algebraic (L = 0) loads fold into the bus conductance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class TopologyError(Exception):
    """An injection or branch references a de-energized or unknown bus."""


@dataclass
class DgElectrical:
    """Coupling branch of one DG: controllable source behind R_c + j*w*L_c."""

    dg_id: str
    bus_id: str
    mg_id: str
    coupling_resistance: float  # ohm
    coupling_inductance: float  # henry

    def __post_init__(self):
        if not self.coupling_inductance > 0.0:
            raise ValueError(f"{self.dg_id}: coupling inductance must be > 0")
        if self.coupling_resistance < 0.0:
            raise ValueError(f"{self.dg_id}: coupling resistance must be >= 0")


@dataclass
class LineBranch:
    """Lumped series RL feeder line between two buses of one voltage level."""

    line_id: str
    from_bus: str
    to_bus: str
    resistance: float  # ohm
    inductance: float  # henry
    voltage_level: str = "LV"

    def __post_init__(self):
        if not self.inductance > 0.0:
            raise ValueError(f"{self.line_id}: inductance must be > 0")
        if self.resistance < 0.0:
            raise ValueError(f"{self.line_id}: resistance must be >= 0")


@dataclass
class RlLoad:
    """Series RL constant-impedance load; `scale` is event-controlled.

    scale multiplies the load admittance, so scale=0 is an open load and
    scale=2 doubles the drawn current at fixed voltage. Loads with L = 0
    are algebraic (i = scale * v / R) and carry no state.
    """

    load_id: str
    bus_id: str
    resistance: float  # ohm
    inductance: float  # henry, 0 for purely resistive
    scale: float = 1.0

    def __post_init__(self):
        if not self.resistance > 0.0:
            raise ValueError(f"{self.load_id}: resistance must be > 0")
        if self.inductance < 0.0:
            raise ValueError(f"{self.load_id}: inductance must be >= 0")
        if self.scale < 0.0:
            raise ValueError(f"{self.load_id}: scale must be >= 0")

    @property
    def is_dynamic(self) -> bool:
        return self.inductance > 0.0


@dataclass
class TransformerSpec:
    """Two-winding transformer: ideal ratio plus series short-circuit branch."""

    transformer_id: str
    rating_va: float
    u_k: float  # per-unit short-circuit voltage
    r_k: float  # per-unit resistance
    hv_voltage: float  # rated volts, line-to-line rms
    lv_voltage: float

    def __post_init__(self):
        if not (0.0 < self.r_k < self.u_k < 1.0):
            raise ValueError(
                f"{self.transformer_id}: need 0 < r_k < u_k < 1, "
                f"got r_k={self.r_k}, u_k={self.u_k}"
            )
        if self.rating_va <= 0.0:
            raise ValueError(f"{self.transformer_id}: rating must be > 0")

    @property
    def ratio(self) -> float:
        """hv/lv voltage ratio (phase shift of the Dyg group is neglected)."""
        return self.hv_voltage / self.lv_voltage


def rotate_to_common(x_dq, delta: float) -> np.ndarray:
    """Rotate a local-frame dq vector by `delta` into the common frame."""
    if not math.isfinite(delta):
        raise ValueError("rotation angle must be finite")
    c, s = math.cos(delta), math.sin(delta)
    x = np.asarray(x_dq, dtype=float)
    return np.array([c * x[0] - s * x[1], s * x[0] + c * x[1]])


def line_rhs(i_line, v_from, v_to, omega_g: float, branch: LineBranch) -> np.ndarray:
    """DQ current derivative of a series RL line, common frame."""
    r, el = branch.resistance, branch.inductance
    did = (v_from[0] - v_to[0] - r * i_line[0]) / el + omega_g * i_line[1]
    diq = (v_from[1] - v_to[1] - r * i_line[1]) / el - omega_g * i_line[0]
    return np.array([did, diq])


def load_rhs(i_load, v_bus, omega_g: float, load: RlLoad) -> np.ndarray:
    """DQ current derivative of a dynamic RL load (admittance-scaled)."""
    if not load.is_dynamic:
        raise ValueError(f"{load.load_id} is algebraic; use algebraic_load_current")
    r, el, s = load.resistance, load.inductance, load.scale
    did = (s * v_bus[0] - r * i_load[0]) / el + omega_g * i_load[1]
    diq = (s * v_bus[1] - r * i_load[1]) / el - omega_g * i_load[0]
    return np.array([did, diq])


def algebraic_load_current(v_bus, load: RlLoad) -> np.ndarray:
    """Current drawn by a purely resistive load: i = scale * v / R."""
    return load.scale * np.asarray(v_bus, dtype=float) / load.resistance


def dg_output_rhs(i_o, e_source, v_bus, omega_g: float, dg: DgElectrical) -> np.ndarray:
    """DQ current derivative of the DG coupling branch (source E to bus)."""
    r, el = dg.coupling_resistance, dg.coupling_inductance
    did = (e_source[0] - v_bus[0] - r * i_o[0]) / el + omega_g * i_o[1]
    diq = (e_source[1] - v_bus[1] - r * i_o[1]) / el - omega_g * i_o[0]
    return np.array([did, diq])


def measured_power(v_o, i_o):
    """Instantaneous three-phase (p, q) from amplitude DQ phasors."""
    p = 1.5 * (v_o[0] * i_o[0] + v_o[1] * i_o[1])
    q = 1.5 * (v_o[1] * i_o[0] - v_o[0] * i_o[1])
    return p, q


def filter_rhs(filtered: float, raw: float, omega_c: float) -> float:
    """First-order measurement filter dX/dt = omega_c * (x_raw - X)."""
    if not omega_c > 0.0:
        raise ValueError("filter cutoff must be positive")
    return omega_c * (raw - filtered)


def transformer_equivalent(t: TransformerSpec, side: str):
    """Series (R, X) of the short-circuit branch referred to `side`.

    Z_base is taken on the requested winding voltage; X is u_k * Z_base at
    rated frequency (r_k << u_k, no quadrature correction).
    """
    if side == "LV":
        v = t.lv_voltage
    elif side == "MV" or side == "HV":
        v = t.hv_voltage
    else:
        raise ValueError(f"unknown transformer side {side!r}")
    z_base = v * v / t.rating_va
    return t.r_k * z_base, t.u_k * z_base


@dataclass
class PlantTopology:
    """Bus table plus incidence of every injecting element.

    Bus voltages are produced by `bus_voltages` from per-bus net injections;
    `r_virtual` is the LV-level virtual resistance and is referred through
    the square of the voltage-base ratio for buses on other levels, so the
    relative leakage v/R_N is uniform across levels.
    """

    bus_ids: list
    bus_levels: dict  # bus_id -> level name
    level_bases: dict  # level name -> amplitude voltage base (V)
    r_virtual: float  # ohm, at the reference (lowest) level
    critical_bus: str
    pcc_buses: dict = field(default_factory=dict)  # mg_id -> bus_id
    energized: dict = field(default_factory=dict)  # bus_id -> bool

    def __post_init__(self):
        if not self.r_virtual > 0.0:
            raise ValueError("virtual resistance must be > 0")
        if self.critical_bus not in self.bus_ids:
            raise TopologyError(f"critical bus {self.critical_bus!r} not defined")
        if not self.energized:
            self.energized = {b: True for b in self.bus_ids}
        self._index = {b: i for i, b in enumerate(self.bus_ids)}
        ref_base = min(self.level_bases.values())
        self._r_eff = np.array(
            [
                self.r_virtual
                * (self.level_bases[self.bus_levels[b]] / ref_base) ** 2
                for b in self.bus_ids
            ]
        )

    def bus_index(self, bus_id: str) -> int:
        try:
            return self._index[bus_id]
        except KeyError:
            raise TopologyError(f"unknown bus {bus_id!r}") from None

    @property
    def r_effective(self) -> np.ndarray:
        """Per-bus virtual resistance after level referral."""
        return self._r_eff


def bus_voltages(injections: dict, topology: PlantTopology,
                 shunt_conductance=None) -> dict:
    """Per-bus DQ voltages v_b = R_N * (net injected current).

    `injections` maps bus_id -> summed DQ current injected into the bus.
    `shunt_conductance` optionally maps bus_id -> algebraic conductance
    folded in parallel with the virtual resistor.
    """
    for bus_id in injections:
        idx = topology.bus_index(bus_id)
        if not topology.energized.get(bus_id, False):
            raise TopologyError(f"injection targets de-energized bus {bus_id!r}")
        del idx
    out = {}
    for bus_id in topology.bus_ids:
        inj = np.asarray(injections.get(bus_id, (0.0, 0.0)), dtype=float)
        g = 1.0 / topology.r_effective[topology.bus_index(bus_id)]
        if shunt_conductance:
            g += shunt_conductance.get(bus_id, 0.0)
        out[bus_id] = inj / g
    return out
