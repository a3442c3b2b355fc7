"""Electrical model of in-array resistive-divider logic gates.

A gate is evaluated by preselecting an output cell to a known state and
applying a voltage across a resistive network formed by the input cells in
parallel, in series with the output cell (and any parasitic transistor
resistance).  The current through the output magnet,

    i = v / ( parallel(inputs) + r_output + r_parasitic ),

switches the output iff it exceeds the device threshold current ``i_c``.
Because the network resistance depends on the input bits, a band of applied
voltages exists for which the output switches exactly for the input
combinations the truth table demands:

    v_low  = i_c * max(R_total over must-switch combinations)
    v_high = i_c * min(R_total over must-hold combinations)

Any voltage in (v_low, v_high) realizes the gate; the midpoint is the gate's
*signature* and the width its *margin*.  An empty band (margin <= 0) means
the gate is electrically infeasible on that device.

Gate kinds
----------
NOT, NAND, NOR and the inverted-majority gates IMAJ3/IMAJ5 preselect the
output to 0 and switch it P->AP.  COPY preselects the output to 1 and drives
with reversed polarity, switching AP->P exactly when the input holds 0; its
margin equals NOT's.  NAND admits fan-in 2..5 (the resistive network extends
naturally); all other kinds have fixed fan-in.

Parasitic series resistance shifts both window edges by exactly
``i_c * r_parasitic`` and leaves the margin untouched.  With the drive
voltage fixed at the parasitic-free signature, the gate misbehaves once the
shifted lower edge crosses the signature, i.e. beyond

    r_parasitic* = margin / (2 * i_c).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from .device_models import MtjSpec, resistance

__all__ = [
    "GateKind",
    "Gate",
    "ResistiveNetwork",
    "VoltageWindow",
    "InfeasibleGate",
    "InfeasibleGateError",
    "truth_table",
    "combined_resistance",
    "voltage_window",
    "parasitic_failure_threshold",
    "margins_table",
]


class InfeasibleGateError(Exception):
    """Raised when a gate with no usable voltage window is required."""


# Interface alias: the error is the explicit no-window outcome of a gate.
InfeasibleGate = InfeasibleGateError


class GateKind(Enum):
    NOT = "NOT"
    COPY = "COPY"
    NAND = "NAND"
    NOR = "NOR"
    IMAJ3 = "IMAJ3"
    IMAJ5 = "IMAJ5"


_CANONICAL_FAN_IN = {
    GateKind.NOT: 1,
    GateKind.COPY: 1,
    GateKind.NAND: 2,
    GateKind.NOR: 2,
    GateKind.IMAJ3: 3,
    GateKind.IMAJ5: 5,
}

# NAND generalizes to wider fan-in on the same divider principle; the other
# kinds are electrically meaningful only at their canonical width.
_FAN_IN_RANGE = {
    GateKind.NOT: (1, 1),
    GateKind.COPY: (1, 1),
    GateKind.NAND: (2, 5),
    GateKind.NOR: (2, 2),
    GateKind.IMAJ3: (3, 3),
    GateKind.IMAJ5: (5, 5),
}


@dataclass(frozen=True)
class Gate:
    """A gate kind plus its fan-in (defaults to the canonical width)."""

    kind: GateKind
    fan_in: int = 0  # 0 sentinel -> canonical fan-in

    def __post_init__(self) -> None:
        fan_in = self.fan_in or _CANONICAL_FAN_IN[self.kind]
        lo, hi = _FAN_IN_RANGE[self.kind]
        if not lo <= fan_in <= hi:
            raise ValueError(f"{self.kind.value} fan-in {fan_in} outside [{lo}, {hi}]")
        object.__setattr__(self, "fan_in", fan_in)

    @property
    def preset_bit(self) -> int:
        """Output preselect value: COPY presets 1, everything else 0."""
        return 1 if self.kind is GateKind.COPY else 0

    def __str__(self) -> str:
        if self.fan_in != _CANONICAL_FAN_IN[self.kind]:
            return f"{self.kind.value}{self.fan_in}"
        return self.kind.value


@dataclass(frozen=True)
class ResistiveNetwork:
    """Input resistances in parallel, in series with output and parasitic."""

    input_resistances: tuple[float, ...]
    output_resistance: float
    parasitic: float = 0.0

    def total(self) -> float:
        conductance = sum(1.0 / r for r in self.input_resistances)
        return 1.0 / conductance + self.output_resistance + self.parasitic


@dataclass(frozen=True)
class VoltageWindow:
    """Feasible drive-voltage band for one gate on one device generation."""

    v_low: float
    v_high: float
    signature: float
    margin: float
    feasible: bool
    gate: Gate = field(compare=False, default=Gate(GateKind.NOT))


def truth_table(kind: GateKind, fan_in: int | None = None) -> tuple[int, ...]:
    """Output bit for every input combination, indexed by the input bits
    packed little-endian (input ``i`` contributes ``2**i``)."""
    gate = Gate(kind, fan_in or 0)
    n = gate.fan_in
    outputs = []
    for combo in range(2 ** n):
        ones = bin(combo).count("1")
        if kind is GateKind.NOT:
            out = 1 - ones
        elif kind is GateKind.COPY:
            out = ones
        elif kind is GateKind.NAND:
            out = 0 if ones == n else 1
        elif kind is GateKind.NOR:
            out = 1 if ones == 0 else 0
        else:  # inverted majority
            out = 1 if ones <= n // 2 else 0
        outputs.append(out)
    return tuple(outputs)


def combined_resistance(
    spec: MtjSpec,
    input_bits: Sequence[int],
    output_bit: int = 0,
    parasitic: float = 0.0,
) -> float:
    """Total network resistance for one input combination."""
    if not input_bits:
        raise ValueError("at least one input is required")
    network = ResistiveNetwork(
        input_resistances=tuple(resistance(spec, b) for b in input_bits),
        output_resistance=resistance(spec, output_bit),
        parasitic=parasitic,
    )
    return network.total()


def _window_edges(spec: MtjSpec, gate: Gate) -> tuple[float, float]:
    """Parasitic-free (v_low, v_high) from the truth table."""
    table = truth_table(gate.kind, gate.fan_in)
    preset = gate.preset_bit
    must_switch: list[float] = []
    must_hold: list[float] = []
    for combo in range(2 ** gate.fan_in):
        bits = tuple((combo >> i) & 1 for i in range(gate.fan_in))
        r_total = combined_resistance(spec, bits, output_bit=preset)
        if table[combo] != preset:
            must_switch.append(r_total)
        else:
            must_hold.append(r_total)
    if not must_switch or not must_hold:
        raise ValueError(f"gate {gate} has a constant truth table")
    return spec.i_c * max(must_switch), spec.i_c * min(must_hold)


def voltage_window(
    spec: MtjSpec,
    gate: Gate,
    parasitic: float = 0.0,
    require_feasible: bool = False,
) -> VoltageWindow:
    """Drive-voltage window of ``gate`` on ``spec``.

    The parasitic series resistance enters as an exact shift of both edges
    by ``i_c * parasitic`` (computed as such, so the shift identity and the
    margin invariance hold bit-for-bit in floating point).
    """
    v_low0, v_high0 = _window_edges(spec, gate)
    shift = spec.i_c * parasitic
    margin = v_high0 - v_low0
    window = VoltageWindow(
        v_low=v_low0 + shift,
        v_high=v_high0 + shift,
        signature=0.5 * (v_low0 + v_high0) + shift,
        margin=margin,
        feasible=margin > 0.0,
        gate=gate,
    )
    if require_feasible and not window.feasible:
        raise InfeasibleGateError(f"{gate} has no voltage window on {spec.name}")
    return window


def parasitic_failure_threshold(spec: MtjSpec, gate: Gate) -> float:
    """Series resistance at which a signature-driven gate stops working.

    The drive voltage is fixed at the parasitic-free signature; parasitic
    resistance slides the window upward until its lower edge crosses the
    applied voltage at margin / (2 * i_c).
    """
    window = voltage_window(spec, gate, require_feasible=True)
    return window.margin / (2.0 * spec.i_c)


def margins_table(spec: MtjSpec, parasitic: float = 0.0) -> list[VoltageWindow]:
    """Windows of the five canonical gates, widest margin first NOT->IMAJ5."""
    gates = [
        Gate(GateKind.NOT),
        Gate(GateKind.NAND),
        Gate(GateKind.NOR),
        Gate(GateKind.IMAJ3),
        Gate(GateKind.IMAJ5),
    ]
    return [voltage_window(spec, g, parasitic=parasitic) for g in gates]
