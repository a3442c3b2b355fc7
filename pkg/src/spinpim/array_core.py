"""Memory tiles, micro-operations, and the scalar reference executor.

Coordinate convention
---------------------
All micro-ops address cells with *logical* ``(tile, row, col)`` triples.  A
logical row is the unit of computation: every gate reads its inputs from and
writes its output to one logical row.

The two cell variants map logical coordinates onto the physical array
differently:

- ``THREE_T`` (three transistors per cell): logical row == physical row.
  Gates select operand columns within the activated physical row, so the
  word line charged for computation is the logical row itself.
- ``ONE_T_TRANSPOSED`` (one transistor per cell): the array is transposed —
  logical rows run along physical columns.  A gate's operand cells sit in
  one physical column on alternating even/odd bitlines, which forces the
  parity rule: all inputs on one logical-column parity, the output on the
  other.  The word lines charged for computation are the operand logical
  columns (= physical rows), shared by every logical row evaluating the
  same gate template in lockstep.

Memory accesses (read/write/transfer) are physical-row granular: one access
touches exactly one physical row of one tile, with masked columns allowed.

Activation latches: a tile keeps its computation word lines latched between
gate evaluations and re-charges only when the required line set changes.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .device_models import MtjSpec
from .gate_engine import Gate, InfeasibleGate, truth_table, voltage_window

__all__ = [
    "Cell",
    "CellVariant",
    "ExecutionLog",
    "MicroOp",
    "OpKind",
    "OutOfBounds",
    "PeripheralModel",
    "PlacementViolation",
    "TileConfig",
    "TileState",
    "execute",
    "read_row",
    "write_row",
    "transfer",
]

Cell = tuple[int, int, int]  # (tile, logical row, logical col)


class PlacementViolation(Exception):
    """A micro-op addresses cells in an electrically impossible pattern."""


class OutOfBounds(Exception):
    """A micro-op addresses cells outside the tile."""


class CellVariant(Enum):
    ONE_T_TRANSPOSED = "1T"
    THREE_T = "3T"


class OpKind(Enum):
    GATE_EVAL = "GateEval"
    ROW_ACTIVATE = "RowActivate"
    READ = "Read"
    WRITE = "Write"
    INTER_TILE_TRANSFER = "InterTileTransfer"


@dataclass(frozen=True)
class PeripheralModel:
    """Peripheral-circuitry cost contributions (absolute seconds/joules).

    ``enabled=False`` models the ideal, device-only array: every
    contribution is zero.  ``from_factors`` materializes dimensionless
    factors against a device generation: latencies as multiples of the
    switching time, energies as multiples of the single-cell write energy
    ``(write_current)^2 * r_p * t_switch``.
    """

    row_activate_latency: float = 0.0
    row_activate_energy: float = 0.0
    gate_issue_latency: float = 0.0
    gate_issue_energy: float = 0.0
    read_latency: float = 0.0
    read_energy: float = 0.0
    write_latency: float = 0.0
    write_energy: float = 0.0
    enabled: bool = False

    @classmethod
    def disabled(cls) -> "PeripheralModel":
        return cls()

    @classmethod
    def from_factors(cls, spec: MtjSpec, factors: Mapping[str, float]) -> "PeripheralModel":
        t = spec.t_switch
        energy_unit = (spec.write_current_factor * spec.i_c) ** 2 * spec.r_p * spec.t_switch
        return cls(
            row_activate_latency=factors.get("row_activate_latency", 0.0) * t,
            row_activate_energy=factors.get("row_activate_energy", 0.0) * energy_unit,
            gate_issue_latency=factors.get("gate_issue_latency", 0.0) * t,
            gate_issue_energy=factors.get("gate_issue_energy", 0.0) * energy_unit,
            read_latency=factors.get("read_latency", 0.0) * t,
            read_energy=factors.get("read_energy", 0.0) * energy_unit,
            write_latency=factors.get("write_latency", 0.0) * t,
            write_energy=factors.get("write_energy", 0.0) * energy_unit,
            enabled=True,
        )


@dataclass(frozen=True)
class TileConfig:
    rows: int
    cols: int
    cell_variant: CellVariant
    mtj: MtjSpec
    peripheral: PeripheralModel

    def __post_init__(self) -> None:
        if self.rows <= 0 or self.cols <= 0:
            raise ValueError("tile dimensions must be positive")

    @property
    def capacity_bytes(self) -> int:
        return self.rows * self.cols // 8

    @property
    def logical_rows(self) -> int:
        if self.cell_variant is CellVariant.ONE_T_TRANSPOSED:
            return self.cols
        return self.rows

    @property
    def logical_cols(self) -> int:
        if self.cell_variant is CellVariant.ONE_T_TRANSPOSED:
            return self.rows
        return self.cols


@dataclass
class TileState:
    """Bit contents plus activation latches of one tile.

    ``bits`` is indexed physically as ``bits[physical_row, physical_col]``.
    """

    config: TileConfig
    bits: np.ndarray
    active_lines: frozenset[int] = frozenset()

    @classmethod
    def blank(cls, config: TileConfig) -> "TileState":
        return cls(config=config, bits=np.zeros((config.rows, config.cols), dtype=np.uint8))

    def to_physical(self, row: int, col: int) -> tuple[int, int]:
        if self.config.cell_variant is CellVariant.ONE_T_TRANSPOSED:
            return col, row
        return row, col

    def _check(self, row: int, col: int) -> None:
        if not (0 <= row < self.config.logical_rows and 0 <= col < self.config.logical_cols):
            raise OutOfBounds(f"logical cell ({row}, {col}) outside tile")

    def get_cell(self, row: int, col: int) -> int:
        self._check(row, col)
        pr, pc = self.to_physical(row, col)
        return int(self.bits[pr, pc])

    def set_cell(self, row: int, col: int, bit: int) -> None:
        self._check(row, col)
        pr, pc = self.to_physical(row, col)
        self.bits[pr, pc] = 1 if bit else 0

    def activate_lines(self, lines: frozenset[int]) -> int:
        """Latch a new computation word-line set; return lines charged."""
        if lines == self.active_lines:
            return 0
        self.active_lines = lines
        return len(lines)

    def clear_activations(self) -> None:
        self.active_lines = frozenset()


@dataclass(frozen=True)
class MicroOp:
    """One primitive array operation.

    - GATE_EVAL: ``operands`` = input cells followed by the output cell.
    - WRITE: ``operands`` = target cells (one physical row), ``data`` bits.
    - READ: ``operands`` = cells to sense (one physical row).
    - INTER_TILE_TRANSFER: first half of ``operands`` are source cells, the
      second half destination cells (each half within one physical row).
    - ROW_ACTIVATE: ``operands`` name (tile, physical row, 0) lines to latch.

    ``rows_active`` records lockstep multiplicity for batched issues; the
    scalar executor treats each op as a single instance.
    """

    kind: OpKind
    gate: Gate | None = None
    operands: tuple[Cell, ...] = ()
    data: tuple[int, ...] | None = None
    rows_active: int = 1
    note: str = ""


@dataclass
class ExecutionLog:
    gate_evals: int = 0
    read_accesses: int = 0
    write_accesses: int = 0
    transfers: int = 0
    row_activations: int = 0
    reads: list[tuple[Cell, int]] = field(default_factory=list)


def read_row(state: TileState, physical_row: int) -> np.ndarray:
    """Sense one full physical row (one access)."""
    if not 0 <= physical_row < state.config.rows:
        raise OutOfBounds(f"physical row {physical_row} outside tile")
    return state.bits[physical_row].copy()


def write_row(
    state: TileState, physical_row: int, cols: Sequence[int], bits: Sequence[int]
) -> None:
    """Drive one physical row (one access), masked to ``cols``."""
    if not 0 <= physical_row < state.config.rows:
        raise OutOfBounds(f"physical row {physical_row} outside tile")
    if len(cols) != len(bits):
        raise ValueError("cols and bits must pair up")
    for c, b in zip(cols, bits):
        if not 0 <= c < state.config.cols:
            raise OutOfBounds(f"physical col {c} outside tile")
        state.bits[physical_row, c] = 1 if b else 0


def transfer(
    tiles: Mapping[int, TileState], src: Sequence[Cell], dst: Sequence[Cell]
) -> None:
    """Copy bits between tiles (read one row, drive another)."""
    op = MicroOp(kind=OpKind.INTER_TILE_TRANSFER, operands=tuple(src) + tuple(dst))
    execute(tiles, [op])


@functools.lru_cache(maxsize=None)
def _require_feasible(spec: MtjSpec, gate: Gate) -> None:
    voltage_window(spec, gate, require_feasible=True)


def _single_physical_row(state: TileState, cells: Sequence[Cell], what: str) -> int:
    tiles = {c[0] for c in cells}
    if len(tiles) != 1:
        raise PlacementViolation(f"{what} must touch exactly one tile, got {sorted(tiles)}")
    rows = set()
    for _, r, c in cells:
        state._check(r, c)
        rows.add(state.to_physical(r, c)[0])
    if len(rows) != 1:
        raise PlacementViolation(f"{what} must stay within one physical row, got {sorted(rows)}")
    return rows.pop()


def _exec_gate(tiles: Mapping[int, TileState], op: MicroOp, log: ExecutionLog) -> None:
    if op.gate is None or len(op.operands) != op.gate.fan_in + 1:
        raise PlacementViolation("gate eval needs a gate and fan_in inputs plus one output")
    *inputs, output = op.operands
    tile_ids = {c[0] for c in op.operands}
    if len(tile_ids) != 1:
        raise PlacementViolation("gate operands must share a tile")
    state = tiles[tile_ids.pop()]
    rows = {c[1] for c in op.operands}
    if len(rows) != 1:
        raise PlacementViolation("gate operands must share a logical row")
    if len(set(op.operands)) != len(op.operands) or output in inputs:
        raise PlacementViolation("gate operand cells must be distinct")
    for _, r, c in op.operands:
        state._check(r, c)
    if state.config.cell_variant is CellVariant.ONE_T_TRANSPOSED:
        in_parity = {c[2] % 2 for c in inputs}
        if len(in_parity) != 1:
            raise PlacementViolation("1T gate inputs must share bitline parity")
        if output[2] % 2 == in_parity.pop():
            raise PlacementViolation("1T gate output must sit on the opposite bitline parity")
    _require_feasible(state.config.mtj, op.gate)

    # Word lines charged for this gate: operand columns on 1T (the array is
    # transposed), the logical row itself on 3T.
    if state.config.cell_variant is CellVariant.ONE_T_TRANSPOSED:
        lines = frozenset(c[2] for c in op.operands)
    else:
        lines = frozenset(rows)
    log.row_activations += state.activate_lines(lines)

    combo = 0
    for i, (_, r, c) in enumerate(inputs):
        combo |= state.get_cell(r, c) << i
    table = truth_table(op.gate.kind, op.gate.fan_in)
    state.set_cell(output[1], output[2], table[combo])
    log.gate_evals += 1


def execute(tiles: Mapping[int, TileState], ops: Iterable[MicroOp]) -> ExecutionLog:
    """Run micro-ops in order against tile states; return the access log."""
    log = ExecutionLog()
    for op in ops:
        if op.kind is OpKind.GATE_EVAL:
            _exec_gate(tiles, op, log)
        elif op.kind is OpKind.WRITE:
            if op.data is None or len(op.data) != len(op.operands):
                raise ValueError("write needs one data bit per operand cell")
            state = tiles[op.operands[0][0]]
            _single_physical_row(state, op.operands, "write")
            for (_, r, c), b in zip(op.operands, op.data):
                state.set_cell(r, c, b)
            log.write_accesses += 1
        elif op.kind is OpKind.READ:
            state = tiles[op.operands[0][0]]
            _single_physical_row(state, op.operands, "read")
            for cell in op.operands:
                log.reads.append((cell, state.get_cell(cell[1], cell[2])))
            log.read_accesses += 1
        elif op.kind is OpKind.INTER_TILE_TRANSFER:
            if len(op.operands) % 2 != 0:
                raise PlacementViolation("transfer needs matching source/destination cells")
            half = len(op.operands) // 2
            src, dst = op.operands[:half], op.operands[half:]
            src_state = tiles[src[0][0]]
            dst_state = tiles[dst[0][0]]
            _single_physical_row(src_state, src, "transfer source")
            _single_physical_row(dst_state, dst, "transfer destination")
            bits = [src_state.get_cell(r, c) for _, r, c in src]
            for (_, r, c), b in zip(dst, bits):
                dst_state.set_cell(r, c, b)
            log.transfers += 1
        elif op.kind is OpKind.ROW_ACTIVATE:
            state = tiles[op.operands[0][0]]
            lines = frozenset(r for _, r, _ in op.operands)
            log.row_activations += state.activate_lines(lines)
        else:  # pragma: no cover - enum is exhaustive
            raise ValueError(f"unknown op kind {op.kind}")
    return log
