"""Row-local logic kernels for binarized-neural-network primitives.

Kernels build micro-op traces against a single logical row: cells are named
by column only (bound to concrete tiles/rows by the layout compiler).  Every
gate evaluation is preceded by the write that preselects its output cell;
``KernelTrace.steps`` counts gate evaluations only, which is the contractual
cost figure.

Two gate sets are supported:

- ``RESTRICTED``: NAND (fan-in 2..5), NOT, COPY.  XNOR costs 5 steps and a
  full add 9 steps per bit (the classic nine-NAND adder).
- ``EXTENDED``: adds NOR and the inverted-majority gates.  XNOR costs 4
  NOR steps; a full add costs exactly 5 steps and at most 4 temporaries per
  bit (carry included):

      q  = IMAJ3(a, b, cin)          (inverted carry)
      cy = NOT(q)                    (carry out)
      q2 = COPY(q)                   (second electrical copy)
      s' = IMAJ5(a, b, cin, q, q2)   (inverted sum)
      s  = NOT(s')

The threshold compare (x >= t) ripples the borrow of x - t with one NOT and
four NANDs (one of fan-in 3) per bit, 5n+1 steps total.  Multi-bit integers
are little-endian column lists throughout.

A shared constant-zero cell (``zero_col``) provides carry-ins, operand
padding, and placement-based doubling; it is written once at setup time and
never by kernels.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from .array_core import Cell, MicroOp, OpKind
from .gate_engine import Gate, GateKind

__all__ = [
    "GateSet",
    "ColumnAllocator",
    "TraceBuilder",
    "KernelTrace",
    "xnor",
    "add",
    "threshold",
    "popcount",
    "affine_popcount",
    "shift_batch_norm",
    "pool_or",
    "multiply_bitserial",
]


class GateSet(Enum):
    RESTRICTED = "nand-not-copy"
    EXTENDED = "with-nor"


_RESTRICTED_KINDS = {GateKind.NAND, GateKind.NOT, GateKind.COPY}


class ColumnAllocator:
    """Deterministic scratch-column allocator with recycling.

    Freed columns are reused lowest-first.  ``peak_live`` tracks the largest
    number of simultaneously outstanding allocator-granted columns, which is
    what layout uses to budget a row's scratch region.
    """

    def __init__(self, start: int, zero_col: int | None = None) -> None:
        self._next = start
        self._zero_col = zero_col
        self._free: list[int] = []
        self._outstanding: set[int] = set()
        self.peak_live = 0

    def alloc(self) -> int:
        if self._free:
            col = heapq.heappop(self._free)
        else:
            col = self._next
            self._next += 1
        self._outstanding.add(col)
        self.peak_live = max(self.peak_live, len(self._outstanding))
        return col

    def free(self, col: int) -> None:
        if col == self._zero_col:
            return
        self._outstanding.discard(col)
        heapq.heappush(self._free, col)

    @property
    def high_water_col(self) -> int:
        """One past the highest column ever granted."""
        return self._next


@dataclass(frozen=True)
class KernelTrace:
    """Micro-ops of one kernel plus its contractual accounting."""

    ops: tuple[MicroOp, ...]
    gate_set: GateSet
    temps: int
    out_cols: tuple[int, ...] = ()
    bias: int = 0

    @property
    def steps(self) -> int:
        return sum(1 for op in self.ops if op.kind is OpKind.GATE_EVAL)

    @property
    def write_count(self) -> int:
        return sum(1 for op in self.ops if op.kind is OpKind.WRITE)


class TraceBuilder:
    """Accumulates row-local micro-ops for a sequence of kernels."""

    def __init__(
        self,
        gate_set: GateSet,
        temp_base: int,
        zero_col: int,
        copy_via_not: bool = False,
    ) -> None:
        self.gate_set = gate_set
        self.zero_col = zero_col
        self.copy_via_not = copy_via_not
        self.alloc = ColumnAllocator(temp_base, zero_col=zero_col)
        self._ops: list[MicroOp] = []
        self._temp_log: list[int] = []

    # -- op emission -------------------------------------------------------

    def _cell(self, col: int) -> Cell:
        return (0, 0, col)

    def gate(self, kind: GateKind, ins: Sequence[int], out: int) -> None:
        g = Gate(kind, len(ins))
        if self.gate_set is GateSet.RESTRICTED and kind not in _RESTRICTED_KINDS:
            raise ValueError(f"{kind.value} not available in the restricted gate set")
        self._ops.append(
            MicroOp(
                kind=OpKind.WRITE,
                operands=(self._cell(out),),
                data=(g.preset_bit,),
                note="preset",
            )
        )
        self._ops.append(
            MicroOp(
                kind=OpKind.GATE_EVAL,
                gate=g,
                operands=tuple(self._cell(c) for c in ins) + (self._cell(out),),
            )
        )

    def write(self, col: int, bit: int, note: str = "") -> None:
        self._ops.append(
            MicroOp(kind=OpKind.WRITE, operands=(self._cell(col),), data=(bit,), note=note)
        )

    def copy(self, src: int, out: int) -> None:
        if self.copy_via_not:
            t = self.temp()
            self.gate(GateKind.NOT, [src], t)
            self.gate(GateKind.NOT, [t], out)
            self.free(t)
        else:
            self.gate(GateKind.COPY, [src], out)

    # -- scratch management --------------------------------------------------

    def temp(self) -> int:
        col = self.alloc.alloc()
        self._temp_log.append(col)
        return col

    def result_col(self) -> int:
        """A fresh column owned by the caller (not counted as kernel scratch)."""
        return self.alloc.alloc()

    def free(self, col: int) -> None:
        self.alloc.free(col)

    def free_all(self, cols: Sequence[int]) -> None:
        for c in cols:
            self.alloc.free(c)

    # -- kernel bracketing ---------------------------------------------------

    def _begin(self) -> tuple[int, int]:
        return len(self._ops), len(self._temp_log)

    def _finish(
        self, marker: tuple[int, int], out_cols: Sequence[int] = (), bias: int = 0
    ) -> KernelTrace:
        op_start, temp_start = marker
        return KernelTrace(
            ops=tuple(self._ops[op_start:]),
            gate_set=self.gate_set,
            temps=len(set(self._temp_log[temp_start:])),
            out_cols=tuple(out_cols),
            bias=bias,
        )

    @property
    def ops(self) -> tuple[MicroOp, ...]:
        return tuple(self._ops)


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------

def xnor(tb: TraceBuilder, a: int, b: int, out: int) -> KernelTrace:
    """out := (a == b).  5 steps restricted, 4 inverting-gate steps extended."""
    marker = tb._begin()
    if tb.gate_set is GateSet.EXTENDED:
        t1 = tb.temp()
        t2 = tb.temp()
        t3 = tb.temp()
        tb.gate(GateKind.NOR, [a, b], t1)
        tb.gate(GateKind.NOR, [a, t1], t2)
        tb.gate(GateKind.NOR, [b, t1], t3)
        tb.gate(GateKind.NOR, [t2, t3], out)
        tb.free_all([t1, t2, t3])
    else:
        na = tb.temp()
        nb = tb.temp()
        t_or = tb.temp()
        t_nand = tb.temp()
        tb.gate(GateKind.NOT, [a], na)
        tb.gate(GateKind.NOT, [b], nb)
        tb.gate(GateKind.NAND, [na, nb], t_or)
        tb.gate(GateKind.NAND, [a, b], t_nand)
        tb.gate(GateKind.NAND, [t_or, t_nand], out)
        tb.free_all([na, nb, t_or, t_nand])
    return tb._finish(marker, out_cols=(out,))


def _full_add_extended(tb: TraceBuilder, a: int, b: int, cin: int, s: int) -> int:
    """One extended-set full adder; returns the carry-out column."""
    q = tb.temp()
    cy = tb.temp()
    q2 = tb.temp()
    sp = tb.temp()
    tb.gate(GateKind.IMAJ3, [a, b, cin], q)
    tb.gate(GateKind.NOT, [q], cy)
    tb.copy(q, q2)
    tb.gate(GateKind.IMAJ5, [a, b, cin, q, q2], sp)
    tb.gate(GateKind.NOT, [sp], s)
    tb.free_all([q, q2, sp])
    return cy


def _full_add_restricted(tb: TraceBuilder, a: int, b: int, cin: int, s: int) -> int:
    """One nine-NAND full adder; returns the carry-out column."""
    t1 = tb.temp()
    t2 = tb.temp()
    t3 = tb.temp()
    x = tb.temp()
    t5 = tb.temp()
    t6 = tb.temp()
    t7 = tb.temp()
    cout = tb.temp()
    tb.gate(GateKind.NAND, [a, b], t1)
    tb.gate(GateKind.NAND, [a, t1], t2)
    tb.gate(GateKind.NAND, [b, t1], t3)
    tb.gate(GateKind.NAND, [t2, t3], x)
    tb.gate(GateKind.NAND, [x, cin], t5)
    tb.gate(GateKind.NAND, [x, t5], t6)
    tb.gate(GateKind.NAND, [cin, t5], t7)
    tb.gate(GateKind.NAND, [t6, t7], s)
    tb.gate(GateKind.NAND, [t1, t5], cout)
    tb.free_all([t1, t2, t3, x, t5, t6, t7])
    return cout


def add(
    tb: TraceBuilder,
    x_cols: Sequence[int],
    y_cols: Sequence[int],
    carry_in: int | None = None,
) -> KernelTrace:
    """Ripple add of two little-endian values; result is one column wider.

    Unequal operand widths are allowed: the shorter operand is padded with
    views of the shared constant-zero cell (no extra cost).  The carry-in of
    the first stage is the constant-zero cell unless supplied, making the
    first stage a half add by construction.
    """
    marker = tb._begin()
    n = max(len(x_cols), len(y_cols))
    if n == 0:
        raise ValueError("add needs at least one operand bit")
    xs = list(x_cols) + [tb.zero_col] * (n - len(x_cols))
    ys = list(y_cols) + [tb.zero_col] * (n - len(y_cols))
    carry = tb.zero_col if carry_in is None else carry_in
    out: list[int] = []
    for i in range(n):
        s = tb.result_col()
        if tb.gate_set is GateSet.EXTENDED:
            new_carry = _full_add_extended(tb, xs[i], ys[i], carry, s)
        else:
            new_carry = _full_add_restricted(tb, xs[i], ys[i], carry, s)
        if i > 0:
            tb.free(carry)
        carry = new_carry
        out.append(s)
    out.append(carry)  # the final carry column is the result's top bit
    return tb._finish(marker, out_cols=out)


def threshold(
    tb: TraceBuilder, x_cols: Sequence[int], t_cols: Sequence[int], out: int
) -> KernelTrace:
    """out := (x >= t), via the inverted final borrow of x - t.

    Per bit: b_out = maj(NOT x_i, t_i, b_in), computed as one NOT, three
    2-input NANDs and one 3-input NAND -- 5n+1 steps including the final
    inversion, with the first borrow-in tied to the constant-zero cell.
    """
    marker = tb._begin()
    n = max(len(x_cols), len(t_cols))
    if n == 0:
        raise ValueError("threshold needs at least one bit")
    xs = list(x_cols) + [tb.zero_col] * (n - len(x_cols))
    ts = list(t_cols) + [tb.zero_col] * (n - len(t_cols))
    borrow = tb.zero_col
    for i in range(n):
        xp = tb.temp()
        t1 = tb.temp()
        t2 = tb.temp()
        t3 = tb.temp()
        b_next = tb.temp()
        tb.gate(GateKind.NOT, [xs[i]], xp)
        tb.gate(GateKind.NAND, [xp, borrow], t1)
        tb.gate(GateKind.NAND, [xp, ts[i]], t2)
        tb.gate(GateKind.NAND, [ts[i], borrow], t3)
        tb.gate(GateKind.NAND, [t1, t2, t3], b_next)
        tb.free_all([xp, t1, t2, t3])
        if i > 0:
            tb.free(borrow)
        borrow = b_next
    tb.gate(GateKind.NOT, [borrow], out)
    tb.free(borrow)
    return tb._finish(marker, out_cols=(out,))


def popcount(
    tb: TraceBuilder, bit_cols: Sequence[int], consume: bool = False
) -> KernelTrace:
    """Count set bits with a balanced adder tree.

    Operands pair up level by level in order; a leftover odd operand defers
    to the next level unchanged (zero-padding against a wider partner costs
    nothing).  The returned view is trimmed to ceil(log2(n+1)) columns.
    With ``consume=True`` the input bit cells are recycled as scratch once
    their first-level add has read them.
    """
    marker = tb._begin()
    if not bit_cols:
        raise ValueError("popcount needs at least one bit")
    values: list[list[int]] = [[c] for c in bit_cols]
    owned = [consume] * len(values)
    while len(values) > 1:
        next_values: list[list[int]] = []
        next_owned: list[bool] = []
        for i in range(0, len(values) - 1, 2):
            a, b = values[i], values[i + 1]
            trace = add(tb, a, b)
            if owned[i]:
                tb.free_all(a)
            if owned[i + 1]:
                tb.free_all(b)
            next_values.append(list(trace.out_cols))
            next_owned.append(True)
        if len(values) % 2:
            next_values.append(values[-1])
            next_owned.append(owned[-1])
        values = next_values
        owned = next_owned
    width = max(1, math.ceil(math.log2(len(bit_cols) + 1)))
    final = values[0]
    for extra in final[width:]:
        tb.free(extra)
    return tb._finish(marker, out_cols=final[:width])


def affine_popcount(
    tb: TraceBuilder, bit_cols: Sequence[int], consume: bool = False
) -> KernelTrace:
    """Popcount re-expressed as the signed sum of +/-1 inputs: 2*pc - n.

    Costs nothing beyond the popcount itself: the doubling is placement
    (the view gains the constant-zero cell as its least-significant column)
    and the -n offset is reported as ``bias`` for folding into a downstream
    threshold.
    """
    marker = tb._begin()
    pc = popcount(tb, bit_cols, consume=consume)
    view = (tb.zero_col,) + pc.out_cols
    return tb._finish(marker, out_cols=view, bias=-len(bit_cols))


def shift_batch_norm(tb: TraceBuilder, value_cols: Sequence[int], shift: int) -> KernelTrace:
    """Multiply/divide by a power of two through placement.

    A left shift materializes ``shift`` fresh zero cells below the value
    (zero writes only, no gate evaluations); a right shift is a pure view.
    """
    marker = tb._begin()
    if shift > 0:
        zeros = []
        for _ in range(shift):
            z = tb.result_col()
            tb.write(z, 0, note="zero")
            zeros.append(z)
        view = zeros + list(value_cols)
    elif shift < 0:
        view = list(value_cols[-shift:])
        if not view:
            view = [tb.zero_col]
    else:
        view = list(value_cols)
    return tb._finish(marker, out_cols=view)


def _or2(tb: TraceBuilder, a: int, b: int, out: int) -> None:
    if tb.gate_set is GateSet.EXTENDED:
        t = tb.temp()
        tb.gate(GateKind.NOR, [a, b], t)
        tb.gate(GateKind.NOT, [t], out)
        tb.free(t)
    else:
        na = tb.temp()
        nb = tb.temp()
        tb.gate(GateKind.NOT, [a], na)
        tb.gate(GateKind.NOT, [b], nb)
        tb.gate(GateKind.NAND, [na, nb], out)
        tb.free_all([na, nb])


def pool_or(tb: TraceBuilder, in_cols: Sequence[int], out: int) -> KernelTrace:
    """out := OR(inputs) -- max pooling over sign-encoded activations."""
    marker = tb._begin()
    if not in_cols:
        raise ValueError("pool needs at least one input")
    values = list(in_cols)
    if len(values) == 1:
        tb.copy(values[0], out)
        return tb._finish(marker, out_cols=(out,))
    while len(values) > 2:
        next_values = []
        for i in range(0, len(values) - 1, 2):
            t = tb.temp()
            _or2(tb, values[i], values[i + 1], t)
            next_values.append(t)
        if len(values) % 2:
            next_values.append(values[-1])
        for v in values:
            if v not in next_values and v not in in_cols:
                tb.free(v)
        values = next_values
    _or2(tb, values[0], values[1], out)
    for v in values:
        if v not in in_cols:
            tb.free(v)
    return tb._finish(marker, out_cols=(out,))


def multiply_bitserial(
    tb: TraceBuilder, a_cols: Sequence[int], b_cols: Sequence[int]
) -> KernelTrace:
    """Unsigned product of two little-endian values, one b-bit at a time.

    The accumulator starts as zero-written cells; each round ANDs the full
    multiplicand with one multiplier bit and ripple-adds the partial product
    at its offset.  The result view is ``len(a)+len(b)`` columns.
    """
    marker = tb._begin()
    na, nb = len(a_cols), len(b_cols)
    if na == 0 or nb == 0:
        raise ValueError("multiply needs non-empty operands")
    total = na + nb
    acc: list[int] = []
    for _ in range(total):
        c = tb.result_col()
        tb.write(c, 0, note="zero")
        acc.append(c)
    for j in range(nb):
        partial: list[int] = []
        for i in range(na):
            t = tb.temp()
            p = tb.temp()
            tb.gate(GateKind.NAND, [a_cols[i], b_cols[j]], t)
            tb.gate(GateKind.NOT, [t], p)
            tb.free(t)
            partial.append(p)
        window = acc[j : j + na + 1]
        trace = add(tb, window, partial)
        tb.free_all(partial)
        tb.free_all(window)
        result = list(trace.out_cols)
        keep = min(len(result), total - j)
        for extra in result[keep:]:
            tb.free(extra)
        for stale in acc[j + len(window) : j + keep]:
            tb.free(stale)
        acc[j : j + keep] = result[:keep]
    return tb._finish(marker, out_cols=acc)
