"""Maps network layers onto tiles and builds per-row compute templates.

Every output unit of a layer (a neuron, or one filter at one position) is a
*group*: ``g`` adjacent rows that each hold an equal share of the unit's
input/weight pairs.  All rows compute in lockstep from a single op template,
so a layer's latency is independent of how many groups exist.

A template is a sequence of :class:`RowOp` entries, each tagged with a row
mask name:

- every row XNORs its pairs in place and popcounts them (multi-bit inputs
  accumulate per-plane counts at their binary weight),
- groups taller than one row merge partial counts pairwise: receive scratch
  is zero-filled, senders' partials move down by masked row writes, and the
  surviving rows add (idle rows add zero, keeping the template uniform),
- the group leader compares the count against the unit's threshold constant,
  or exposes the raw count columns for non-binarized layers,
- pooled layers OR the member bits on the window-leader row.

The transposed 1T variant can only evaluate a gate whose inputs share
logical-column parity and whose output has the opposite parity.  Rather than
peppering the template with copies, :func:`legalize_for_parity` *rebinds*
gate outputs to parity-correct scratch columns (recycling input-copy cells
the moment they are overwritten) and falls back to an explicit copy only
when a value must land in a fixed column of the wrong parity.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .array_core import MicroOp, OpKind, TileConfig
from .bnn_kernels import (
    GateSet,
    TraceBuilder,
    add,
    multiply_bitserial,
    pool_or,
    popcount,
    threshold,
    xnor,
)
from .gate_engine import Gate, GateKind

__all__ = [
    "DoesNotFit",
    "FcLayer",
    "ConvLayer",
    "LayerSpec",
    "RowOp",
    "RowOpKind",
    "RowProgram",
    "LayoutPlan",
    "CommPlan",
    "conv_output_shape",
    "layout_layer",
    "plan_communication",
    "memory_usage",
    "legalize_for_parity",
]


class DoesNotFit(Exception):
    """The layer cannot be laid out under the requested constraints."""


def conv_output_shape(
    in_x: int, in_y: int, kx: int, ky: int, stride: int, pad_x: int, pad_y: int
) -> tuple[int, int]:
    out_x = (in_x + 2 * pad_x - kx) // stride + 1
    out_y = (in_y + 2 * pad_y - ky) // stride + 1
    return out_x, out_y


@dataclass(frozen=True)
class FcLayer:
    """A fully connected layer: ``n_out`` units over ``n_in`` inputs."""

    name: str
    n_in: int
    n_out: int
    input_bits: int = 1
    binarize: bool = True
    out_bits: int = 0  # 0 = natural count width when binarize is False
    scale_bits: int = 0  # per-unit integer scale applied to the count

    def __post_init__(self) -> None:
        if self.n_in < 1 or self.n_out < 1:
            raise ValueError("layer dimensions must be positive")
        if self.input_bits < 1:
            raise ValueError("input_bits must be >= 1")
        if self.scale_bits and not self.binarize:
            raise ValueError("count scaling folds into a threshold compare")

    @property
    def fan_in(self) -> int:
        return self.n_in

    @property
    def groups(self) -> int:
        return self.n_out

    @property
    def pool_window(self) -> int:
        return 1

    def tap_sources(self, group_indices: np.ndarray) -> np.ndarray:
        """Input index feeding each tap slot; identical for every unit."""
        base = np.arange(self.n_in, dtype=np.int64)
        return np.broadcast_to(base, (len(group_indices), self.n_in)).copy()


@dataclass(frozen=True)
class ConvLayer:
    """A convolution layer, one group per (filter, output position).

    Tap slots enumerate the window as (fy, fx, fz) with fz fastest; input
    vectors are flattened (y, x, z) with z fastest.  Off-grid taps report
    source ``-1``: their input copies load as zero while the weight stays
    real, so a padded tap contributes exactly what the reference computes
    for a zero input bit.
    """

    name: str
    in_x: int
    in_y: int
    in_z: int
    filters: int
    kx: int
    ky: int
    stride: int = 1
    pad_x: int = 0
    pad_y: int = 0
    pool_kx: int = 1
    pool_ky: int = 1
    pool_stride: int = 1
    input_bits: int = 1
    binarize: bool = True
    out_bits: int = 0
    scale_bits: int = 0

    def __post_init__(self) -> None:
        if min(self.in_x, self.in_y, self.in_z, self.filters, self.kx, self.ky) < 1:
            raise ValueError("conv dimensions must be positive")
        if self.out_x < 1 or self.out_y < 1:
            raise ValueError("empty output plane")
        if self.pool_window > 1 and not self.binarize:
            raise ValueError("pooling requires binarized outputs")
        if self.scale_bits and not self.binarize:
            raise ValueError("count scaling folds into a threshold compare")

    @property
    def out_x(self) -> int:
        return conv_output_shape(
            self.in_x, self.in_y, self.kx, self.ky, self.stride, self.pad_x, self.pad_y
        )[0]

    @property
    def out_y(self) -> int:
        return conv_output_shape(
            self.in_x, self.in_y, self.kx, self.ky, self.stride, self.pad_x, self.pad_y
        )[1]

    @property
    def taps(self) -> int:
        return self.kx * self.ky * self.in_z

    @property
    def fan_in(self) -> int:
        return self.taps

    @property
    def groups(self) -> int:
        return self.filters * self.out_x * self.out_y

    @property
    def pool_window(self) -> int:
        return self.pool_kx * self.pool_ky

    @property
    def pool_out_x(self) -> int:
        return (self.out_x - self.pool_kx) // self.pool_stride + 1

    @property
    def pool_out_y(self) -> int:
        return (self.out_y - self.pool_ky) // self.pool_stride + 1

    def tap_sources(self, group_indices: np.ndarray) -> np.ndarray:
        """Flat input index (or -1 for padding) per tap slot of each group."""
        groups = np.asarray(group_indices, dtype=np.int64).reshape(-1, 1)
        plane = self.out_x * self.out_y
        rem = groups % plane
        oy = rem // self.out_x
        ox = rem % self.out_x
        fy, fx, fz = np.meshgrid(
            np.arange(self.ky), np.arange(self.kx), np.arange(self.in_z), indexing="ij"
        )
        fy = fy.reshape(1, -1)
        fx = fx.reshape(1, -1)
        fz = fz.reshape(1, -1)
        ix = ox * self.stride + fx - self.pad_x
        iy = oy * self.stride + fy - self.pad_y
        src = (iy * self.in_x + ix) * self.in_z + fz
        oob = (ix < 0) | (ix >= self.in_x) | (iy < 0) | (iy >= self.in_y)
        return np.where(oob, np.int64(-1), src)


LayerSpec = Union[FcLayer, ConvLayer]


# --------------------------------------------------------------------------
# row-op templates
# --------------------------------------------------------------------------

class RowOpKind(Enum):
    GATE = "gate"
    WRITE = "write"
    MOVE = "move"


@dataclass(frozen=True)
class RowOp:
    """One template step, applied to every row selected by its mask.

    GATE: ``cols`` is inputs + output.  WRITE: ``cols`` is the target and
    ``bit`` the constant.  MOVE: ``cols`` is (src, dst) and the source row
    sits ``row_delta`` rows below the masked destination row.
    """

    kind: RowOpKind
    mask: str
    cols: tuple[int, ...]
    gate: Gate | None = None
    bit: int = 0
    row_delta: int = 0
    note: str = ""


@dataclass(frozen=True)
class RowProgram:
    """The per-wave compute template plus the once-per-pass pool section."""

    wave_ops: tuple[RowOp, ...]
    post_ops: tuple[RowOp, ...]
    out_cols: tuple[int, ...]
    merge_levels: int
    high_water_col: int

    @property
    def gate_issues(self) -> int:
        return sum(
            1 for op in self.wave_ops + self.post_ops if op.kind is RowOpKind.GATE
        )


class _TemplateCollector:
    """Converts builder micro-ops into mask-tagged row ops phase by phase."""

    def __init__(self, tb: TraceBuilder) -> None:
        self.tb = tb
        self.target: list[RowOp] = []
        self._mark = 0

    def flush(self, mask: str) -> None:
        for op in self.tb.ops[self._mark :]:
            if op.kind is OpKind.GATE_EVAL:
                self.target.append(
                    RowOp(
                        kind=RowOpKind.GATE,
                        mask=mask,
                        cols=tuple(c[2] for c in op.operands),
                        gate=op.gate,
                    )
                )
            elif op.kind is OpKind.WRITE:
                self.target.append(
                    RowOp(
                        kind=RowOpKind.WRITE,
                        mask=mask,
                        cols=(op.operands[0][2],),
                        bit=op.data[0],
                        note=op.note,
                    )
                )
            else:  # pragma: no cover - kernels emit only writes and gates
                raise ValueError(f"unexpected op in row template: {op.kind}")
        self._mark = len(self.tb.ops)

    def move(self, mask: str, src_col: int, dst_col: int, row_delta: int) -> None:
        self.flush(mask)  # keep ordering if kernel ops are pending
        self.target.append(
            RowOp(
                kind=RowOpKind.MOVE,
                mask=mask,
                cols=(src_col, dst_col),
                row_delta=row_delta,
            )
        )


# --------------------------------------------------------------------------
# parity legalization for the transposed 1T variant
# --------------------------------------------------------------------------

class _ParityPool:
    """Per-parity scratch-column allocator that can adopt dead columns."""

    def __init__(self, base: int, skip: set[int]) -> None:
        self._skip = skip
        self._next = {0: base + (base % 2), 1: base + 1 - (base % 2)}
        self._free: dict[int, list[int]] = {0: [], 1: []}
        self.owned: set[int] = set()
        self.high_water = base

    def alloc(self, parity: int) -> int:
        free = self._free[parity]
        if free:
            col = heapq.heappop(free)
        else:
            # Adopted columns may sit ahead of the bump pointer; skip anything
            # already owned or it would be handed out a second time.
            col = self._next[parity]
            while col in self._skip or col in self.owned:
                col += 2
            self._next[parity] = col + 2
        self.owned.add(col)
        self.high_water = max(self.high_water, col + 1)
        return col

    def free(self, col: int) -> None:
        if col in self.owned:
            heapq.heappush(self._free[col % 2], col)

    def adopt(self, col: int) -> None:
        """Recycle a column whose previous value can no longer be read."""
        if col not in self.owned:
            self.owned.add(col)
            heapq.heappush(self._free[col % 2], col)

    def richer_parity(self) -> int:
        """The parity with more recycled columns on hand."""
        return 0 if len(self._free[0]) >= len(self._free[1]) else 1


class _ParityRewriter:
    """Rewrites a gate stream so every gate obeys the 1T parity rule.

    Gate outputs landing in rebindable columns are simply relocated to a
    column of the required parity; the old physical cell is recycled.  Only
    fixed destinations (externally read or written columns) may force an
    extra copy, and mixed-parity inputs borrow one transient copy each.
    """

    def __init__(self, fixed_cols: Iterable[int], scratch_base: int, identity_cols: Iterable[int]) -> None:
        self.fixed = set(fixed_cols)
        identity = set(identity_cols) | self.fixed
        self.pool = _ParityPool(scratch_base, skip=identity)
        self._identity = identity
        self.map: dict[int, int] = {}

    def lookup(self, col: int) -> int:
        return self.map.get(col, col)

    def rewrite_write_target(self, col: int) -> int:
        return self.lookup(col)

    def rewrite_gate(
        self, gate: Gate, in_cols: Sequence[int], out_col: int
    ) -> list[tuple]:
        steps: list[tuple] = []
        ins = [self.lookup(c) for c in in_cols]
        parities = [c % 2 for c in ins]
        ones = sum(parities)
        if 2 * ones > len(parities):
            p = 1
        elif 2 * ones < len(parities):
            p = 0
        else:
            # Tie: either side costs the same copies, so steer the (long
            # lived) output toward the parity with more recycled columns.
            p = 1 - self.pool.richer_parity()
        borrowed: list[int] = []
        placed: list[int] = []
        for c, q in zip(ins, parities):
            if q != p:
                s = self.pool.alloc(p)
                steps.append(("write", s, 1))
                steps.append(("gate", Gate(GateKind.COPY), (c,), s))
                borrowed.append(s)
                placed.append(s)
            else:
                placed.append(c)
        out_parity = 1 - p
        bounce: int | None = None
        if out_col in self.fixed:
            if out_col % 2 == out_parity:
                actual = out_col
            else:
                bounce = self.pool.alloc(out_parity)
                actual = bounce
        else:
            old = self.map.get(out_col)
            actual = self.pool.alloc(out_parity)
            self.map[out_col] = actual
            if old is not None:
                self.pool.free(old)
            elif out_col not in self._identity:
                self.pool.adopt(out_col)
        steps.append(("write", actual, gate.preset_bit))
        steps.append(("gate", gate, tuple(placed), actual))
        if bounce is not None:
            steps.append(("write", out_col, 1))
            steps.append(("gate", Gate(GateKind.COPY), (bounce,), out_col))
            self.pool.free(bounce)
        for s in borrowed:
            self.pool.free(s)
        return steps


def legalize_for_parity(
    ops: Sequence[MicroOp], fixed_cols: Iterable[int], scratch_base: int
) -> tuple[list[MicroOp], int]:
    """Rewrite row-local micro-ops to satisfy the 1T parity rule.

    Returns the rewritten ops and one past the highest scratch column used.
    Output presets are regenerated to follow their (possibly relocated)
    gates, so incoming preset writes are dropped rather than remapped.
    """
    identity = {
        op.operands[0][2]
        for op in ops
        if op.kind is OpKind.WRITE and op.note != "preset"
    }
    rw = _ParityRewriter(fixed_cols, scratch_base, identity)
    out: list[MicroOp] = []
    for op in ops:
        if op.kind is OpKind.WRITE and op.note == "preset":
            continue
        if op.kind is OpKind.GATE_EVAL:
            tile, row, _ = op.operands[0]
            cell = lambda c: (tile, row, c)
            *ins, dst = (c[2] for c in op.operands)
            for step in rw.rewrite_gate(op.gate, ins, dst):
                if step[0] == "write":
                    _, col, bit = step
                    out.append(
                        MicroOp(
                            kind=OpKind.WRITE,
                            operands=(cell(col),),
                            data=(bit,),
                            note="preset",
                        )
                    )
                else:
                    _, gate, gate_ins, gate_out = step
                    out.append(
                        MicroOp(
                            kind=OpKind.GATE_EVAL,
                            gate=gate,
                            operands=tuple(cell(c) for c in gate_ins)
                            + (cell(gate_out),),
                        )
                    )
        elif op.kind is OpKind.WRITE:
            tile, row, col = op.operands[0]
            out.append(
                MicroOp(
                    kind=OpKind.WRITE,
                    operands=((tile, row, rw.rewrite_write_target(col)),),
                    data=op.data,
                    note=op.note,
                )
            )
        elif op.kind is OpKind.READ:
            mapped = tuple((t, r, rw.lookup(c)) for t, r, c in op.operands)
            out.append(MicroOp(kind=OpKind.READ, operands=mapped, note=op.note))
        else:
            out.append(op)
    return out, rw.pool.high_water


def _legalize_rowops(
    sections: Sequence[list[RowOp]], fixed_cols: Iterable[int], scratch_base: int
) -> tuple[list[list[RowOp]], int, _ParityRewriter]:
    identity = {
        op.cols[0]
        for section in sections
        for op in section
        if op.kind is RowOpKind.WRITE and op.note != "preset"
    } | {
        op.cols[1] for section in sections for op in section if op.kind is RowOpKind.MOVE
    }
    rw = _ParityRewriter(fixed_cols, scratch_base, identity)
    rewritten: list[list[RowOp]] = []
    for section in sections:
        out: list[RowOp] = []
        for op in section:
            if op.kind is RowOpKind.WRITE and op.note == "preset":
                continue
            if op.kind is RowOpKind.GATE:
                *ins, dst = op.cols
                for step in rw.rewrite_gate(op.gate, ins, dst):
                    if step[0] == "write":
                        _, col, bit = step
                        out.append(
                            RowOp(
                                kind=RowOpKind.WRITE,
                                mask=op.mask,
                                cols=(col,),
                                bit=bit,
                                note="preset",
                            )
                        )
                    else:
                        _, gate, gate_ins, gate_out = step
                        out.append(
                            RowOp(
                                kind=RowOpKind.GATE,
                                mask=op.mask,
                                cols=tuple(gate_ins) + (gate_out,),
                                gate=gate,
                            )
                        )
            elif op.kind is RowOpKind.WRITE:
                out.append(
                    RowOp(
                        kind=RowOpKind.WRITE,
                        mask=op.mask,
                        cols=(rw.rewrite_write_target(op.cols[0]),),
                        bit=op.bit,
                        note=op.note,
                    )
                )
            else:  # MOVE
                out.append(
                    RowOp(
                        kind=RowOpKind.MOVE,
                        mask=op.mask,
                        cols=(rw.lookup(op.cols[0]), rw.lookup(op.cols[1])),
                        row_delta=op.row_delta,
                    )
                )
        rewritten.append(out)
    return rewritten, rw.pool.high_water, rw


# --------------------------------------------------------------------------
# layout plans
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CommPlan:
    """Access counts for moving one layer's activations to the next.

    Destination tiles receive inputs by masked physical-row writes: every
    row of a tile takes its own bit in a single access, so the count per
    tile is just the number of input-copy columns.  Source tiles are
    drained with one physical-row read per output column per wave.
    """

    writes_per_dst_tile: int
    reads_per_src_tile: int
    write_accesses: int
    read_accesses: int
    bits_written: int
    src_tiles: int
    dst_tiles: int


@dataclass(frozen=True)
class LayoutPlan:
    """Where one layer lives and the template its rows execute."""

    layer: LayerSpec
    tile: TileConfig
    gate_set: GateSet
    g: int
    share: int
    sigma: int
    layer_groups: int
    groups_per_tile: int
    n_tiles: int
    cell_map: Mapping[str, tuple[int, int]]
    program: RowProgram
    out_width: int
    out_cols_per_wave: tuple[tuple[int, ...], ...]
    wave_group_ranges: tuple[tuple[int, int], ...]
    theta_cols: tuple[int, ...]
    scale_cols: tuple[int, ...]
    count_width: int
    out_units: int
    pooled: bool

    @property
    def duplication(self) -> int:
        return self.layer_groups

    @property
    def rows_total(self) -> int:
        return self.layer_groups * self.g

    @property
    def read_parallelism(self) -> int:
        return 1 if self.pooled or not self.layer.binarize else self.sigma

    @property
    def memory_bytes(self) -> int:
        return self.n_tiles * self.tile.capacity_bytes

    @property
    def out_cols(self) -> tuple[int, ...]:
        return self.out_cols_per_wave[0]

    def input_col(self, plane: int, slot_in_row: int) -> int:
        start, _ = self.cell_map["inputs"]
        return start + plane * self.share + slot_in_row

    def weight_col(self, slot_in_row: int) -> int:
        start, _ = self.cell_map["weights"]
        return start + slot_in_row

    def row_masks(self) -> dict[str, np.ndarray]:
        """Boolean row selectors for every mask name used by the template."""
        rows = self.rows_total
        offs = np.arange(rows) % self.g
        masks: dict[str, np.ndarray] = {"all": np.ones(rows, dtype=bool)}
        masks["leader"] = offs == 0
        for lvl in range(self.program.merge_levels):
            stride = 1 << lvl
            base = offs % (2 * stride) == 0
            masks[f"merge{lvl}"] = base
            masks[f"recv{lvl}"] = base & (offs + stride < self.g)
        if self.pooled:
            masks["pool_leader"] = self._pool_leader_rows(offs)
        return masks

    def _pool_leader_groups(self) -> np.ndarray:
        layer = self.layer
        assert isinstance(layer, ConvLayer)
        groups = np.arange(self.layer_groups)
        plane = layer.out_x * layer.out_y
        rem = groups % plane
        oy = rem // layer.out_x
        ox = rem % layer.out_x
        off_x = (layer.pool_kx - 1) // 2
        off_y = (layer.pool_ky - 1) // 2
        sx, sy = layer.pool_stride, layer.pool_stride
        lead_x = (ox >= off_x) & ((ox - off_x) % sx == 0) & (ox - off_x <= layer.out_x - layer.pool_kx)
        lead_y = (oy >= off_y) & ((oy - off_y) % sy == 0) & (oy - off_y <= layer.out_y - layer.pool_ky)
        return lead_x & lead_y

    def _pool_leader_rows(self, offs: np.ndarray) -> np.ndarray:
        lead = self._pool_leader_groups()
        grp = np.arange(self.rows_total) // self.g
        return lead[grp] & (offs == 0)

    def out_flat_map(self) -> np.ndarray:
        """Flat (y, x, z)-ordering index of each output unit, in row order."""
        layer = self.layer
        if isinstance(layer, FcLayer):
            return np.arange(layer.n_out, dtype=np.int64)
        groups = np.arange(self.layer_groups)
        plane = layer.out_x * layer.out_y
        f = groups // plane
        rem = groups % plane
        oy = rem // layer.out_x
        ox = rem % layer.out_x
        if not self.pooled:
            return (oy * layer.out_x + ox) * layer.filters + f
        lead = self._pool_leader_groups()
        off_x = (layer.pool_kx - 1) // 2
        off_y = (layer.pool_ky - 1) // 2
        wx = (ox[lead] - off_x) // layer.pool_stride
        wy = (oy[lead] - off_y) // layer.pool_stride
        return (wy * layer.pool_out_x + wx) * layer.filters + f[lead]


def _even_share(taps: int, g: int) -> int:
    share = -(-taps // g)
    return max(2, share + (share % 2))


def _build_plan(
    layer: LayerSpec,
    tile: TileConfig,
    gate_set: GateSet,
    g: int,
    sigma: int,
    copy_via_not: bool,
) -> LayoutPlan:
    taps = layer.fan_in
    planes = layer.input_bits
    cols_limit = tile.logical_cols
    share = _even_share(taps, g)
    pooled = isinstance(layer, ConvLayer) and layer.pool_window > 1

    # Count widths: per-row accumulation, then one bit per merge level; a
    # per-unit scale widens the final compare by its bit width.
    w_row = max(1, math.ceil(math.log2(share * ((1 << planes) - 1) + 1)))
    merge_levels = (g - 1).bit_length()
    count_width = w_row + merge_levels
    compare_width = count_width + layer.scale_bits
    theta_width = compare_width + 1 if layer.binarize else 0

    cell_map: dict[str, tuple[int, int]] = {"zero": (0, 1)}
    cursor = 2  # column 1 stays clear so the input block starts even
    cell_map["inputs"] = (cursor, planes * share)
    cursor += planes * share
    cell_map["weights"] = (cursor, share)
    cursor += share
    if layer.binarize:
        cell_map["theta"] = (cursor, theta_width)
        cursor += theta_width
        if layer.scale_bits:
            cell_map["scale"] = (cursor, layer.scale_bits)
            cursor += layer.scale_bits
    if pooled:
        cell_map["prepool"] = (cursor, 1)
        prepool_col = cursor
        cursor += 1
    out_stride = 2  # keeps per-wave output columns on one parity
    if layer.binarize:
        n_out_slots = 1 if pooled else sigma
        cell_map["out"] = (cursor, out_stride * n_out_slots)
        out_base = cursor
        cursor += out_stride * n_out_slots
        raw_pad_cols: tuple[int, ...] = ()
        out_width = 1
    else:
        out_width = max(layer.out_bits, count_width) if layer.out_bits else count_width
        pad = out_width - count_width
        cell_map["out_pad"] = (cursor, max(pad, 1))
        raw_pad_cols = tuple(range(cursor, cursor + pad))
        cursor += max(pad, 1)
        out_base = -1
    temp_base = cursor
    if temp_base >= cols_limit:
        raise DoesNotFit(
            f"fixed regions need {temp_base} columns, tile has {cols_limit}"
        )

    theta_start = cell_map["theta"][0] if layer.binarize else 0
    theta_cols = tuple(range(theta_start, theta_start + theta_width))
    if layer.scale_bits:
        scale_start = cell_map["scale"][0]
        scale_cols = tuple(range(scale_start, scale_start + layer.scale_bits))
    else:
        scale_cols = ()

    tb = TraceBuilder(gate_set, temp_base, zero_col=0, copy_via_not=copy_via_not)
    collect = _TemplateCollector(tb)
    wave_ops: list[RowOp] = []
    post_ops: list[RowOp] = []
    collect.target = wave_ops

    in_start, _ = cell_map["inputs"]
    w_start, _ = cell_map["weights"]

    def plane_count(plane: int) -> list[int]:
        outs = []
        for i in range(share):
            a = in_start + plane * share + i
            b = w_start + i
            xnor(tb, a, b, out=a)  # result overwrites the input copy
            outs.append(a)
        pc = popcount(tb, outs, consume=True)
        return list(pc.out_cols)

    if planes == 1:
        count = plane_count(0)
        collect.flush("all")
    else:
        acc = []
        for _ in range(w_row):
            c = tb.result_col()
            tb.write(c, 0, note="zero")
            acc.append(c)
        for b in range(planes):
            pc = plane_count(b)
            window = acc[b:]
            trace = add(tb, window, pc)
            tb.free_all(pc)
            tb.free_all(window)
            result = list(trace.out_cols)
            keep = min(len(result), w_row - b)
            for extra in result[keep:]:
                tb.free(extra)
            acc[b : b + keep] = result[:keep]
        count = acc
        collect.flush("all")

    partial = count
    for lvl in range(merge_levels):
        scratch = []
        for _ in range(len(partial)):
            s = tb.result_col()
            tb.write(s, 0, note="zero")
            scratch.append(s)
        collect.flush("all")
        for src, dst in zip(partial, scratch):
            collect.move(f"recv{lvl}", src, dst, row_delta=1 << lvl)
        trace = add(tb, partial, scratch)
        collect.flush(f"merge{lvl}")
        tb.free_all(partial)
        tb.free_all(scratch)
        partial = list(trace.out_cols)

    if layer.binarize:
        compare_cols = partial
        if layer.scale_bits:
            product = multiply_bitserial(tb, partial, scale_cols)
            collect.flush("leader")
            tb.free_all(partial)
            compare_cols = list(product.out_cols)
        target = prepool_col if pooled else out_base
        threshold(tb, compare_cols, theta_cols, out=target)
        collect.flush("leader")
        tb.free_all(compare_cols)
        if pooled:
            collect.target = post_ops
            k = layer.pool_window
            off_x = (layer.pool_kx - 1) // 2
            off_y = (layer.pool_ky - 1) // 2
            scratch = [tb.result_col() for _ in range(k - 1)]
            idx = 0
            for dy in range(layer.pool_ky):
                for dx in range(layer.pool_kx):
                    if dy == off_y and dx == off_x:
                        continue
                    delta = ((dy - off_y) * layer.out_x + (dx - off_x)) * g
                    collect.move("pool_leader", prepool_col, scratch[idx], row_delta=delta)
                    idx += 1
            pool_or(tb, [prepool_col] + scratch, out=out_base)
            collect.flush("pool_leader")
            tb.free_all(scratch)
        base_out_cols: tuple[int, ...] = (out_base,)
    else:
        base_out_cols = tuple(partial) + raw_pad_cols

    high_water = tb.alloc.high_water_col
    if tile.cell_variant.value == "1T":
        fixed = {0}
        fixed.update(range(w_start, w_start + share))
        fixed.update(theta_cols)
        fixed.update(scale_cols)
        if layer.binarize:
            start, width = cell_map["out"]
            fixed.update(range(start, start + width))
        if pooled:
            fixed.add(prepool_col)
        fixed.update(raw_pad_cols)
        sections, parity_high, rw = _legalize_rowops(
            [wave_ops, post_ops], fixed, scratch_base=temp_base
        )
        wave_ops, post_ops = sections
        high_water = max(high_water, parity_high)
        if not layer.binarize:
            base_out_cols = tuple(rw.lookup(c) for c in partial) + raw_pad_cols

    if high_water > cols_limit:
        raise DoesNotFit(
            f"row template needs {high_water} columns, tile has {cols_limit}"
        )
    cell_map["scratch"] = (temp_base, high_water - temp_base)

    rows_limit = tile.logical_rows
    window = layer.pool_window if pooled else 1
    groups_per_tile = (rows_limit // g) // window * window
    if groups_per_tile < 1:
        raise DoesNotFit(f"a group of {g} rows exceeds the tile")
    layer_groups = layer.groups
    n_tiles = -(-layer_groups // groups_per_tile)

    if sigma < 1:
        raise ValueError("sigma must be >= 1")
    wave_span = -(-layer_groups // sigma)
    wave_span = -(-wave_span // window) * window
    ranges = []
    start = 0
    for _ in range(sigma):
        end = min(start + wave_span, layer_groups)
        if end <= start:
            raise DoesNotFit(f"sigma={sigma} leaves empty waves")
        ranges.append((start, end))
        start = end
    if start < layer_groups:
        raise DoesNotFit("wave rounding dropped groups; lower sigma")

    if layer.binarize and not pooled:
        out_cols_per_wave = tuple((out_base + out_stride * w,) for w in range(sigma))
    else:
        out_cols_per_wave = tuple(base_out_cols for _ in range(sigma))

    if pooled:
        out_units = layer.filters * layer.pool_out_x * layer.pool_out_y
    else:
        out_units = layer_groups

    program = RowProgram(
        wave_ops=tuple(wave_ops),
        post_ops=tuple(post_ops),
        out_cols=base_out_cols,
        merge_levels=merge_levels,
        high_water_col=high_water,
    )
    return LayoutPlan(
        layer=layer,
        tile=tile,
        gate_set=gate_set,
        g=g,
        share=share,
        sigma=sigma,
        layer_groups=layer_groups,
        groups_per_tile=groups_per_tile,
        n_tiles=n_tiles,
        cell_map=cell_map,
        program=program,
        out_width=out_width,
        out_cols_per_wave=out_cols_per_wave,
        wave_group_ranges=tuple(ranges),
        theta_cols=theta_cols,
        scale_cols=scale_cols,
        count_width=count_width,
        out_units=out_units,
        pooled=pooled,
    )


def layout_layer(
    layer: LayerSpec,
    tile: TileConfig,
    gate_set: GateSet,
    *,
    g: int | None = None,
    sigma: int = 1,
    copy_via_not: bool = False,
) -> LayoutPlan:
    """Place a layer on tiles, using the smallest workable group height.

    With ``g=None`` the compiler dry-runs increasing group heights until the
    row template (operands, counters, merge scratch, threshold) fits the
    tile width; pass an explicit ``g`` to override.
    """
    if g is not None:
        return _build_plan(layer, tile, gate_set, g, sigma, copy_via_not)
    max_g = min(tile.logical_rows, max(1, -(-layer.fan_in // 2)))
    last_error: DoesNotFit | None = None
    for candidate in range(1, max_g + 1):
        try:
            return _build_plan(layer, tile, gate_set, candidate, sigma, copy_via_not)
        except DoesNotFit as exc:
            last_error = exc
    raise DoesNotFit(
        f"layer {layer.name!r} does not fit on {tile.logical_rows}x{tile.logical_cols}"
        f" tiles at any group height: {last_error}"
    )


def plan_communication(src: LayoutPlan | None, dst: LayoutPlan) -> CommPlan:
    """Access counts for filling ``dst`` input copies from ``src`` outputs.

    ``src=None`` models the host loading the first layer's inputs (same
    destination-side cost, nothing to read on-array).
    """
    writes_per_dst_tile = dst.share * dst.layer.input_bits
    write_accesses = writes_per_dst_tile * dst.n_tiles
    if src is None:
        reads_per_src_tile = 0
        read_accesses = 0
        src_tiles = 0
    else:
        reads_per_src_tile = src.out_width * src.read_parallelism
        read_accesses = reads_per_src_tile * src.n_tiles
        src_tiles = src.n_tiles
    bits_written = dst.layer_groups * dst.layer.fan_in * dst.layer.input_bits
    return CommPlan(
        writes_per_dst_tile=writes_per_dst_tile,
        reads_per_src_tile=reads_per_src_tile,
        write_accesses=write_accesses,
        read_accesses=read_accesses,
        bits_written=bits_written,
        src_tiles=src_tiles,
        dst_tiles=dst.n_tiles,
    )


def memory_usage(plans: Iterable[LayoutPlan]) -> int:
    """Total bytes of tile capacity the plans occupy."""
    return sum(plan.memory_bytes for plan in plans)
