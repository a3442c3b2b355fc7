"""Vectorized whole-network execution with cycle and energy accounting.

The compiled row templates from :mod:`spinpim.layout_compiler` are data
independent: every row of a layer runs the same op sequence, and a batch of
inputs just means more rows doing it in lockstep.  This module exploits that
by packing cell state into uint64 bit planes — one word column per 64 array
rows, one plane per logical column, with the batch as a separate axis — and
evaluating each template op on all rows of all batch items at once.

Cost accounting is exact and reproducible by construction: every energy is
derived from integer event tallies (per-gate input-population counts, cell
flips by final state, sensed ones/zeros) multiplied by closed-form per-event
constants at the end.  Sums of integers do not depend on evaluation order,
so reports are byte-identical across runs, wave splits, and worker counts.

Costing conventions
-------------------
- Latency counts serialized array steps per item, each one switching time:
  one step per issued gate template op, per masked physical-row write, per
  physical-row read.  Tiles run in lockstep, so tile count never multiplies
  latency; on transposed (1T) arrays a masked column write is one step, on
  3T arrays writes serialize over the busiest tile's rows.
- Gate energy per driven row is V_signature^2 / R_total(inputs) * t_switch;
  all shipped gates are symmetric, so R_total depends only on how many
  inputs hold ones.
- A write dissipates (1.5 i_c)^2 * R(final state) * t_switch per cell that
  actually flips; a read senses every cell of the touched physical row at
  (i_c / 2)^2 * R(cell) * t_switch.
- Word lines recharge when a gate's operand column set changes (1T) or its
  row mask changes (3T); activation is a peripheral-energy event with no
  serialized latency of its own.
- Peripheral circuitry adds per-event latency/energy from
  :class:`~spinpim.array_core.PeripheralModel`; disabling it models the
  ideal device-only array and never changes computed bits.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from .array_core import CellVariant, PeripheralModel, TileConfig
from .bnn_kernels import GateSet
from .device_models import MtjSpec, make_future_spec, make_modern_spec
from .gate_engine import Gate, combined_resistance, truth_table, voltage_window
from .layout_compiler import (
    CommPlan,
    FcLayer,
    LayoutPlan,
    RowOp,
    RowOpKind,
    layout_layer,
    memory_usage,
    plan_communication,
)
from .reference_bnn import (
    NetworkSpec,
    NetworkWeights,
    make_preset,
    preset_names,
    seed_inputs,
    seed_weights,
)

__all__ = [
    "GRID_LABELS",
    "CONFIG_LABELS",
    "PhaseKind",
    "PhaseCost",
    "CostReport",
    "SimConfig",
    "PassResult",
    "PipelineConfig",
    "StageCost",
    "PipelineResult",
    "ScaleStep",
    "ScalingOutcome",
    "BenchmarkRow",
    "BenchmarkReport",
    "build_plans",
    "build_pipeline_config",
    "default_peripheral",
    "emit_report",
    "load_peripheral_factors",
    "reference_constants",
    "run_benchmarks",
    "run_pipeline",
    "run_single_pass",
    "scale_to_power_budget",
]


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    """Array-level execution configuration for one simulation run."""

    mtj: MtjSpec
    tile_rows: int = 1024
    cell_variant: CellVariant = CellVariant.ONE_T_TRANSPOSED
    gate_set: GateSet = GateSet.RESTRICTED
    peripheral: PeripheralModel = field(default_factory=PeripheralModel.disabled)
    sigma: int = 1
    g: Mapping[str, int] | None = None  # per-layer group-height overrides
    overlap_comm: bool = False
    copy_via_not: bool = False

    def tile(self) -> TileConfig:
        return TileConfig(
            rows=self.tile_rows,
            cols=self.tile_rows,
            cell_variant=self.cell_variant,
            mtj=self.mtj,
            peripheral=self.peripheral,
        )


def build_plans(network: NetworkSpec, config: SimConfig) -> tuple[LayoutPlan, ...]:
    """Compile every layer of ``network`` onto tiles per ``config``."""
    tile = config.tile()
    plans = []
    for layer in network.layers:
        override = config.g.get(layer.name) if config.g else None
        plans.append(
            layout_layer(
                layer,
                tile,
                config.gate_set,
                g=override,
                sigma=config.sigma,
                copy_via_not=config.copy_via_not,
            )
        )
    return tuple(plans)


# --------------------------------------------------------------------------
# shipped constants
# --------------------------------------------------------------------------

def _read_cfg(filename: str) -> configparser.ConfigParser:
    text = (resources.files("spinpim") / "data" / filename).read_text()
    parser = configparser.ConfigParser()
    parser.read_string(text)
    return parser


@lru_cache(maxsize=None)
def _peripheral_factor_table() -> Mapping[str, Mapping[str, float]]:
    parser = _read_cfg("peripheral_factors.cfg")
    return {
        section: {k: float(v) for k, v in parser[section].items()}
        for section in parser.sections()
    }


def load_peripheral_factors(name: str, tile_rows: int | None = None) -> dict[str, float]:
    """Dimensionless peripheral factors for a device generation.

    A ``<name>.<tile_rows>`` section, when present, overrides the base
    section for that tile size.
    """
    table = _peripheral_factor_table()
    if name not in table:
        raise KeyError(f"no peripheral factors for device generation {name!r}")
    factors = dict(table[name])
    if tile_rows is not None and f"{name}.{tile_rows}" in table:
        factors.update(table[f"{name}.{tile_rows}"])
    return factors


def default_peripheral(spec: MtjSpec, tile_rows: int = 1024) -> PeripheralModel:
    """The shipped peripheral model for a device generation and tile size."""
    return PeripheralModel.from_factors(spec, load_peripheral_factors(spec.name, tile_rows))


@lru_cache(maxsize=None)
def _reference_constant_table() -> Mapping[str, Mapping[str, float]]:
    parser = _read_cfg("reference_constants.cfg")
    return {
        section: {k: float(v) for k, v in parser[section].items()}
        for section in parser.sections()
    }


def reference_constants() -> dict[str, dict[str, float]]:
    """Published comparison-platform costs (read from config, never derived)."""
    return {k: dict(v) for k, v in _reference_constant_table().items()}


# --------------------------------------------------------------------------
# phase costs
# --------------------------------------------------------------------------

class PhaseKind(Enum):
    COMPUTE = "Compute"
    COMMUNICATE = "Communicate"


@dataclass(frozen=True)
class PhaseCost:
    """Cost of one accounting phase, totalled over the whole batch."""

    layer: str
    kind: PhaseKind
    detail: str
    device_latency_s: float
    peripheral_latency_s: float
    gate_energy_j: float
    write_energy_j: float
    read_energy_j: float
    peripheral_energy_j: float
    gate_issues: int
    write_accesses: int
    read_accesses: int
    activated_lines: int

    @property
    def device_energy_j(self) -> float:
        return self.gate_energy_j + self.write_energy_j + self.read_energy_j

    def latency(self, peripheral: bool = True) -> float:
        return self.device_latency_s + (self.peripheral_latency_s if peripheral else 0.0)

    def energy(self, peripheral: bool = True) -> float:
        return self.device_energy_j + (self.peripheral_energy_j if peripheral else 0.0)


class _Bucket:
    """Integer tallies for one phase; floats materialize only at the end."""

    __slots__ = (
        "gate_ones", "flips1", "flips0", "read_ones", "read_cells",
        "gate_issues", "write_acc", "read_acc", "act_lines",
        "units_gate", "units_read", "units_write", "units_act", "touched",
    )

    def __init__(self) -> None:
        self.gate_ones: dict[Gate, list[int]] = {}
        self.flips1 = 0
        self.flips0 = 0
        self.read_ones = 0
        self.read_cells = 0
        self.gate_issues = 0
        self.write_acc = 0
        self.read_acc = 0
        self.act_lines = 0
        self.units_gate = 0
        self.units_read = 0
        self.units_write = 0
        self.units_act = 0
        self.touched = False

    def finalize(
        self,
        layer: str,
        kind: PhaseKind,
        detail: str,
        spec: MtjSpec,
        peri: PeripheralModel,
        batch: int,
    ) -> PhaseCost:
        t = spec.t_switch
        gate_e = 0.0
        for gate, counts in self.gate_ones.items():
            prof = _gate_profile(spec, gate)
            for j, n in enumerate(counts):
                if n:
                    gate_e += n * prof.energy_by_ones[j]
        i_w = spec.write_current_factor * spec.i_c
        write_e = self.flips1 * i_w**2 * spec.r_ap * t + self.flips0 * i_w**2 * spec.r_p * t
        read_e = (spec.i_c / 2.0) ** 2 * t * (
            self.read_ones * spec.r_ap + (self.read_cells - self.read_ones) * spec.r_p
        )
        device_lat = batch * t * (self.units_gate + self.units_read + self.units_write)
        peri_lat = batch * (
            self.units_gate * peri.gate_issue_latency
            + self.units_read * peri.read_latency
            + self.units_write * peri.write_latency
            + self.units_act * peri.row_activate_latency
        )
        peri_e = batch * (
            self.gate_issues * peri.gate_issue_energy
            + self.read_acc * peri.read_energy
            + self.write_acc * peri.write_energy
            + self.act_lines * peri.row_activate_energy
        )
        return PhaseCost(
            layer=layer,
            kind=kind,
            detail=detail,
            device_latency_s=device_lat,
            peripheral_latency_s=peri_lat,
            gate_energy_j=gate_e,
            write_energy_j=write_e,
            read_energy_j=read_e,
            peripheral_energy_j=peri_e,
            gate_issues=batch * self.gate_issues,
            write_accesses=batch * self.write_acc,
            read_accesses=batch * self.read_acc,
            activated_lines=batch * self.act_lines,
        )


class _GateProfile:
    __slots__ = ("signature", "table_by_ones", "energy_by_ones")

    def __init__(self, signature, table_by_ones, energy_by_ones):
        self.signature = signature
        self.table_by_ones = table_by_ones
        self.energy_by_ones = energy_by_ones


@lru_cache(maxsize=None)
def _gate_profile(spec: MtjSpec, gate: Gate) -> _GateProfile:
    window = voltage_window(spec, gate)
    table = truth_table(gate.kind, gate.fan_in)
    k = gate.fan_in
    by_ones = tuple(table[(1 << j) - 1] for j in range(k + 1))
    energy = tuple(
        window.signature**2
        / combined_resistance(spec, (1,) * j + (0,) * (k - j), gate.preset_bit)
        * spec.t_switch
        for j in range(k + 1)
    )
    return _GateProfile(window.signature, by_ones, energy)


# --------------------------------------------------------------------------
# packed bit-plane helpers
# --------------------------------------------------------------------------

def _pack_rows(bits: np.ndarray) -> np.ndarray:
    """Pack (..., rows) bits into (..., words) little-endian uint64."""
    rows = bits.shape[-1]
    words = -(-rows // 64)
    pad = words * 64 - rows
    if pad:
        widths = [(0, 0)] * (bits.ndim - 1) + [(0, pad)]
        bits = np.pad(bits.astype(np.uint8), widths)
    packed = np.packbits(np.ascontiguousarray(bits, dtype=np.uint8), axis=-1, bitorder="little")
    return packed.view(np.uint64)


def _unpack_rows(words: np.ndarray, rows: int) -> np.ndarray:
    """Inverse of :func:`_pack_rows`: (..., words) uint64 -> (..., rows) uint8."""
    as_bytes = np.ascontiguousarray(words).view(np.uint8)
    return np.unpackbits(as_bytes, axis=-1, bitorder="little", count=rows)


def _popcount(words: np.ndarray) -> int:
    return int(np.bitwise_count(words).sum())


def _shift_rows(words: np.ndarray, delta: int) -> np.ndarray:
    """Row-space shift: output bit r equals input bit (r + delta), no wrap."""
    out = np.zeros_like(words)
    n = words.shape[-1]
    if delta == 0:
        return words.copy()
    if delta > 0:
        q, s = divmod(delta, 64)
        if q >= n:
            return out
        if s == 0:
            out[..., : n - q] = words[..., q:]
        else:
            out[..., : n - q] = words[..., q:] >> np.uint64(s)
            if q + 1 < n:
                out[..., : n - q - 1] |= words[..., q + 1 :] << np.uint64(64 - s)
    else:
        q, s = divmod(-delta, 64)
        if q >= n:
            return out
        if s == 0:
            out[..., q:] = words[..., : n - q]
        else:
            out[..., q:] = words[..., : n - q] << np.uint64(s)
            if q + 1 < n:
                out[..., q + 1 :] |= words[..., : n - q - 1] >> np.uint64(64 - s)
    return out


def _ones_planes(cols: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Bit planes (little-endian) of the per-row population count of ``cols``."""
    planes: list[np.ndarray] = []
    for col in cols:
        carry = col
        for i in range(len(planes)):
            planes[i], carry = planes[i] ^ carry, planes[i] & carry
        planes.append(carry)
        while len(planes) > 1 and not planes[-1].any():
            planes.pop()
    # Trimming empty top planes is only an optimization; callers treat
    # absent planes as zero bits of the count.
    return planes


def _exact_count_mask(planes: Sequence[np.ndarray], j: int) -> np.ndarray | None:
    """Rows whose population count equals ``j`` (None = impossible count)."""
    if j >> len(planes):
        return None
    m: np.ndarray | None = None
    for i, p in enumerate(planes):
        q = p if (j >> i) & 1 else ~p
        m = q if m is None else m & q
    return m


# --------------------------------------------------------------------------
# the packed executor
# --------------------------------------------------------------------------

# Multiple of 64 (see _LayerRun._group_chunks); 4096 groups bound the
# unpacked staging arrays to tens of megabytes per chunk.
_LOAD_CHUNK_GROUPS = 4096


class _WaveView:
    """Row selection and geometry for one wave (or the post segment)."""

    __slots__ = ("row_lo", "row_hi", "tiles", "tile_span", "remap")

    def __init__(self, plan: LayoutPlan, wave: int | None):
        g = plan.g
        rows_per_tile = plan.groups_per_tile * g
        if wave is None:
            gs, ge = 0, plan.layer_groups
        else:
            gs, ge = plan.wave_group_ranges[wave]
        self.row_lo = gs * g
        self.row_hi = ge * g
        k_lo = gs // plan.groups_per_tile
        k_hi = (ge - 1) // plan.groups_per_tile
        self.tiles = k_hi - k_lo + 1
        self.tile_span = (k_lo * rows_per_tile, min((k_hi + 1) * rows_per_tile, plan.rows_total))
        if wave is not None and plan.layer.binarize and not plan.pooled:
            base = plan.program.out_cols[0]
            self.remap = {base: plan.out_cols_per_wave[wave][0]}
        else:
            self.remap = {}


class _LayerRun:
    """Executes one layer's template over the packed batch state."""

    def __init__(self, plan: LayoutPlan, config: SimConfig, batch: int):
        self.plan = plan
        self.config = config
        self.batch = batch
        self.rows = plan.rows_total
        self.words = -(-self.rows // 64)
        self.state = np.zeros((plan.program.high_water_col + 1, batch, self.words), dtype=np.uint64)
        self.masks_bool = plan.row_masks()
        self.one_t = config.cell_variant is CellVariant.ONE_T_TRANSPOSED
        self.rows_per_tile = plan.groups_per_tile * plan.g
        self._sel_cache: dict[tuple[str, int, int], tuple[np.ndarray, int, int]] = {}
        self._span_cache: dict[tuple[int, int], np.ndarray] = {}
        self._latch_lines: frozenset[int] | None = None
        self._latch_mask: tuple[str, int, int] | None = None
        # Waves are a scheduling split of one logical template op, so a
        # move's source line is sensed once per (op, tile) pair per pass.
        self._move_tiles_seen: dict[tuple[str, int], set[int]] = {}

    # -- selections --------------------------------------------------------

    def _sel(self, name: str, row_lo: int, row_hi: int) -> tuple[np.ndarray, int, int]:
        """Packed row selector, selected-row count, and busiest-tile count."""
        key = (name, row_lo, row_hi)
        hit = self._sel_cache.get(key)
        if hit is not None:
            return hit
        mask = self.masks_bool[name].copy()
        mask[: row_lo] = False
        mask[row_hi :] = False
        packed = _pack_rows(mask)
        count = int(mask.sum())
        idx = np.flatnonzero(mask)
        if len(idx):
            busiest = int(np.bincount(idx // self.rows_per_tile).max())
        else:
            busiest = 0
        entry = (packed, count, busiest)
        self._sel_cache[key] = entry
        return entry

    def _span(self, lo: int, hi: int) -> np.ndarray:
        hit = self._span_cache.get((lo, hi))
        if hit is not None:
            return hit
        mask = np.zeros(self.rows, dtype=bool)
        mask[lo:hi] = True
        packed = _pack_rows(mask)
        self._span_cache[(lo, hi)] = packed
        return packed

    # -- uncosted setup ----------------------------------------------------

    def _group_chunks(self):
        """Group ranges whose row spans start on packed-word boundaries.

        Unpacked (rows, share) staging arrays for a whole layer can reach
        tens of gigabytes on the large convolutional presets, so loading
        streams a bounded slice of groups at a time; the chunk size is a
        multiple of 64 groups, which keeps every chunk's row offset a
        multiple of 64 whatever the group height.
        """
        groups = self.plan.layer_groups
        g = self.plan.g
        for g0 in range(0, groups, _LOAD_CHUNK_GROUPS):
            g1 = min(g0 + _LOAD_CHUNK_GROUPS, groups)
            yield g0, g1, (g0 * g) // 64, -(-(g1 * g) // 64)

    def load_setup(self, weights: NetworkWeights, layer_index: int) -> None:
        plan, layer = self.plan, self.plan.layer
        g, share, taps = plan.g, plan.share, plan.layer.fan_in
        groups = plan.layer_groups
        plane = 1 if isinstance(layer, FcLayer) else layer.out_x * layer.out_y
        w = weights.weights[layer_index].reshape(len(weights.weights[layer_index]), -1)
        for g0, g1, w0, w1 in self._group_chunks():
            units = np.arange(g0, g1) // plane
            w_full = np.ones((g1 - g0, g * share), dtype=np.uint8)  # pad slots hold 1
            w_full[:, :taps] = w[units]
            w_rows = w_full.reshape((g1 - g0) * g, share)
            for s in range(share):
                self.state[plan.weight_col(s)][:, w0:w1] = _pack_rows(w_rows[:, s])
        units = np.arange(groups) // plane
        leaders = np.arange(groups) * g
        theta = weights.thetas[layer_index]
        if theta is not None:
            per_group = theta[units].astype(np.int64)
            for bi, col in enumerate(plan.theta_cols):
                bits = np.zeros(self.rows, dtype=np.uint8)
                bits[leaders] = (per_group >> bi) & 1
                self.state[col][:, :] = _pack_rows(bits)
        scale = weights.scales[layer_index]
        if scale is not None:
            per_group = scale[units].astype(np.int64)
            for bi, col in enumerate(plan.scale_cols):
                bits = np.zeros(self.rows, dtype=np.uint8)
                bits[leaders] = (per_group >> bi) & 1
                self.state[col][:, :] = _pack_rows(bits)

    # -- costed input loading ----------------------------------------------

    def load_inputs(self, cur: np.ndarray, bucket: _Bucket) -> None:
        plan, layer = self.plan, self.plan.layer
        g, share, taps = plan.g, plan.share, plan.layer.fan_in
        pad = g * share - taps
        for g0, g1, w0, w1 in self._group_chunks():
            srcs = layer.tap_sources(np.arange(g0, g1))
            if pad:
                srcs = np.hstack([srcs, np.full((g1 - g0, pad), -1, dtype=np.int64)])
            row_slot_src = srcs.reshape((g1 - g0) * g, share)
            for s in range(share):
                idx = row_slot_src[:, s]
                safe = np.where(idx < 0, 0, idx)
                vals = cur[:, safe]
                vals = np.where(idx[None, :] < 0, 0, vals)
                for b in range(layer.input_bits):
                    bits = ((vals >> b) & 1).astype(np.uint8)
                    packed = _pack_rows(bits)
                    col = self.state[plan.input_col(b, s)]
                    bucket.flips1 += _popcount(~col[:, w0:w1] & packed)
                    bucket.flips0 += _popcount(col[:, w0:w1] & ~packed)
                    col[:, w0:w1] = packed

    # -- template execution -------------------------------------------------

    def run_op(self, op: RowOp, view: _WaveView, bucket: _Bucket, op_key: tuple[str, int]) -> None:
        spec = self.config.mtj
        sel, n_sel, busiest = self._sel(op.mask, view.row_lo, view.row_hi)
        bucket.touched = True
        if op.kind is RowOpKind.GATE:
            cols = [view.remap.get(c, c) for c in op.cols]
            *ins, out_c = cols
            planes = _ones_planes([self.state[c] for c in ins])
            out = np.zeros_like(self.state[out_c])
            tallies = bucket.gate_ones.setdefault(op.gate, [0] * (op.gate.fan_in + 1))
            prof = _gate_profile(spec, op.gate)
            for j in range(op.gate.fan_in + 1):
                mj = _exact_count_mask(planes, j)
                if mj is None:
                    continue
                mj = mj & sel
                n = _popcount(mj)
                if n:
                    tallies[j] += n
                    if prof.table_by_ones[j]:
                        out |= mj
            self.state[out_c] = (self.state[out_c] & ~sel) | out
            bucket.gate_issues += view.tiles
            bucket.units_gate += 1
            if self.one_t:
                lines = frozenset(cols)
                if lines != self._latch_lines:
                    bucket.act_lines += len(lines) * view.tiles
                    bucket.units_act += len(lines) * view.tiles
                    self._latch_lines = lines
            else:
                key = (op.mask, view.row_lo, view.row_hi)
                if key != self._latch_mask:
                    bucket.act_lines += n_sel
                    bucket.units_act += n_sel
                    self._latch_mask = key
        elif op.kind is RowOpKind.WRITE:
            col_idx = view.remap.get(op.cols[0], op.cols[0])
            col = self.state[col_idx]
            if op.bit:
                bucket.flips1 += _popcount(~col & sel)
                self.state[col_idx] = col | sel
            else:
                bucket.flips0 += _popcount(col & sel)
                self.state[col_idx] = col & ~sel
            if self.one_t:
                bucket.write_acc += view.tiles
                bucket.units_write += 1
            else:
                bucket.write_acc += n_sel
                bucket.units_write += busiest
        else:  # MOVE
            src_c, dst_c = op.cols
            shifted = _shift_rows(self.state[src_c], op.row_delta)
            dst = self.state[dst_c]
            new = (dst & ~sel) | (shifted & sel)
            changed = dst ^ new
            bucket.flips1 += _popcount(changed & new)
            bucket.flips0 += _popcount(changed & dst)
            self.state[dst_c] = new
            if self.one_t:
                # A row's cell contents evolve identically whatever the wave
                # split, so summing each wave's own row span reproduces the
                # single-wave sense exactly; the untouched remainder of each
                # physical line is attributed to the first wave in that tile.
                span = self._span(view.row_lo, view.row_hi)
                bucket.read_ones += _popcount(self.state[src_c] & span)
                seen = self._move_tiles_seen.setdefault(op_key, set())
                k_lo = view.tile_span[0] // self.rows_per_tile
                k_hi = (view.tile_span[1] - 1) // self.rows_per_tile
                fresh = [k for k in range(k_lo, k_hi + 1) if k not in seen]
                seen.update(fresh)
                bucket.read_cells += self.batch * len(fresh) * self.config.tile_rows
                bucket.read_acc += view.tiles
                bucket.write_acc += view.tiles
                bucket.units_read += 1
                bucket.units_write += 1
            else:
                src_sel = _shift_rows(sel, -op.row_delta)
                ones = 0
                for c in range(len(self.state)):
                    ones += _popcount(self.state[c] & src_sel)
                bucket.read_ones += ones
                bucket.read_cells += self.batch * n_sel * self.config.tile_rows
                bucket.read_acc += n_sel
                bucket.write_acc += n_sel
                bucket.units_read += busiest
                bucket.units_write += busiest

    def run_compute(self, buckets: Mapping[str, _Bucket]) -> None:
        plan = self.plan
        for w in range(plan.sigma):
            view = _WaveView(plan, w)
            for i, op in enumerate(plan.program.wave_ops):
                detail = "merge" if op.mask.startswith(("merge", "recv")) else "wave"
                self.run_op(op, view, buckets[detail], ("wave", i))
        if plan.program.post_ops:
            view = _WaveView(plan, None)
            for i, op in enumerate(plan.program.post_ops):
                self.run_op(op, view, buckets["pool"], ("post", i))

    # -- output extraction ---------------------------------------------------

    def gather_outputs(self) -> np.ndarray:
        plan, layer = self.plan, self.plan.layer
        g = plan.g
        flat_map = plan.out_flat_map()
        out = np.zeros((self.batch, plan.out_units), dtype=np.int64)
        if plan.pooled:
            lead = np.flatnonzero(self.masks_bool["pool_leader"])
            bits = _unpack_rows(self.state[plan.out_cols[0]], self.rows)
            out[:, flat_map] = bits[:, lead]
        elif layer.binarize:
            vals = np.zeros((self.batch, plan.layer_groups), dtype=np.int64)
            for w, (gs, ge) in enumerate(plan.wave_group_ranges):
                col = plan.out_cols_per_wave[w][0]
                bits = _unpack_rows(self.state[col], self.rows)
                rows = np.arange(gs, ge) * g
                vals[:, gs:ge] = bits[:, rows]
            out[:, flat_map] = vals
        else:
            lead = np.arange(plan.layer_groups) * g
            vals = np.zeros((self.batch, plan.layer_groups), dtype=np.int64)
            for bi, col in enumerate(plan.out_cols):
                bits = _unpack_rows(self.state[col], self.rows)
                vals += bits[:, lead].astype(np.int64) << bi
            out[:, flat_map] = vals
        return out

    def drain_popcounts(self) -> tuple[int, int]:
        """Sensed (ones, cells) when the output columns are read per tile.

        Per-wave output columns hold disjoint row populations and multiplex
        onto the layer's logical output lines, so the sensed cell count
        follows the logical output width, not the wave count.
        """
        cols: list[int] = []
        for wave_cols in self.plan.out_cols_per_wave:
            for c in wave_cols:
                if c not in cols:
                    cols.append(c)
        ones = 0
        for c in cols:
            ones += _popcount(self.state[c])
        cells = self.batch * self.plan.out_width * self.plan.n_tiles * self.config.tile_rows
        return ones, cells


# --------------------------------------------------------------------------
# single-pass execution
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PassResult:
    """Bits and costs of running a batch through a compiled network once."""

    config: SimConfig
    plans: tuple[LayoutPlan, ...]
    batch: int
    outputs: np.ndarray
    layer_outputs: tuple[np.ndarray, ...]
    phases: tuple[PhaseCost, ...]
    memory_bytes: int

    def latency(self, peripheral: bool = True) -> float:
        """Serialized seconds per item."""
        return sum(p.latency(peripheral) for p in self.phases) / self.batch

    def energy(self, peripheral: bool = True) -> float:
        """Joules per item."""
        return sum(p.energy(peripheral) for p in self.phases) / self.batch

    @property
    def counts(self) -> dict[str, int]:
        return {
            "gate_issues": sum(p.gate_issues for p in self.phases),
            "write_accesses": sum(p.write_accesses for p in self.phases),
            "read_accesses": sum(p.read_accesses for p in self.phases),
            "activated_lines": sum(p.activated_lines for p in self.phases),
        }

    def energy_components(self) -> dict[str, float]:
        """Whole-batch energy split by mechanism."""
        return {
            "gate": sum(p.gate_energy_j for p in self.phases),
            "write": sum(p.write_energy_j for p in self.phases),
            "read": sum(p.read_energy_j for p in self.phases),
            "peripheral": sum(p.peripheral_energy_j for p in self.phases),
        }


def _comm_bucket(
    comm: CommPlan,
    drain: tuple[int, int] | None,
    overlap: bool,
) -> _Bucket:
    bucket = _Bucket()
    bucket.write_acc += comm.write_accesses
    read_units = 0
    if drain is not None:
        bucket.read_acc += comm.read_accesses
        bucket.read_ones += drain[0]
        bucket.read_cells += drain[1]
        read_units = comm.reads_per_src_tile
    write_units = comm.writes_per_dst_tile
    if overlap:
        # Overlapped streaming hides the shorter direction entirely.
        if read_units <= write_units:
            read_units = 0
        else:
            write_units = 0
    bucket.units_read += read_units
    bucket.units_write += write_units
    return bucket


def run_single_pass(
    weights: NetworkWeights, x: np.ndarray, config: SimConfig
) -> PassResult:
    """Execute one batch through the array model and account every cost."""
    spec = config.mtj
    peri = config.peripheral
    network = weights.spec
    plans = build_plans(network, config)
    x = np.asarray(x, dtype=np.int64)
    batch = len(x)
    cur = x.reshape(batch, -1)
    if plans and cur.shape[1] != plans[0].layer.fan_in and isinstance(plans[0].layer, FcLayer):
        raise ValueError(
            f"input width {cur.shape[1]} does not match first layer "
            f"fan-in {plans[0].layer.fan_in}"
        )

    phases: list[PhaseCost] = []
    if not plans:
        zero = _Bucket()
        phases.append(zero.finalize("input", PhaseKind.COMMUNICATE, "input-write", spec, peri, batch))
        phases.append(_Bucket().finalize("output", PhaseKind.COMMUNICATE, "drain", spec, peri, batch))
        return PassResult(
            config=config,
            plans=plans,
            batch=batch,
            outputs=x.copy(),
            layer_outputs=(),
            phases=tuple(phases),
            memory_bytes=0,
        )

    layer_outputs: list[np.ndarray] = []
    pending_drain: tuple[int, int] | None = None
    prev_plan: LayoutPlan | None = None
    for li, plan in enumerate(plans):
        run = _LayerRun(plan, config, batch)
        run.load_setup(weights, li)
        comm = plan_communication(prev_plan, plan)
        comm_bucket = _comm_bucket(comm, pending_drain, config.overlap_comm)
        run.load_inputs(cur, comm_bucket)
        phases.append(
            comm_bucket.finalize(plan.layer.name, PhaseKind.COMMUNICATE, "input-write", spec, peri, batch)
        )
        buckets = {"wave": _Bucket(), "merge": _Bucket(), "pool": _Bucket()}
        run.run_compute(buckets)
        for detail in ("wave", "merge", "pool"):
            if buckets[detail].touched:
                phases.append(
                    buckets[detail].finalize(plan.layer.name, PhaseKind.COMPUTE, detail, spec, peri, batch)
                )
        cur = run.gather_outputs()
        layer_outputs.append(cur)
        pending_drain = run.drain_popcounts()
        prev_plan = plan
        del run

    drain_bucket = _Bucket()
    last = plans[-1]
    n_reads = last.out_width * last.read_parallelism
    drain_bucket.read_acc += n_reads * last.n_tiles
    drain_bucket.units_read += n_reads
    assert pending_drain is not None
    drain_bucket.read_ones += pending_drain[0]
    drain_bucket.read_cells += pending_drain[1]
    phases.append(drain_bucket.finalize("output", PhaseKind.COMMUNICATE, "drain", spec, peri, batch))

    return PassResult(
        config=config,
        plans=plans,
        batch=batch,
        outputs=cur,
        layer_outputs=tuple(layer_outputs),
        phases=tuple(phases),
        memory_bytes=memory_usage(plans),
    )


# --------------------------------------------------------------------------
# cost report for one run
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CostReport:
    """Totalled costs of one run, with the per-phase breakdown attached."""

    label: str
    batch: int
    peripheral: bool
    total_latency_s: float
    total_energy_j: float
    latency_per_item_s: float
    energy_per_item_j: float
    throughput_per_s: float
    power_w: float
    memory_bytes: int
    phases: tuple[PhaseCost, ...]

    @classmethod
    def from_pass(cls, result: PassResult, peripheral: bool = True, label: str = "run") -> "CostReport":
        total_lat = sum(p.latency(peripheral) for p in result.phases)
        total_en = sum(p.energy(peripheral) for p in result.phases)
        lat_item = total_lat / result.batch
        en_item = total_en / result.batch
        throughput = 1.0 / lat_item if lat_item > 0 else 0.0
        return cls(
            label=label,
            batch=result.batch,
            peripheral=peripheral,
            total_latency_s=total_lat,
            total_energy_j=total_en,
            latency_per_item_s=lat_item,
            energy_per_item_j=en_item,
            throughput_per_s=throughput,
            power_w=throughput * en_item,
            memory_bytes=result.memory_bytes,
            phases=result.phases,
        )


# --------------------------------------------------------------------------
# pipelining
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    """Stage partition and per-stage array replication for a deployment."""

    stage_names: tuple[str, ...]
    stage_layers: tuple[tuple[int, ...], ...]
    replication: tuple[int, ...]
    budget_w: float | None = None

    def __post_init__(self) -> None:
        if not (len(self.stage_names) == len(self.stage_layers) == len(self.replication)):
            raise ValueError("stage names, layer sets, and replication must align")
        if any(r < 1 for r in self.replication):
            raise ValueError("replication factors must be >= 1")

    def to_json_dict(self) -> dict:
        return {
            "stages": [
                {"name": n, "layers": list(ls), "replication": r}
                for n, ls, r in zip(self.stage_names, self.stage_layers, self.replication)
            ],
            "budget_w": self.budget_w,
        }

    @classmethod
    def from_json_dict(cls, data: Mapping) -> "PipelineConfig":
        stages = data["stages"]
        return cls(
            stage_names=tuple(s["name"] for s in stages),
            stage_layers=tuple(tuple(s["layers"]) for s in stages),
            replication=tuple(int(s.get("replication", 1)) for s in stages),
            budget_w=data.get("budget_w"),
        )


def build_pipeline_config(network: NetworkSpec, budget_w: float | None = None) -> PipelineConfig:
    """One stage per layer; fully-connected stacks get an input-fan stage.

    An all-FC network reads its whole input vector into every unit's row
    block before any compute can start, so input distribution earns its own
    pipeline stage; convolutional fronts stream inputs window by window
    inside their first compute stage instead.
    """
    if not network.layers:
        raise ValueError("a pipeline needs at least one layer")
    names: list[str] = []
    layer_sets: list[tuple[int, ...]] = []
    if all(isinstance(l, FcLayer) for l in network.layers):
        names.append("input")
        layer_sets.append(())
    for i, layer in enumerate(network.layers):
        names.append(layer.name)
        layer_sets.append((i,))
    return PipelineConfig(
        stage_names=tuple(names),
        stage_layers=tuple(layer_sets),
        replication=tuple(1 for _ in names),
        budget_w=budget_w,
    )


@dataclass(frozen=True)
class StageCost:
    """Per-item cost of one pipeline stage at replication 1."""

    name: str
    layers: tuple[int, ...]
    device_latency_s: float
    peripheral_latency_s: float
    device_energy_j: float
    peripheral_energy_j: float
    memory_bytes: int

    def latency(self, peripheral: bool = True) -> float:
        return self.device_latency_s + (self.peripheral_latency_s if peripheral else 0.0)

    def energy(self, peripheral: bool = True) -> float:
        return self.device_energy_j + (self.peripheral_energy_j if peripheral else 0.0)


@dataclass(frozen=True)
class PipelineResult:
    """A staged deployment: throughput follows the slowest replicated stage."""

    stages: tuple[StageCost, ...]
    config: PipelineConfig
    batch: int
    source: PassResult | None = field(default=None, repr=False, compare=False)

    def initiation_interval(self, peripheral: bool = True) -> float:
        return max(
            s.latency(peripheral) / r for s, r in zip(self.stages, self.config.replication)
        )

    def throughput(self, peripheral: bool = True) -> float:
        return 1.0 / self.initiation_interval(peripheral)

    def total_latency(self, peripheral: bool = True) -> float:
        return sum(s.latency(peripheral) for s in self.stages)

    def energy_per_item(self, peripheral: bool = True) -> float:
        return sum(s.energy(peripheral) for s in self.stages)

    def power(self, peripheral: bool = True) -> float:
        return self.energy_per_item(peripheral) * self.throughput(peripheral)

    @property
    def memory_bytes(self) -> int:
        return sum(s.memory_bytes * r for s, r in zip(self.stages, self.config.replication))

    def with_replication(self, replication: tuple[int, ...]) -> "PipelineResult":
        return PipelineResult(
            stages=self.stages,
            config=replace(self.config, replication=replication),
            batch=self.batch,
            source=self.source,
        )


def run_pipeline(
    weights: NetworkWeights,
    config: SimConfig,
    *,
    batch: int = 1,
    seed: int = 0,
    pipeline: PipelineConfig | None = None,
) -> PipelineResult:
    """Run one pass and fold its phases into pipeline stages."""
    network = weights.spec
    pcfg = pipeline or build_pipeline_config(network)
    covered = [i for layers in pcfg.stage_layers for i in layers]
    if sorted(covered) != list(range(len(network.layers))):
        raise ValueError("pipeline stages must cover every layer exactly once")
    x = seed_inputs(network, batch, seed)
    result = run_single_pass(weights, x, config)

    stage_of_layer = {
        network.layers[i].name: si
        for si, layers in enumerate(pcfg.stage_layers)
        for i in layers
    }
    input_stage = next((si for si, ls in enumerate(pcfg.stage_layers) if not ls), None)
    first_name = network.layers[0].name
    per_stage = [[0.0, 0.0, 0.0, 0.0] for _ in pcfg.stage_names]
    for phase in result.phases:
        if phase.detail == "drain":
            si = len(pcfg.stage_names) - 1
        elif (
            input_stage is not None
            and phase.layer == first_name
            and phase.kind is PhaseKind.COMMUNICATE
        ):
            si = input_stage
        else:
            si = stage_of_layer[phase.layer]
        acc = per_stage[si]
        acc[0] += phase.device_latency_s
        acc[1] += phase.peripheral_latency_s
        acc[2] += phase.device_energy_j
        acc[3] += phase.peripheral_energy_j
    stages = tuple(
        StageCost(
            name=pcfg.stage_names[si],
            layers=pcfg.stage_layers[si],
            device_latency_s=acc[0] / batch,
            peripheral_latency_s=acc[1] / batch,
            device_energy_j=acc[2] / batch,
            peripheral_energy_j=acc[3] / batch,
            memory_bytes=sum(result.plans[i].memory_bytes for i in pcfg.stage_layers[si]),
        )
        for si, acc in enumerate(per_stage)
    )
    return PipelineResult(stages=stages, config=pcfg, batch=batch, source=result)


@dataclass(frozen=True)
class ScaleStep:
    replication: tuple[int, ...]
    throughput: float
    power_w: float


@dataclass(frozen=True)
class ScalingOutcome:
    config: PipelineConfig
    final: PipelineResult
    steps: tuple[ScaleStep, ...]


def scale_to_power_budget(
    pipeline: PipelineResult, budget_w: float, *, peripheral: bool = True
) -> ScalingOutcome:
    """Greedily replicate the bottleneck stage while power fits the budget.

    Each step duplicates the stage with the largest per-replica latency
    (ties go to the lowest stage index).  Power is energy-per-item times
    throughput, so it only grows when a step actually lifts throughput;
    the search stops when the next step would exceed the budget.
    """
    base_power = pipeline.power(peripheral)
    if budget_w < base_power:
        raise ValueError(
            f"power budget {budget_w} W is below the unreplicated baseline {base_power} W"
        )
    cur = pipeline
    steps = [ScaleStep(cur.config.replication, cur.throughput(peripheral), base_power)]
    while True:
        per_replica = [
            s.latency(peripheral) / r for s, r in zip(cur.stages, cur.config.replication)
        ]
        idx = per_replica.index(max(per_replica))
        reps = list(cur.config.replication)
        reps[idx] += 1
        candidate = cur.with_replication(tuple(reps))
        if candidate.power(peripheral) > budget_w:
            break
        cur = candidate
        steps.append(ScaleStep(cur.config.replication, cur.throughput(peripheral), cur.power(peripheral)))
    final_config = replace(cur.config, budget_w=budget_w)
    return ScalingOutcome(config=final_config, final=cur.with_replication(cur.config.replication), steps=tuple(steps))


# --------------------------------------------------------------------------
# benchmark grid
# --------------------------------------------------------------------------

CONFIG_LABELS = (
    "F-I-1024",
    "F-P-1024",
    "F-I-2048",
    "F-P-2048",
    "M-I-1024",
    "M-P-1024",
    "M-I-2048",
    "M-P-2048",
)

GRID_LABELS = (
    "F-I-1024",
    "F-P-1024",
    "F-I-2048",
    "F-P-2048",
    "M-I-1024",
)


@dataclass(frozen=True)
class BenchmarkRow:
    benchmark: str
    latency: dict[str, float]
    energy: dict[str, float]
    memory_bytes: dict[str, int]
    fpga_latency_s: float | None
    fpga_energy_j: float | None


@dataclass(frozen=True)
class BenchmarkReport:
    rows: tuple[BenchmarkRow, ...]
    gpu: dict[str, float]
    version: str
    batch: int
    seed: int


def _benchmark_row(name: str, weights: NetworkWeights, batch: int, seed: int) -> BenchmarkRow:
    latency: dict[str, float] = {}
    energy: dict[str, float] = {}
    memory: dict[str, int] = {}
    x = seed_inputs(weights.spec, batch, seed)
    for sname, spec in (("F", make_future_spec()), ("M", make_modern_spec())):
        for tile in (1024, 2048):
            config = SimConfig(
                mtj=spec,
                tile_rows=tile,
                peripheral=default_peripheral(spec, tile),
            )
            result = run_single_pass(weights, x, config)
            latency[f"{sname}-I-{tile}"] = result.latency(peripheral=False)
            latency[f"{sname}-P-{tile}"] = result.latency(peripheral=True)
            energy[f"{sname}-I-{tile}"] = result.energy(peripheral=False)
            energy[f"{sname}-P-{tile}"] = result.energy(peripheral=True)
            memory[f"{sname}-I-{tile}"] = result.memory_bytes
            memory[f"{sname}-P-{tile}"] = result.memory_bytes
    ref = reference_constants().get(name, {})
    return BenchmarkRow(
        benchmark=name,
        latency=latency,
        energy=energy,
        memory_bytes=memory,
        fpga_latency_s=ref.get("fpga_latency_s"),
        fpga_energy_j=ref.get("fpga_energy_j"),
    )


def run_benchmarks(
    names: Iterable[str] | None = None,
    *,
    networks: Mapping[str, NetworkWeights] | None = None,
    batch: int = 1,
    seed: int = 0,
    workers: int = 1,
) -> BenchmarkReport:
    """Run the benchmark grid; order and numbers are worker-independent."""
    tasks: list[tuple[str, NetworkWeights]] = []
    if networks is not None:
        tasks.extend(networks.items())
    elif names is None:
        names = preset_names()
    if names is not None:
        for name in names:
            tasks.append((name, seed_weights(make_preset(name), seed)))

    def job(task: tuple[str, NetworkWeights]) -> BenchmarkRow:
        return _benchmark_row(task[0], task[1], batch, seed)

    if workers > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = tuple(pool.map(job, tasks))
    else:
        rows = tuple(job(t) for t in tasks)
    return BenchmarkReport(
        rows=rows,
        gpu=reference_constants().get("gpu", {}),
        version=__version__,
        batch=batch,
        seed=seed,
    )


# --------------------------------------------------------------------------
# report emission
# --------------------------------------------------------------------------

def _fmt(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def _benchmark_csv(report: BenchmarkReport) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["benchmark", "metric", "FPGA-ref", *GRID_LABELS])
    for row in report.rows:
        writer.writerow(
            [row.benchmark, "latency", _fmt(row.fpga_latency_s)]
            + [_fmt(row.latency[l]) for l in GRID_LABELS]
        )
        writer.writerow(
            [row.benchmark, "energy", _fmt(row.fpga_energy_j)]
            + [_fmt(row.energy[l]) for l in GRID_LABELS]
        )
    return buf.getvalue().encode()


def _benchmark_json(report: BenchmarkReport) -> bytes:
    data = {
        "version": report.version,
        "batch": report.batch,
        "seed": report.seed,
        "gpu": report.gpu,
        "rows": [
            {
                "benchmark": row.benchmark,
                "latency_per_item": row.latency,
                "energy_per_item": row.energy,
                "memory_bytes": row.memory_bytes,
                "fpga_latency_s": row.fpga_latency_s,
                "fpga_energy_j": row.fpga_energy_j,
            }
            for row in report.rows
        ],
    }
    return (json.dumps(data, sort_keys=True, indent=2) + "\n").encode()


def _cost_csv(report: CostReport) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "kind", "detail", "latency_s", "energy_j"])
    peripheral = report.peripheral
    for p in report.phases:
        writer.writerow(
            [p.layer, p.kind.value, p.detail, _fmt(p.latency(peripheral)), _fmt(p.energy(peripheral))]
        )
    writer.writerow(
        ["total", "", "", _fmt(report.total_latency_s), _fmt(report.total_energy_j)]
    )
    return buf.getvalue().encode()


def _cost_json(report: CostReport) -> bytes:
    peripheral = report.peripheral
    data = {
        "version": __version__,
        "label": report.label,
        "batch": report.batch,
        "peripheral": report.peripheral,
        "total_latency_s": report.total_latency_s,
        "total_energy_j": report.total_energy_j,
        "latency_per_item_s": report.latency_per_item_s,
        "energy_per_item_j": report.energy_per_item_j,
        "throughput_per_s": report.throughput_per_s,
        "power_w": report.power_w,
        "memory_bytes": report.memory_bytes,
        "phases": [
            {
                "layer": p.layer,
                "kind": p.kind.value,
                "detail": p.detail,
                "latency_s": p.latency(peripheral),
                "energy_j": p.energy(peripheral),
                "gate_issues": p.gate_issues,
                "write_accesses": p.write_accesses,
                "read_accesses": p.read_accesses,
                "activated_lines": p.activated_lines,
            }
            for p in report.phases
        ],
    }
    return (json.dumps(data, sort_keys=True, indent=2) + "\n").encode()


def emit_report(report: BenchmarkReport | CostReport, format: str = "json") -> bytes:
    """Serialize a report; CSV and JSON carry the same numbers."""
    if format == "csv":
        if isinstance(report, BenchmarkReport):
            return _benchmark_csv(report)
        return _cost_csv(report)
    if format == "json":
        if isinstance(report, BenchmarkReport):
            return _benchmark_json(report)
        return _cost_json(report)
    raise ValueError(f"unknown report format {format!r} (expected 'csv' or 'json')")
