"""Oracle tests for the vectorized network simulator.

The central oracle is a deliberately slow scalar re-execution of a compiled
plan: it walks the row program cell by cell with plain Python loops and
recomputes every cost from the electrical primitives (voltage windows,
combined resistances, state-dependent write/read energies).  The engine's
bit-packed implementation must agree exactly on both the bits and the
tallies.  Functional correctness against the pure reference model, pipeline
algebra, and report determinism are covered separately.
"""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinpim.array_core import CellVariant, PeripheralModel
from spinpim.bnn_kernels import GateSet
from spinpim.device_models import make_future_spec, make_modern_spec, resistance
from spinpim.gate_engine import combined_resistance, truth_table, voltage_window
from spinpim.layout_compiler import (
    ConvLayer,
    FcLayer,
    RowOpKind,
    plan_communication,
)
from spinpim.reference_bnn import (
    NetworkSpec,
    forward,
    make_preset,
    seed_inputs,
    seed_weights,
)
from spinpim.sim_engine import (
    GRID_LABELS,
    PhaseKind,
    PipelineConfig,
    PipelineResult,
    SimConfig,
    StageCost,
    build_pipeline_config,
    build_plans,
    default_peripheral,
    emit_report,
    load_peripheral_factors,
    reference_constants,
    run_benchmarks,
    run_pipeline,
    run_single_pass,
    scale_to_power_budget,
)

MODERN = make_modern_spec()
FUTURE = make_future_spec()


def _config(**kw):
    defaults = dict(
        mtj=MODERN,
        tile_rows=1024,
        cell_variant=CellVariant.ONE_T_TRANSPOSED,
        gate_set=GateSet.RESTRICTED,
        peripheral=PeripheralModel.disabled(),
    )
    defaults.update(kw)
    return SimConfig(**defaults)


def _tiny_net(**layer_kw):
    kw = dict(name="fc", n_in=6, n_out=3, binarize=True)
    kw.update(layer_kw)
    return NetworkSpec(name="tiny", layers=(FcLayer(**kw),))


def _flat(reference_output):
    return np.asarray(reference_output).reshape(len(reference_output), -1)


# --------------------------------------------------------------------------
# scalar cost oracle
# --------------------------------------------------------------------------

class ScalarTally:
    def __init__(self):
        self.gate_issues = 0
        self.write_accesses = 0
        self.read_accesses = 0
        self.activated_lines = 0
        self.gate_energy = 0.0
        self.write_energy = 0.0
        self.read_energy = 0.0
        self.latency_units = {"gate": 0, "write": 0, "read": 0}


def _scalar_pass(plans, weights, x, config):
    """Re-execute a compiled network with plain loops; return bits + costs.

    Only supports sigma=1.  Costs follow the engine's conventions: gate
    energy is signature^2/R_total(inputs) x t_switch per driven row, writes
    cost (1.5 i_c)^2 R(final) t per flipped cell, reads sense every cell of
    the touched physical row, and transposed-cell word lines recharge when a
    gate's operand column set changes.
    """
    spec = config.mtj
    one_t = config.cell_variant is CellVariant.ONE_T_TRANSPOSED
    t = spec.t_switch
    i_w = 1.5 * spec.i_c
    tally = ScalarTally()
    cur = np.asarray(x, dtype=np.int64).reshape(len(x), -1)
    outs = []
    for li, plan in enumerate(plans):
        layer = plan.layer
        g, share = plan.g, plan.share
        rows = plan.rows_total
        masks = plan.row_masks()
        rows_per_tile = plan.groups_per_tile * g
        n_tiles = plan.n_tiles
        plane_sz = 1 if isinstance(layer, FcLayer) else layer.out_x * layer.out_y
        taps = layer.fan_in
        srcs = layer.tap_sources(np.arange(plan.layer_groups))
        comm = plan_communication(plans[li - 1] if li else None, plan)
        theta = weights.thetas[li]
        scale = weights.scales[li]
        batch_out = []

        def busiest(sel):
            return max(
                int(np.sum((sel >= k * rows_per_tile) & (sel < (k + 1) * rows_per_tile)))
                for k in range(n_tiles)
            )

        for item in range(len(cur)):
            state = np.zeros((rows, plan.program.high_water_col + 4), dtype=np.int64)
            # --- setup (never costed): weights, thresholds, scales
            for grp in range(plan.layer_groups):
                unit = grp if isinstance(layer, FcLayer) else grp // plane_sz
                wrow = weights.weights[li][unit].ravel()
                for r_off in range(g):
                    r = grp * g + r_off
                    for s in range(share):
                        tap = r_off * share + s
                        bit = int(wrow[tap]) if tap < taps else 1
                        state[r, plan.weight_col(s)] = bit
                if theta is not None:
                    for bi, col in enumerate(plan.theta_cols):
                        state[grp * g, col] = (int(theta[unit]) >> bi) & 1
                if scale is not None:
                    for bi, col in enumerate(plan.scale_cols):
                        state[grp * g, col] = (int(scale[unit]) >> bi) & 1
            # --- communicate: load input copies (write accesses + flips)
            tally.write_accesses += comm.write_accesses
            tally.latency_units["write"] += comm.writes_per_dst_tile
            if li:
                tally.read_accesses += comm.read_accesses
                tally.latency_units["read"] += comm.reads_per_src_tile
            for grp in range(plan.layer_groups):
                for r_off in range(g):
                    r = grp * g + r_off
                    for s in range(share):
                        tap = r_off * share + s
                        src = int(srcs[grp, tap]) if tap < taps else -1
                        val = int(cur[item, src]) if src >= 0 else 0
                        for b in range(layer.input_bits):
                            bit = (val >> b) & 1
                            col = plan.input_col(b, s)
                            if state[r, col] != bit:
                                tally.write_energy += i_w**2 * resistance(spec, bit) * t
                            state[r, col] = bit
            # --- compute: walk the row template (one wave at sigma=1)
            prev_lines = None
            prev_mask = None
            for op in plan.program.wave_ops + plan.program.post_ops:
                sel = np.flatnonzero(masks[op.mask])
                if op.kind is RowOpKind.GATE:
                    win = voltage_window(spec, op.gate)
                    table = truth_table(op.gate.kind, op.gate.fan_in)
                    *ins, out_col = op.cols
                    for r in sel:
                        bits = [int(state[r, c]) for c in ins]
                        r_tot = combined_resistance(spec, bits, op.gate.preset_bit)
                        tally.gate_energy += win.signature**2 / r_tot * t
                        combo = sum(b << i for i, b in enumerate(bits))
                        state[r, out_col] = table[combo]
                    tally.gate_issues += n_tiles
                    tally.latency_units["gate"] += 1
                    if one_t:
                        lines = frozenset(op.cols)
                        if lines != prev_lines:
                            tally.activated_lines += len(lines) * n_tiles
                            prev_lines = lines
                    else:
                        if op.mask != prev_mask:
                            tally.activated_lines += len(sel)
                            prev_mask = op.mask
                elif op.kind is RowOpKind.WRITE:
                    for r in sel:
                        if state[r, op.cols[0]] != op.bit:
                            tally.write_energy += i_w**2 * resistance(spec, op.bit) * t
                        state[r, op.cols[0]] = op.bit
                    if one_t:
                        tally.write_accesses += n_tiles
                        tally.latency_units["write"] += 1
                    else:
                        tally.write_accesses += len(sel)
                        tally.latency_units["write"] += busiest(sel)
                else:  # MOVE
                    src_col, dst_col = op.cols
                    vals = {r: int(state[r + op.row_delta, src_col]) for r in sel}
                    if one_t:
                        ones = int(state[:, src_col].sum())
                        tally.read_energy += (spec.i_c / 2) ** 2 * t * (
                            ones * spec.r_ap
                            + (n_tiles * config.tile_rows - ones) * spec.r_p
                        )
                        tally.read_accesses += n_tiles
                        tally.write_accesses += n_tiles
                        tally.latency_units["read"] += 1
                        tally.latency_units["write"] += 1
                    else:
                        for r in sel:
                            ones = int(state[r + op.row_delta].sum())
                            tally.read_energy += (spec.i_c / 2) ** 2 * t * (
                                ones * spec.r_ap
                                + (config.tile_rows - ones) * spec.r_p
                            )
                        tally.read_accesses += len(sel)
                        tally.write_accesses += len(sel)
                        tally.latency_units["read"] += busiest(sel)
                        tally.latency_units["write"] += busiest(sel)
                    for r in sel:
                        if state[r, dst_col] != vals[r]:
                            tally.write_energy += i_w**2 * resistance(spec, vals[r]) * t
                        state[r, dst_col] = vals[r]
            # --- gather outputs
            flat_map = plan.out_flat_map()
            vals_out = np.zeros(plan.out_units, dtype=np.int64)
            if plan.pooled:
                lead = np.flatnonzero(masks["pool_leader"])
                for k, r in enumerate(lead):
                    vals_out[flat_map[k]] = state[r, plan.out_cols[0]]
            elif layer.binarize:
                lead = np.flatnonzero(masks["leader"])
                for grp, r in enumerate(lead):
                    vals_out[flat_map[grp]] = state[r, plan.out_cols[0]]
            else:
                lead = np.flatnonzero(masks["leader"])
                for grp, r in enumerate(lead):
                    v = 0
                    for bi, c in enumerate(plan.out_cols):
                        v |= int(state[r, c]) << bi
                    vals_out[flat_map[grp]] = v
            batch_out.append(vals_out)
            # --- drain reads (inner layer drains are counted via comm above)
            n_cells = plan.n_tiles * config.tile_rows
            if li == len(plans) - 1:
                n_reads = plan.out_width * plan.read_parallelism
                tally.read_accesses += n_reads * plan.n_tiles
                tally.latency_units["read"] += n_reads
            for c in plan.out_cols:
                ones = int(state[:, c].sum())
                tally.read_energy += (spec.i_c / 2) ** 2 * t * (
                    ones * spec.r_ap + (n_cells - ones) * spec.r_p
                )
        cur = np.stack(batch_out)
        outs.append(cur)
    return outs[-1], tally


class TestScalarOracle:
    @pytest.mark.parametrize("variant", [CellVariant.ONE_T_TRANSPOSED, CellVariant.THREE_T])
    def test_costs_match_scalar_walk(self, variant):
        net = _tiny_net(n_in=6, n_out=3)
        weights = seed_weights(net, seed=3)
        x = seed_inputs(net, batch=2, seed=5)
        cfg = _config(cell_variant=variant)
        plans = build_plans(net, cfg)
        want_out, tally = _scalar_pass(plans, weights, x, cfg)
        res = run_single_pass(weights, x, cfg)
        assert np.array_equal(res.outputs, want_out)
        assert res.counts["gate_issues"] == tally.gate_issues
        assert res.counts["write_accesses"] == tally.write_accesses
        assert res.counts["read_accesses"] == tally.read_accesses
        assert res.counts["activated_lines"] == tally.activated_lines
        device = res.energy_components()
        assert device["gate"] == pytest.approx(tally.gate_energy, rel=1e-9)
        assert device["write"] == pytest.approx(tally.write_energy, rel=1e-9)
        assert device["read"] == pytest.approx(tally.read_energy, rel=1e-9)
        want_lat = sum(tally.latency_units.values()) / len(x) * cfg.mtj.t_switch
        assert res.latency() == pytest.approx(want_lat, rel=1e-12)

    def test_multibit_scale_factors_and_two_tiles(self):
        layer = FcLayer(name="fc", n_in=4, n_out=1030, input_bits=2, scale_bits=2)
        net = NetworkSpec(name="tiny2", layers=(layer,))
        weights = seed_weights(net, seed=11)
        x = seed_inputs(net, batch=1, seed=7)
        cfg = _config(mtj=FUTURE)
        plans = build_plans(net, cfg)
        assert plans[0].n_tiles == 2
        want_out, tally = _scalar_pass(plans, weights, x, cfg)
        res = run_single_pass(weights, x, cfg)
        assert np.array_equal(res.outputs, want_out)
        assert res.counts["write_accesses"] == tally.write_accesses
        assert res.counts["activated_lines"] == tally.activated_lines
        device = res.energy_components()
        assert device["gate"] == pytest.approx(tally.gate_energy, rel=1e-9)
        assert device["write"] == pytest.approx(tally.write_energy, rel=1e-9)
        assert device["read"] == pytest.approx(tally.read_energy, rel=1e-9)
        want_lat = sum(tally.latency_units.values()) * cfg.mtj.t_switch
        assert res.latency() == pytest.approx(want_lat, rel=1e-12)

    def test_peripheral_components_are_counts_times_factors(self):
        net = _tiny_net()
        weights = seed_weights(net, seed=0)
        x = seed_inputs(net, batch=1, seed=0)
        factors = {
            "row_activate_latency": 0.0,
            "gate_issue_latency": 0.67,
            "read_latency": 0.67,
            "write_latency": 0.67,
            "row_activate_energy": 2.0,
            "gate_issue_energy": 3.0,
            "read_energy": 5.0,
            "write_energy": 7.0,
        }
        peri = PeripheralModel.from_factors(MODERN, factors)
        cfg = _config(peripheral=peri)
        res = run_single_pass(weights, x, cfg)
        c = res.counts
        unit = (1.5 * MODERN.i_c) ** 2 * MODERN.r_p * MODERN.t_switch
        want = (
            c["activated_lines"] * 2.0
            + c["gate_issues"] * 3.0
            + c["read_accesses"] * 5.0
            + c["write_accesses"] * 7.0
        ) * unit
        extra = res.energy(peripheral=True) - res.energy(peripheral=False)
        assert extra * res.batch == pytest.approx(want, rel=1e-12)


# --------------------------------------------------------------------------
# functional equivalence with the reference model
# --------------------------------------------------------------------------

def _mixed_net():
    conv1 = ConvLayer(
        name="c1", in_x=4, in_y=4, in_z=2, filters=3, kx=2, ky=2, pad_x=1,
        pad_y=1, pool_kx=2, pool_ky=2, pool_stride=2, input_bits=2,
    )
    conv2 = ConvLayer(
        name="c2",
        in_x=conv1.pool_out_x,
        in_y=conv1.pool_out_y,
        in_z=conv1.filters,
        filters=4,
        kx=2,
        ky=2,
        scale_bits=3,
    )
    n_flat = conv2.out_x * conv2.out_y * conv2.filters
    fc = FcLayer(name="fc", n_in=n_flat, n_out=5, binarize=False, out_bits=8)
    return NetworkSpec(name="mixed", layers=(conv1, conv2, fc))


class TestBitExactness:
    @pytest.mark.parametrize("variant", [CellVariant.ONE_T_TRANSPOSED, CellVariant.THREE_T])
    @pytest.mark.parametrize("sigma", [1, 2])
    def test_mixed_network_matches_reference(self, variant, sigma):
        net = _mixed_net()
        weights = seed_weights(net, seed=9)
        x = seed_inputs(net, batch=3, seed=2)
        cfg = _config(cell_variant=variant, sigma=sigma)
        res = run_single_pass(weights, x, cfg)
        want = _flat(forward(weights, x))
        assert np.array_equal(res.outputs, want)
        ref_layers = forward(weights, x, collect=True)
        for got, ref in zip(res.layer_outputs, ref_layers):
            assert np.array_equal(got, _flat(ref))

    def test_future_spec_and_gate_sets(self):
        net = _tiny_net(n_in=10, n_out=4)
        weights = seed_weights(net, seed=4)
        x = seed_inputs(net, batch=2, seed=4)
        want = _flat(forward(weights, x))
        for gate_set in (GateSet.RESTRICTED, GateSet.EXTENDED):
            res = run_single_pass(weights, x, _config(mtj=FUTURE, gate_set=gate_set))
            assert np.array_equal(res.outputs, want)

    def test_g_override_and_sigma_preserve_bits(self):
        net = _tiny_net(n_in=12, n_out=6)
        weights = seed_weights(net, seed=8)
        x = seed_inputs(net, batch=2, seed=1)
        want = _flat(forward(weights, x))
        base = run_single_pass(weights, x, _config())
        over = run_single_pass(weights, x, _config(g={"fc": 3}, sigma=3))
        assert np.array_equal(base.outputs, want)
        assert np.array_equal(over.outputs, want)
        assert over.plans[0].g == 3

    def test_overlapping_pool_windows_straddle_tiles(self):
        conv = ConvLayer(
            name="c", in_x=12, in_y=12, in_z=2, filters=8, kx=3, ky=3,
            pad_x=1, pad_y=1, pool_kx=3, pool_ky=3, pool_stride=2,
        )
        fc = FcLayer(
            name="fc", n_in=conv.pool_out_x * conv.pool_out_y * conv.filters, n_out=7
        )
        net = NetworkSpec(name="straddle", layers=(conv, fc))
        weights = seed_weights(net, seed=13)
        x = seed_inputs(net, batch=2, seed=13)
        cfg = _config()
        plans = build_plans(net, cfg)
        assert plans[0].n_tiles >= 2  # pool windows must cross the tile seam
        res = run_single_pass(weights, x, cfg)
        assert np.array_equal(res.outputs, _flat(forward(weights, x)))

    @settings(max_examples=15, deadline=None)
    @given(
        n_in=st.integers(2, 12),
        n_out=st.integers(1, 6),
        bits=st.integers(1, 3),
        seed=st.integers(0, 2**31),
    )
    def test_random_fc_layers(self, n_in, n_out, bits, seed):
        net = NetworkSpec(
            name="rand",
            layers=(
                FcLayer(name="a", n_in=n_in, n_out=n_out, input_bits=bits),
                FcLayer(name="b", n_in=n_out, n_out=3, binarize=False),
            ),
        )
        weights = seed_weights(net, seed=seed)
        x = seed_inputs(net, batch=2, seed=seed ^ 0xABCD)
        res = run_single_pass(weights, x, _config())
        assert np.array_equal(res.outputs, _flat(forward(weights, x)))

    def test_empty_network_costs_only_io(self):
        net = NetworkSpec(name="empty", layers=())
        weights = seed_weights(net, seed=0)
        x = np.ones((2, 4), dtype=np.int64)
        res = run_single_pass(weights, x, _config())
        assert np.array_equal(res.outputs, x)
        assert {p.kind for p in res.phases} == {PhaseKind.COMMUNICATE}
        assert res.latency() == 0.0 and res.energy() == 0.0

    def test_chunked_loading_is_invisible(self, monkeypatch):
        """Group-chunked state loading must change neither bits nor costs."""
        import spinpim.sim_engine as se

        conv = ConvLayer(name="c", in_x=8, in_y=8, in_z=2, filters=5, kx=3, ky=3)
        fc = FcLayer(name="fc", n_in=conv.out_x * conv.out_y * conv.filters, n_out=9)
        net = NetworkSpec(name="chunky", layers=(conv, fc))
        weights = seed_weights(net, seed=21)
        x = seed_inputs(net, batch=2, seed=5)
        cfg = _config()
        whole = run_single_pass(weights, x, cfg)
        monkeypatch.setattr(se, "_LOAD_CHUNK_GROUPS", 64)
        assert build_plans(net, cfg)[0].layer_groups > 128  # several chunks + tail
        split = run_single_pass(weights, x, cfg)
        assert np.array_equal(whole.outputs, split.outputs)
        assert whole.phases == split.phases


# --------------------------------------------------------------------------
# cost laws
# --------------------------------------------------------------------------

class TestCostLaws:
    def test_phase_conservation_and_kinds(self):
        net = _mixed_net()
        weights = seed_weights(net, seed=1)
        x = seed_inputs(net, batch=2, seed=3)
        cfg = _config(peripheral=default_peripheral(MODERN, 1024))
        res = run_single_pass(weights, x, cfg)
        for peripheral in (False, True):
            total_lat = sum(p.latency(peripheral) for p in res.phases)
            total_en = sum(p.energy(peripheral) for p in res.phases)
            assert res.latency(peripheral) == pytest.approx(total_lat / res.batch, rel=1e-12)
            assert res.energy(peripheral) == pytest.approx(total_en / res.batch, rel=1e-12)
        assert {p.kind for p in res.phases} == {PhaseKind.COMPUTE, PhaseKind.COMMUNICATE}
        for layer in net.layers:
            kinds = {p.kind for p in res.phases if p.layer == layer.name}
            assert PhaseKind.COMPUTE in kinds and PhaseKind.COMMUNICATE in kinds
        details = {p.detail for p in res.phases}
        assert "pool" in details
        assert "input-write" in details and "drain" in details

    def test_device_energy_exactly_sigma_invariant(self):
        net = _tiny_net(n_in=16, n_out=8)
        weights = seed_weights(net, seed=2)
        x = seed_inputs(net, batch=2, seed=2)
        runs = [run_single_pass(weights, x, _config(sigma=s)) for s in (1, 2, 4)]
        base = runs[0]
        for other in runs[1:]:
            assert np.array_equal(base.outputs, other.outputs)
            assert base.energy() == other.energy()  # exact: integer tallies
            assert other.latency() > base.latency()

    def test_peripheral_strictly_increases_and_preserves_bits(self):
        net = _tiny_net()
        weights = seed_weights(net, seed=6)
        x = seed_inputs(net, batch=1, seed=6)
        ideal = run_single_pass(weights, x, _config())
        peri = run_single_pass(weights, x, _config(peripheral=default_peripheral(MODERN, 1024)))
        assert np.array_equal(ideal.outputs, peri.outputs)
        assert peri.latency(peripheral=True) > peri.latency(peripheral=False)
        assert peri.energy(peripheral=True) > peri.energy(peripheral=False)
        assert ideal.latency(peripheral=True) == ideal.latency(peripheral=False)

    def test_shipped_latency_factors_give_exact_ratio(self):
        net = _tiny_net(n_in=20, n_out=10)
        weights = seed_weights(net, seed=1)
        x = seed_inputs(net, batch=1, seed=1)
        for spec in (MODERN, FUTURE):
            cfg = _config(mtj=spec, peripheral=default_peripheral(spec, 1024))
            res = run_single_pass(weights, x, cfg)
            ratio = res.latency(peripheral=True) / res.latency(peripheral=False)
            assert ratio == pytest.approx(1.67, abs=1e-9)

    def test_overlap_flag_reduces_communication_latency(self):
        net = NetworkSpec(
            name="two",
            layers=(
                FcLayer(name="a", n_in=8, n_out=8),
                FcLayer(name="b", n_in=8, n_out=4),
            ),
        )
        weights = seed_weights(net, seed=5)
        x = seed_inputs(net, batch=1, seed=5)
        serial = run_single_pass(weights, x, _config())
        overlap = run_single_pass(weights, x, _config(overlap_comm=True))
        assert overlap.latency() < serial.latency()
        assert np.array_equal(serial.outputs, overlap.outputs)
        assert serial.energy() == overlap.energy()

    def test_deterministic_repr_across_runs(self):
        net = _tiny_net()
        weights = seed_weights(net, seed=7)
        x = seed_inputs(net, batch=2, seed=7)
        a = run_single_pass(weights, x, _config())
        b = run_single_pass(weights, x, _config())
        assert [repr(p) for p in a.phases] == [repr(p) for p in b.phases]


# --------------------------------------------------------------------------
# pipelining
# --------------------------------------------------------------------------

class TestPipeline:
    @pytest.mark.parametrize(
        "preset,stages",
        [
            ("fpbnn-mnist", 5),
            ("finn-mnist", 5),
            ("fpbnn-cifar", 9),
            ("finn-cifar", 9),
            ("alexnet-xnor", 8),
            ("bionet", 4),
        ],
    )
    def test_stage_counts(self, preset, stages):
        cfg = build_pipeline_config(make_preset(preset))
        assert len(cfg.stage_names) == stages
        assert all(r == 1 for r in cfg.replication)

    def test_single_item_pipeline_matches_single_pass(self):
        net = _tiny_net(n_in=10, n_out=4)
        weights = seed_weights(net, seed=3)
        cfg = _config()
        pipe = run_pipeline(weights, cfg, batch=1, seed=0)
        x = seed_inputs(net, batch=1, seed=0)
        res = run_single_pass(weights, x, cfg)
        assert pipe.total_latency() == pytest.approx(res.latency(), rel=1e-12)
        assert pipe.energy_per_item() == pytest.approx(res.energy(), rel=1e-12)

    def test_throughput_power_algebra(self):
        net = _mixed_net()
        weights = seed_weights(net, seed=2)
        pipe = run_pipeline(weights, _config(), batch=1, seed=1)
        lats = [s.latency(False) for s in pipe.stages]
        assert pipe.initiation_interval(False) == pytest.approx(max(lats), rel=1e-12)
        assert pipe.throughput(False) == pytest.approx(1.0 / max(lats), rel=1e-12)
        assert pipe.power(False) == pytest.approx(
            pipe.energy_per_item(False) * pipe.throughput(False), rel=1e-12
        )

    def test_replication_invariance_and_bottleneck(self):
        net = _mixed_net()
        weights = seed_weights(net, seed=2)
        pipe = run_pipeline(weights, _config(), batch=1, seed=1)
        lats = [s.latency(False) for s in pipe.stages]
        bottleneck = lats.index(max(lats))
        reps = [1] * len(lats)
        reps[bottleneck] = 2
        boosted = pipe.with_replication(tuple(reps))
        assert boosted.throughput(False) > pipe.throughput(False)
        drift = abs(boosted.energy_per_item(False) - pipe.energy_per_item(False))
        assert drift <= 1e-9 * pipe.energy_per_item(False)
        assert boosted.memory_bytes > pipe.memory_bytes

    def _synthetic(self, lats, energy=1.0):
        stages = tuple(
            StageCost(
                name=f"s{i}",
                layers=(i,),
                device_latency_s=lat,
                peripheral_latency_s=0.0,
                device_energy_j=energy / len(lats),
                peripheral_energy_j=0.0,
                memory_bytes=100,
            )
            for i, lat in enumerate(lats)
        )
        config = PipelineConfig(
            stage_names=tuple(s.name for s in stages),
            stage_layers=tuple(s.layers for s in stages),
            replication=tuple(1 for _ in stages),
        )
        return PipelineResult(stages=stages, config=config, batch=1)

    def test_greedy_scaling_monotone_and_bounded(self):
        pipe = self._synthetic([4.0, 2.0, 1.0], energy=8.0)
        base_power = pipe.power(False)
        outcome = scale_to_power_budget(pipe, base_power * 3.5, peripheral=False)
        thr = [s.throughput for s in outcome.steps]
        pwr = [s.power_w for s in outcome.steps]
        assert thr == sorted(thr)
        assert all(p <= base_power * 3.5 + 1e-12 for p in pwr)
        assert outcome.final.power(False) <= base_power * 3.5
        assert outcome.final.throughput(False) > pipe.throughput(False)
        assert outcome.config.replication[0] > 1  # bottleneck got the arrays

    def test_greedy_tie_breaks_to_lowest_index(self):
        pipe = self._synthetic([2.0, 2.0, 1.0], energy=2.0)
        outcome = scale_to_power_budget(pipe, pipe.power(False) * 1.9, peripheral=False)
        first = next(s for s in outcome.steps if s.replication != (1, 1, 1))
        assert first.replication == (2, 1, 1)

    def test_budget_at_base_returns_base(self):
        pipe = self._synthetic([3.0, 1.0])
        outcome = scale_to_power_budget(pipe, pipe.power(False), peripheral=False)
        assert outcome.config.replication == (1, 1)

    def test_budget_below_base_raises(self):
        pipe = self._synthetic([3.0, 1.0])
        with pytest.raises(ValueError):
            scale_to_power_budget(pipe, pipe.power(False) * 0.5, peripheral=False)


# --------------------------------------------------------------------------
# reports and shipped constants
# --------------------------------------------------------------------------

class TestReportsAndConstants:
    def test_reference_constants_frozen(self):
        ref = reference_constants()
        assert ref["fpbnn-cifar"]["fpga_latency_s"] == 1.3e-4
        assert ref["fpbnn-mnist"]["fpga_latency_s"] == 3.39e-6
        assert ref["finn-cifar"]["fpga_energy_j"] == 5.34e-4
        assert ref["finn-mnist"]["fpga_energy_j"] == 1.45e-5
        assert ref["alexnet-xnor"]["fpga_latency_s"] == 1.16e-3
        assert ref["bionet"]["fpga_latency_s"] == 9.95e-8
        assert ref["gpu"]["k40_latency_s"] == 0.113
        assert ref["gpu"]["k40_energy_j"] == 26.5
        assert ref["gpu"]["k40_power_w"] == 235.0

    def test_shipped_peripheral_factors(self):
        for name in ("modern", "future"):
            f = load_peripheral_factors(name, 1024)
            assert f["gate_issue_latency"] == 0.67
            assert f["read_latency"] == 0.67
            assert f["write_latency"] == 0.67
            assert f["row_activate_latency"] == 0.0
            assert all(v >= 0 for v in f.values())

    def test_grid_labels(self):
        assert GRID_LABELS == (
            "F-I-1024",
            "F-P-1024",
            "F-I-2048",
            "F-P-2048",
            "M-I-1024",
        )

    def test_empty_report_is_header_only(self):
        report = run_benchmarks(names=[])
        csv_bytes = emit_report(report, "csv")
        lines = csv_bytes.decode().strip().splitlines()
        assert len(lines) == 1
        header = lines[0].split(",")
        assert header[:2] == ["benchmark", "metric"]
        assert header[2] == "FPGA-ref"
        assert tuple(header[3:8]) == GRID_LABELS

    def test_unknown_format_rejected(self):
        report = run_benchmarks(names=[])
        with pytest.raises(ValueError):
            emit_report(report, "xml")

    def test_benchmark_report_deterministic_and_worker_independent(self):
        nets = {
            "tiny-a": seed_weights(_tiny_net(n_in=6, n_out=3), seed=0),
            "tiny-b": seed_weights(_mixed_net(), seed=0),
        }
        one = run_benchmarks(networks=nets, batch=1, workers=1)
        two = run_benchmarks(networks=nets, batch=1, workers=3)
        assert emit_report(one, "csv") == emit_report(two, "csv")
        assert emit_report(one, "json") == emit_report(two, "json")
        data = json.loads(emit_report(one, "json"))
        assert [row["benchmark"] for row in data["rows"]] == ["tiny-a", "tiny-b"]

    def test_csv_and_json_agree_numerically(self):
        nets = {"tiny": seed_weights(_tiny_net(), seed=1)}
        report = run_benchmarks(networks=nets, batch=1)
        data = json.loads(emit_report(report, "json"))
        csv_lines = emit_report(report, "csv").decode().strip().splitlines()
        header = csv_lines[0].split(",")
        for line in csv_lines[1:]:
            row = dict(zip(header, line.split(",")))
            json_row = next(
                r for r in data["rows"] if r["benchmark"] == row["benchmark"]
            )
            for label in GRID_LABELS:
                assert float(row[label]) == json_row[row["metric"] + "_per_item"][label]

    def test_ratio_and_tile_ordering_small_benchmark(self):
        nets = {"tiny": seed_weights(_tiny_net(n_in=32, n_out=16), seed=2)}
        report = run_benchmarks(networks=nets, batch=1)
        row = report.rows[0]
        for spec in ("F", "M"):
            for tile in (1024, 2048):
                lat_ratio = row.latency[f"{spec}-P-{tile}"] / row.latency[f"{spec}-I-{tile}"]
                assert lat_ratio == pytest.approx(1.67, abs=1e-9)
            assert row.latency[f"{spec}-I-1024"] <= row.latency[f"{spec}-I-2048"]
