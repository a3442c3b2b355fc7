"""Command-line interface: margin tables, simulation runs, benchmark grids.

Four subcommands share one configuration type:

- ``margins``   gate drive-voltage windows and parasitic-failure thresholds;
- ``simulate``  one network through the array model, with optional pipeline
  staging and power-budget replication search, written as CSV+JSON reports;
- ``verify``    simulated outputs against the pure integer reference model;
- ``bench``     the preset benchmark grid across device generations and
  tile sizes.

Every report file embeds the full :class:`RunConfig` and the package
version, so a run is reproducible from its own output.  All randomness
derives from the single ``--seed`` value; environment variables are never
consulted.  Files are written atomically (temp file + rename).

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 internal invariant violation.
"""

from __future__ import annotations

import dataclasses
import functools
import io
import json
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import click
import numpy as np

from . import __version__
from .array_core import CellVariant, PeripheralModel
from .bnn_kernels import GateSet
from .device_models import MtjSpec, make_future_spec, make_modern_spec
from .gate_engine import (
    Gate,
    InfeasibleGateError,
    margins_table,
    parasitic_failure_threshold,
)
from .reference_bnn import (
    NetworkSpec,
    NetworkWeights,
    forward,
    load_weights,
    make_preset,
    network_from_json,
    preset_names,
    seed_inputs,
    seed_weights,
)
from .sim_engine import (
    CostReport,
    PipelineConfig,
    PipelineResult,
    SimConfig,
    default_peripheral,
    emit_report,
    run_benchmarks,
    run_pipeline,
    run_single_pass,
    scale_to_power_budget,
)

__all__ = [
    "EXIT_CONFIG",
    "EXIT_INTERNAL",
    "EXIT_OK",
    "EXIT_VERIFY",
    "RunConfig",
    "exit_code_for",
    "main",
]

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_INTERNAL = 3

_SPEC_FACTORIES = {"modern": make_modern_spec, "future": make_future_spec}

_FACTOR_KEYS = frozenset(
    f"{part}_{metric}"
    for part in ("row_activate", "gate_issue", "read", "write")
    for metric in ("latency", "energy")
)


# --------------------------------------------------------------------------
# run configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=True)
class RunConfig:
    """Everything that determines one simulation run's numbers.

    The dictionary form round-trips through JSON unchanged; reports embed it
    so any result can be reproduced from the file alone.  Execution-only
    knobs (worker counts) are deliberately not part of it.
    """

    network: str
    spec: str = "future"
    tile_rows: int = 1024
    peripheral: bool = True
    peripheral_factors: Mapping[str, float] | None = None
    gate_set: str = "restricted"
    cell: str = "1T"
    sigma: int = 1
    g: Mapping[str, int] | None = None
    batch: int = 1
    seed: int = 0
    pipeline: str | None = None
    budget_w: float | None = None
    out: str | None = None

    def to_json_dict(self) -> dict[str, Any]:
        data = dataclasses.asdict(self)
        data["peripheral_factors"] = (
            dict(self.peripheral_factors) if self.peripheral_factors is not None else None
        )
        data["g"] = dict(self.g) if self.g is not None else None
        return data

    @classmethod
    def from_json_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown run-config keys: {', '.join(unknown)}")
        return cls(**dict(data))

    def device_spec(self) -> MtjSpec:
        try:
            return _SPEC_FACTORIES[self.spec]()
        except KeyError:
            raise ValueError(
                f"unknown device generation {self.spec!r} "
                f"(expected one of: {', '.join(sorted(_SPEC_FACTORIES))})"
            ) from None

    def sim_config(self) -> SimConfig:
        mtj = self.device_spec()
        if not self.peripheral:
            peri = PeripheralModel.disabled()
        elif self.peripheral_factors is not None:
            bad = sorted(set(self.peripheral_factors) - _FACTOR_KEYS)
            if bad:
                raise ValueError(f"unknown peripheral factor keys: {', '.join(bad)}")
            peri = PeripheralModel.from_factors(mtj, self.peripheral_factors)
        else:
            peri = default_peripheral(mtj, self.tile_rows)
        try:
            variant = CellVariant(self.cell)
        except ValueError:
            raise ValueError(
                f"unknown cell variant {self.cell!r} (expected 1T or 3T)"
            ) from None
        try:
            gate_set = GateSet[self.gate_set.upper()]
        except KeyError:
            raise ValueError(
                f"unknown gate set {self.gate_set!r} (expected restricted or extended)"
            ) from None
        return SimConfig(
            mtj=mtj,
            tile_rows=self.tile_rows,
            cell_variant=variant,
            gate_set=gate_set,
            peripheral=peri,
            sigma=self.sigma,
            g=dict(self.g) if self.g else None,
        )

    def view_label(self) -> str:
        return f"{self.spec[:1].upper()}-{'P' if self.peripheral else 'I'}-{self.tile_rows}"


# --------------------------------------------------------------------------
# shared plumbing
# --------------------------------------------------------------------------

def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the documented process exit code."""
    if isinstance(exc, AssertionError):
        return EXIT_INTERNAL
    if isinstance(exc, (ValueError, KeyError, OSError, InfeasibleGateError)):
        return EXIT_CONFIG
    return EXIT_INTERNAL


def _guarded(fn):
    """Translate exceptions into diagnostics plus the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except Exception as exc:  # noqa: BLE001 - single translation point
            code = exit_code_for(exc)
            prefix = "internal error" if code == EXIT_INTERNAL else "error"
            message = str(exc) or type(exc).__name__
            click.echo(f"{prefix}: {message}", err=True)
            sys.exit(code)

    return wrapper


def _load_json(path: Path) -> Any:
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValueError(f"cannot read {path}: {exc.strerror or exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


def _write_atomic(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _provenance_header(config: Mapping[str, Any]) -> bytes:
    line = json.dumps(config, sort_keys=True)
    return f"# version={__version__}\n# config={line}\n".encode()


def _resolve_network(name: str) -> NetworkSpec:
    if name in preset_names():
        return make_preset(name)
    path = Path(name)
    if path.exists():
        return network_from_json(path.read_text())
    raise ValueError(
        f"unknown network {name!r}: not a preset "
        f"({', '.join(preset_names())}) and no such file"
    )


def _report_base(out: str) -> Path:
    base = Path(out)
    if base.suffix in (".json", ".csv"):
        base = base.with_suffix("")
    return base


# --------------------------------------------------------------------------
# command group
# --------------------------------------------------------------------------

@click.group()
@click.version_option(__version__, prog_name="spinpim")
def main() -> None:
    """Deterministic simulator for an in-memory binarized-network accelerator."""


# --------------------------------------------------------------------------
# margins
# --------------------------------------------------------------------------

_GATE_LABELS = {"NOT": "NOT", "NAND": "NAND", "NOR": "NOR", "IMAJ3": "IMAJ-3", "IMAJ5": "IMAJ-5"}


@main.command()
@click.option(
    "--spec", "spec_name", default="modern", show_default=True,
    help="device generation (modern or future)",
)
@click.option(
    "--parasitic", type=float, default=0.0, show_default=True,
    help="series parasitic resistance in ohms",
)
@_guarded
def margins(spec_name: str, parasitic: float) -> None:
    """Print drive-voltage windows for the five canonical gates."""
    if spec_name not in _SPEC_FACTORIES:
        raise ValueError(
            f"unknown device generation {spec_name!r} "
            f"(expected one of: {', '.join(sorted(_SPEC_FACTORIES))})"
        )
    spec = _SPEC_FACTORIES[spec_name]()
    click.echo(f"gate windows for {spec_name} devices at parasitic {parasitic:g} ohm")
    click.echo(
        f"{'gate':<8}{'signature_mv':>13}{'margin_mv':>11}{'threshold_ohm':>15}{'feasible':>10}"
    )
    broken: list[str] = []
    for window in margins_table(spec):
        label = _GATE_LABELS[window.gate.kind.name]
        threshold = parasitic_failure_threshold(spec, window.gate)
        usable = window.feasible and parasitic < threshold
        click.echo(
            f"{label:<8}{window.signature * 1e3:>13.1f}{window.margin * 1e3:>11.1f}"
            f"{threshold:>15.1f}{'yes' if usable else 'no':>10}"
        )
        if window.feasible and not window.v_high > window.v_low:
            broken.append(label)
    if broken:
        click.echo(
            f"internal error: gates marked feasible without a window: {', '.join(broken)}",
            err=True,
        )
        sys.exit(EXIT_INTERNAL)


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------

def _parse_g(entries: tuple[str, ...]) -> dict[str, int] | None:
    overrides: dict[str, int] = {}
    for entry in entries:
        name, sep, value = entry.partition("=")
        if not sep or not name or not value.lstrip("-").isdigit():
            raise ValueError(f"bad --g override {entry!r} (expected LAYER=ROWS)")
        overrides[name] = int(value)
    return overrides or None


def _pipeline_dict(
    result: PipelineResult, peripheral: bool, steps: tuple | None
) -> dict[str, Any]:
    block: dict[str, Any] = {
        "config": result.config.to_json_dict(),
        "stages": [
            {
                "name": stage.name,
                "layers": list(stage.layers),
                "replication": rep,
                "latency_s": stage.latency(peripheral),
                "energy_j": stage.energy(peripheral),
                "memory_bytes": stage.memory_bytes,
            }
            for stage, rep in zip(result.stages, result.config.replication)
        ],
        "initiation_interval_s": result.initiation_interval(peripheral),
        "throughput_per_s": result.throughput(peripheral),
        "energy_per_item_j": result.energy_per_item(peripheral),
        "power_w": result.power(peripheral),
        "memory_bytes": result.memory_bytes,
    }
    if steps is not None:
        block["scaling_steps"] = [
            {
                "replication": list(step.replication),
                "throughput_per_s": step.throughput,
                "power_w": step.power_w,
                "memory_bytes": result.with_replication(step.replication).memory_bytes,
            }
            for step in steps
        ]
    return block


def _run_simulate(cfg: RunConfig) -> tuple[CostReport, dict[str, Any] | None]:
    network = _resolve_network(cfg.network)
    weights = seed_weights(network, cfg.seed)
    sim = cfg.sim_config()
    label = f"{network.name}/{cfg.view_label()}"

    pipeline_cfg: PipelineConfig | None = None
    if cfg.pipeline is not None:
        pipeline_cfg = PipelineConfig.from_json_dict(_load_json(Path(cfg.pipeline)))

    if pipeline_cfg is not None or cfg.budget_w is not None:
        staged = run_pipeline(
            weights, sim, batch=cfg.batch, seed=cfg.seed, pipeline=pipeline_cfg
        )
        steps = None
        if cfg.budget_w is not None:
            outcome = scale_to_power_budget(staged, cfg.budget_w, peripheral=cfg.peripheral)
            steps = outcome.steps
            staged = outcome.final
        block = _pipeline_dict(staged, cfg.peripheral, steps)
        result = staged.source
        assert result is not None
    else:
        x = seed_inputs(network, cfg.batch, cfg.seed)
        result = run_single_pass(weights, x, sim)
        block = None
    return CostReport.from_pass(result, peripheral=cfg.peripheral, label=label), block


def _print_cost_summary(report: CostReport, block: dict[str, Any] | None) -> None:
    on = report.peripheral
    click.echo(
        f"run {report.label}  batch={report.batch}  peripheral={'on' if on else 'off'}"
    )
    click.echo(f"{'layer':<14}{'kind':<13}{'detail':<13}{'latency_s':>13}{'energy_j':>13}")
    for phase in report.phases:
        click.echo(
            f"{phase.layer:<14}{phase.kind.value:<13}{phase.detail:<13}"
            f"{phase.latency(on):>13.4e}{phase.energy(on):>13.4e}"
        )
    click.echo(
        f"{'total':<14}{'':<13}{'':<13}"
        f"{report.total_latency_s:>13.4e}{report.total_energy_j:>13.4e}"
    )
    click.echo(
        f"per item: latency {report.latency_per_item_s:.4e} s  "
        f"energy {report.energy_per_item_j:.4e} J  "
        f"throughput {report.throughput_per_s:.4e}/s  "
        f"power {report.power_w:.4e} W  memory {report.memory_bytes} bytes"
    )
    if block is not None:
        click.echo(
            f"pipeline: {len(block['stages'])} stages  "
            f"replication {'x'.join(str(s['replication']) for s in block['stages'])}  "
            f"throughput {block['throughput_per_s']:.4e}/s  "
            f"power {block['power_w']:.4e} W  memory {block['memory_bytes']} bytes"
        )


def _scaling_csv(block: dict[str, Any], header: bytes) -> bytes:
    import csv as _csv

    buf = io.StringIO()
    writer = _csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "replication", "throughput_per_s", "power_w", "memory_bytes"])
    for i, step in enumerate(block["scaling_steps"]):
        writer.writerow(
            [
                i,
                "x".join(str(r) for r in step["replication"]),
                repr(step["throughput_per_s"]),
                repr(step["power_w"]),
                step["memory_bytes"],
            ]
        )
    return header + buf.getvalue().encode()


def _write_simulate_reports(
    cfg: RunConfig, report: CostReport, block: dict[str, Any] | None
) -> None:
    assert cfg.out is not None
    base = _report_base(cfg.out)
    payload = json.loads(emit_report(report, "json").decode())
    payload["run_config"] = cfg.to_json_dict()
    if block is not None:
        payload["pipeline"] = block
    _write_atomic(
        base.with_suffix(".json"),
        (json.dumps(payload, sort_keys=True, indent=2) + "\n").encode(),
    )
    header = _provenance_header(cfg.to_json_dict())
    _write_atomic(base.with_suffix(".csv"), header + emit_report(report, "csv"))
    if block is not None and "scaling_steps" in block:
        _write_atomic(
            base.parent / f"{base.name}_scaling.csv", _scaling_csv(block, header)
        )


@main.command()
@click.option("--network", required=True, help="preset name or network JSON file")
@click.option("--spec", "spec_name", default="future", show_default=True,
              help="device generation (modern or future)")
@click.option("--tile", "tile_rows", type=int, default=1024, show_default=True,
              help="square tile dimension in rows")
@click.option("--peripheral", type=click.Choice(["on", "off"]), default="on",
              show_default=True, help="include peripheral-circuitry overheads")
@click.option("--gate-set", type=click.Choice(["restricted", "extended"]),
              default="restricted", show_default=True)
@click.option("--cell", type=click.Choice(["1T", "3T"]), default="1T", show_default=True)
@click.option("--sigma", type=int, default=1, show_default=True,
              help="wave-split factor for output parallelism")
@click.option("--g", "g_overrides", multiple=True, metavar="LAYER=ROWS",
              help="group-height override, repeatable")
@click.option("--batch", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--pipeline", "pipeline_path", type=click.Path(), default=None,
              help="pipeline stage file (JSON)")
@click.option("--budget", "budget_w", type=float, default=None,
              help="power budget in watts for the replication search")
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="report base path; .json and .csv are written")
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="run-config JSON file; its values override flags")
@_guarded
def simulate(
    network: str,
    spec_name: str,
    tile_rows: int,
    peripheral: str,
    gate_set: str,
    cell: str,
    sigma: int,
    g_overrides: tuple[str, ...],
    batch: int,
    seed: int,
    pipeline_path: str | None,
    budget_w: float | None,
    out_path: str | None,
    config_path: str | None,
) -> None:
    """Simulate one network and report latency/energy/memory costs."""
    cfg = RunConfig(
        network=network,
        spec=spec_name,
        tile_rows=tile_rows,
        peripheral=peripheral == "on",
        gate_set=gate_set,
        cell=cell,
        sigma=sigma,
        g=_parse_g(g_overrides),
        batch=batch,
        seed=seed,
        pipeline=pipeline_path,
        budget_w=budget_w,
        out=out_path,
    )
    if config_path is not None:
        overrides = _load_json(Path(config_path))
        if not isinstance(overrides, dict):
            raise ValueError(f"{config_path}: run config must be a JSON object")
        merged = cfg.to_json_dict()
        merged.update(overrides)
        cfg = RunConfig.from_json_dict(merged)

    report, block = _run_simulate(cfg)
    _print_cost_summary(report, block)
    if cfg.out is not None:
        _write_simulate_reports(cfg, report, block)
        base = _report_base(cfg.out)
        click.echo(f"wrote {base.with_suffix('.json')} and {base.with_suffix('.csv')}")


# --------------------------------------------------------------------------
# verify
# --------------------------------------------------------------------------

def _validate_blob(
    programmed: NetworkWeights, golden: NetworkWeights, path: str
) -> None:
    for i, (got, want) in enumerate(zip(programmed.weights, golden.weights)):
        if got.shape != want.shape:
            raise ValueError(
                f"{path}: array w{i} has shape {got.shape}, expected {want.shape}"
            )
        if not np.isin(got, (0, 1)).all():
            raise ValueError(f"{path}: array w{i} holds non-binary values")
    for kind, got_all, want_all in (
        ("t", programmed.thetas, golden.thetas),
        ("s", programmed.scales, golden.scales),
    ):
        for i, (got, want) in enumerate(zip(got_all, want_all)):
            if (got is None) != (want is None):
                raise ValueError(f"{path}: array {kind}{i} is missing")
            if got is not None and got.shape != want.shape:
                raise ValueError(
                    f"{path}: array {kind}{i} has shape {got.shape}, expected {want.shape}"
                )


def _dump_repro(
    benchmark: str,
    cfg: RunConfig,
    count: int,
    x: np.ndarray,
    got: np.ndarray,
    sim_layers: tuple[np.ndarray, ...],
    golden: NetworkWeights,
) -> None:
    want = forward(golden, x)
    want_flat = np.asarray(want).reshape(count, -1)
    item = int(np.nonzero((got != want_flat).any(axis=1))[0][0])
    ref_layers = forward(golden, x[item : item + 1], collect=True)
    layer_names = [layer.name for layer in golden.spec.layers]
    divergent = layer_names[-1]
    expected = want_flat[item]
    actual = got[item]
    for name, sim_out, ref_out in zip(layer_names, sim_layers, ref_layers):
        ref_flat = np.asarray(ref_out).reshape(-1)
        if not np.array_equal(sim_out[item], ref_flat):
            divergent, expected, actual = name, ref_flat, sim_out[item]
            break
    units = np.nonzero(actual != expected)[0]
    repro = {
        "benchmark": benchmark,
        "run_config": cfg.to_json_dict(),
        "count": count,
        "input_index": item,
        "first_divergent_layer": divergent,
        "differing_units": [int(u) for u in units[:16]],
        "expected": [int(expected[u]) for u in units[:16]],
        "actual": [int(actual[u]) for u in units[:16]],
        "input": x[item].reshape(-1).tolist(),
    }
    click.echo("verification failed: simulated outputs diverge from the reference")
    click.echo(json.dumps(repro, sort_keys=True, indent=2))


@main.command()
@click.option("--benchmark", required=True, help="benchmark preset name")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--count", type=int, default=100, show_default=True,
              help="number of seeded inputs to compare")
@click.option("--weights", "weights_path", type=click.Path(), default=None,
              help="programmed weight blob (.npz) for the array side")
@click.option("--spec", "spec_name", default="future", show_default=True)
@click.option("--tile", "tile_rows", type=int, default=1024, show_default=True)
@click.option("--peripheral", type=click.Choice(["on", "off"]), default="on",
              show_default=True)
@click.option("--cell", type=click.Choice(["1T", "3T"]), default="1T", show_default=True)
@click.option("--sigma", type=int, default=1, show_default=True)
@_guarded
def verify(
    benchmark: str,
    seed: int,
    count: int,
    weights_path: str | None,
    spec_name: str,
    tile_rows: int,
    peripheral: str,
    cell: str,
    sigma: int,
) -> None:
    """Check simulated outputs against the integer reference model."""
    if benchmark not in preset_names():
        raise ValueError(
            f"unknown benchmark preset {benchmark!r} "
            f"(expected one of: {', '.join(preset_names())})"
        )
    cfg = RunConfig(
        network=benchmark,
        spec=spec_name,
        tile_rows=tile_rows,
        peripheral=peripheral == "on",
        cell=cell,
        sigma=sigma,
        batch=count,
        seed=seed,
    )
    network = make_preset(benchmark)
    golden = seed_weights(network, seed)
    if count == 0:
        click.echo("warning: count=0 verifies nothing; trivial pass", err=True)
        click.echo(f"verified {benchmark}: 0 inputs")
        return
    programmed = golden
    if weights_path is not None:
        try:
            programmed = load_weights(network, weights_path)
        except Exception as exc:
            raise ValueError(f"cannot load weight blob {weights_path}: {exc}") from None
        _validate_blob(programmed, golden, weights_path)

    x = seed_inputs(network, count, seed)
    result = run_single_pass(programmed, x, cfg.sim_config())
    want = np.asarray(forward(golden, x)).reshape(count, -1)
    if np.array_equal(result.outputs, want):
        click.echo(
            f"verified {benchmark}: {count} inputs match the reference "
            f"on {cfg.view_label()}"
        )
        return
    _dump_repro(benchmark, cfg, count, x, result.outputs, result.layer_outputs, golden)
    sys.exit(EXIT_VERIFY)


# --------------------------------------------------------------------------
# bench
# --------------------------------------------------------------------------

@main.command()
@click.option("--names", default=None,
              help="comma-separated preset names (default: every preset)")
@click.option("--batch", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--workers", type=int, default=1, show_default=True,
              help="thread-pool width; never changes report bytes")
@click.option("--out", "out_path", required=True, type=click.Path(),
              help="report base path; .json and .csv are written")
@_guarded
def bench(
    names: str | None, batch: int, seed: int, workers: int, out_path: str
) -> None:
    """Run the benchmark grid and write plot-ready CSV+JSON reports."""
    if names is not None:
        name_list = tuple(n.strip() for n in names.split(",") if n.strip())
        unknown = [n for n in name_list if n not in preset_names()]
        if unknown:
            raise ValueError(f"unknown benchmark presets: {', '.join(unknown)}")
    else:
        name_list = preset_names()
    report = run_benchmarks(name_list, batch=batch, seed=seed, workers=workers)

    provenance = {"names": list(name_list), "batch": batch, "seed": seed}
    base = _report_base(out_path)
    payload = json.loads(emit_report(report, "json").decode())
    payload["run_config"] = provenance
    _write_atomic(
        base.with_suffix(".json"),
        (json.dumps(payload, sort_keys=True, indent=2) + "\n").encode(),
    )
    _write_atomic(
        base.with_suffix(".csv"),
        _provenance_header(provenance) + emit_report(report, "csv"),
    )
    click.echo(
        f"wrote {base.with_suffix('.json')} and {base.with_suffix('.csv')} "
        f"({len(report.rows)} benchmarks)"
    )


if __name__ == "__main__":
    main()
