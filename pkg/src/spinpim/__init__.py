"""spinpim: deterministic simulator for a spintronic in-memory BNN accelerator.

The package models a magnetic-tunnel-junction (MTJ) memory array whose rows
double as resistive logic gates, compiles binarized-neural-network layers
onto that substrate, and reports cycle-accurate latency/energy/memory costs
for single passes and pipelined deployments.

Module map:

- :mod:`spinpim.device_models`   MTJ device generations and write model.
- :mod:`spinpim.gate_engine`     Resistive-divider gate windows and margins.
- :mod:`spinpim.array_core`      Tiles, micro-ops, and the reference executor.
- :mod:`spinpim.bnn_kernels`     Row-local logic kernels (xnor, add, ...).
- :mod:`spinpim.layout_compiler` Layer-to-array placement and communication.
- :mod:`spinpim.sim_engine`      Vectorized execution, cost model, reports.
- :mod:`spinpim.reference_bnn`   Bit-exact integer reference networks.
- :mod:`spinpim.cli`             Command-line interface.
"""

from __future__ import annotations

__version__ = "0.1.0"

__all__ = ["__version__"]
