"""Pure-integer reference model for the supported network family.

This is the ground truth the array simulator is verified against, so the
semantics mirror what the hardware schedule computes, bit for bit:

- Each layer counts XNOR matches between input bit-planes and its binary
  weights: plane ``b`` of input ``x`` contributes ``2^b`` per match, so a
  weight of 1 passes ``x`` through and a weight of 0 contributes the
  bitwise complement ``(2^B - 1) - x``.
- Convolution windows always span all ``kx*ky*z`` taps; off-grid taps read
  zero-valued planes (matching the array's constant-zero cells), so padding
  columns participate in the count.
- Binarized layers compare the count -- times an optional per-unit integer
  scale -- against an unsigned threshold; batch-norm affine/shift chains
  fold into that threshold via :func:`fold_threshold`.
- Max pooling over sign bits is a window OR.
- Non-binarized (final) layers emit the raw counts.

Everything is deterministic: weights, scales, and thresholds come from one
seeded PCG64 generator per network.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .layout_compiler import ConvLayer, FcLayer, LayerSpec

__all__ = [
    "NetworkSpec",
    "NetworkWeights",
    "fold_threshold",
    "forward",
    "layer_output_shape",
    "load_weights",
    "make_preset",
    "network_from_json",
    "network_to_json",
    "preset_names",
    "save_weights",
    "seed_inputs",
    "seed_weights",
]


def layer_output_shape(layer: LayerSpec) -> tuple[int, ...]:
    """Activation shape a layer feeds forward (without the batch axis)."""
    if isinstance(layer, FcLayer):
        return (layer.n_out,)
    if layer.pool_window > 1:
        return (layer.pool_out_y, layer.pool_out_x, layer.filters)
    return (layer.out_y, layer.out_x, layer.filters)


def _layer_input_shape(layer: LayerSpec) -> tuple[int, ...]:
    if isinstance(layer, FcLayer):
        return (layer.n_in,)
    return (layer.in_y, layer.in_x, layer.in_z)


@dataclass(frozen=True)
class NetworkSpec:
    """An ordered stack of layers with validated shape chaining."""

    name: str
    layers: tuple[LayerSpec, ...]

    def __post_init__(self) -> None:
        # An empty stack is legal: it denotes a pure pass-through network
        # (useful for isolating array I/O costs from compute).
        for prev, nxt in zip(self.layers, self.layers[1:]):
            produced = layer_output_shape(prev)
            expected = _layer_input_shape(nxt)
            if int(np.prod(produced)) != int(np.prod(expected)) or (
                len(expected) == 3 and produced != expected
            ):
                raise ValueError(
                    f"layer {nxt.name!r} expects input {expected}, "
                    f"but {prev.name!r} produces {produced}"
                )

    @property
    def input_shape(self) -> tuple[int, ...]:
        return _layer_input_shape(self.layers[0])


@dataclass(frozen=True)
class NetworkWeights:
    """Binary weights plus per-unit thresholds/scales for one network."""

    spec: NetworkSpec
    weights: tuple[np.ndarray, ...]
    thetas: tuple[np.ndarray | None, ...]
    scales: tuple[np.ndarray | None, ...]

    def __post_init__(self) -> None:
        n = len(self.spec.layers)
        if not (len(self.weights) == len(self.thetas) == len(self.scales) == n):
            raise ValueError("per-layer arrays must match the layer count")


def fold_threshold(t: int, shift: int, n_eff: int) -> int:
    """Collapse `(2*pc - n_eff) shifted by 2^shift >= t` into `pc >= theta`.

    ``shift >= 0`` scales the signed value up; negative ``shift`` is a
    floor-rounding right shift.  Exact over the integers: for positive k,
    floor(v / k) >= t iff v >= t*k.  The result is clamped at zero; values
    above the count range simply never fire.
    """
    if shift >= 0:
        num = t + (n_eff << shift)
        den = 1 << (shift + 1)
    else:
        num = (t << -shift) + n_eff
        den = 2
    theta = -(-num // den)
    return max(theta, 0)


# --------------------------------------------------------------------------
# forward evaluation
# --------------------------------------------------------------------------

def _fc_counts(layer: FcLayer, x: np.ndarray, w: np.ndarray) -> np.ndarray:
    m = (1 << layer.input_bits) - 1
    w64 = w.astype(np.int64)
    base = (m * (1 - w64)).sum(axis=1)
    return base + x.reshape(x.shape[0], -1) @ (2 * w64 - 1).T


def _conv_counts(layer: ConvLayer, x: np.ndarray, w: np.ndarray) -> np.ndarray:
    m = (1 << layer.input_bits) - 1
    w64 = w.astype(np.int64)  # [filters, ky, kx, z]
    base = (m * (1 - w64)).sum(axis=(1, 2, 3))  # zero-padded taps included
    pm = 2 * w64 - 1
    pad = np.pad(
        x,
        ((0, 0), (layer.pad_y, layer.pad_y), (layer.pad_x, layer.pad_x), (0, 0)),
    )
    s = layer.stride
    oy, ox = layer.out_y, layer.out_x
    count = np.zeros((x.shape[0], oy, ox, layer.filters), dtype=np.int64)
    for fy in range(layer.ky):
        for fx in range(layer.kx):
            window = pad[:, fy : fy + s * (oy - 1) + 1 : s, fx : fx + s * (ox - 1) + 1 : s, :]
            count += np.einsum("byxz,fz->byxf", window, pm[:, fy, fx, :])
    return count + base.reshape(1, 1, 1, -1)


def _pool_or(layer: ConvLayer, bits: np.ndarray) -> np.ndarray:
    s = layer.pool_stride
    py, px = layer.pool_out_y, layer.pool_out_x
    out: np.ndarray | None = None
    for dy in range(layer.pool_ky):
        for dx in range(layer.pool_kx):
            window = bits[:, dy : dy + s * (py - 1) + 1 : s, dx : dx + s * (px - 1) + 1 : s, :]
            out = window.copy() if out is None else np.maximum(out, window)
    assert out is not None
    return out


def forward(
    weights: NetworkWeights, x: np.ndarray, collect: bool = False
) -> np.ndarray | list[np.ndarray]:
    """Run the network on a batch; optionally keep every layer's output."""
    spec = weights.spec
    cur = np.asarray(x, dtype=np.int64)
    acts: list[np.ndarray] = []
    for layer, w, theta, scale in zip(
        spec.layers, weights.weights, weights.thetas, weights.scales
    ):
        if isinstance(layer, FcLayer):
            count = _fc_counts(layer, cur, w)
        else:
            count = _conv_counts(layer, cur.reshape((-1,) + _layer_input_shape(layer)), w)
        if layer.binarize:
            assert theta is not None
            value = count * scale.astype(np.int64) if scale is not None else count
            out = (value >= theta.astype(np.int64)).astype(np.int64)
            if isinstance(layer, ConvLayer) and layer.pool_window > 1:
                out = _pool_or(layer, out)
        else:
            out = count
        acts.append(out)
        cur = out
    if collect:
        return acts
    return acts[-1] if acts else cur


# --------------------------------------------------------------------------
# seeding and serialization
# --------------------------------------------------------------------------

def _unit_count(layer: LayerSpec) -> int:
    return layer.n_out if isinstance(layer, FcLayer) else layer.filters


def seed_weights(spec: NetworkSpec, seed: int = 0) -> NetworkWeights:
    """Deterministic weights/scales/thresholds from one PCG64 stream."""
    rng = np.random.default_rng(seed)
    weights: list[np.ndarray] = []
    thetas: list[np.ndarray | None] = []
    scales: list[np.ndarray | None] = []
    for layer in spec.layers:
        if isinstance(layer, FcLayer):
            w = rng.integers(0, 2, size=(layer.n_out, layer.n_in), dtype=np.uint8)
        else:
            w = rng.integers(
                0, 2, size=(layer.filters, layer.ky, layer.kx, layer.in_z), dtype=np.uint8
            )
        weights.append(w)
        units = _unit_count(layer)
        if layer.binarize:
            if layer.scale_bits:
                scale = rng.integers(1, 1 << layer.scale_bits, size=units, dtype=np.int64)
            else:
                scale = None
            n_eff = layer.fan_in * ((1 << layer.input_bits) - 1)
            high = n_eff * (scale if scale is not None else 1) + 2
            theta = rng.integers(0, high, size=units, dtype=np.int64)
            thetas.append(theta)
            scales.append(scale)
        else:
            thetas.append(None)
            scales.append(None)
    return NetworkWeights(
        spec=spec, weights=tuple(weights), thetas=tuple(thetas), scales=tuple(scales)
    )


def seed_inputs(spec: NetworkSpec, batch: int, seed: int = 0) -> np.ndarray:
    """A deterministic batch of inputs shaped for the first layer."""
    rng = np.random.default_rng(seed)
    first = spec.layers[0]
    shape = (batch,) + _layer_input_shape(first)
    return rng.integers(0, 1 << first.input_bits, size=shape, dtype=np.int64)


def save_weights(weights: NetworkWeights, path: str | Path) -> None:
    arrays: dict[str, np.ndarray] = {}
    for i, (w, t, s) in enumerate(zip(weights.weights, weights.thetas, weights.scales)):
        arrays[f"w{i}"] = w
        if t is not None:
            arrays[f"t{i}"] = t
        if s is not None:
            arrays[f"s{i}"] = s
    np.savez_compressed(path, **arrays)


def load_weights(spec: NetworkSpec, path: str | Path) -> NetworkWeights:
    with np.load(path, allow_pickle=False) as data:
        weights = []
        thetas = []
        scales = []
        for i in range(len(spec.layers)):
            weights.append(data[f"w{i}"])
            thetas.append(data[f"t{i}"] if f"t{i}" in data else None)
            scales.append(data[f"s{i}"] if f"s{i}" in data else None)
    return NetworkWeights(
        spec=spec, weights=tuple(weights), thetas=tuple(thetas), scales=tuple(scales)
    )


def network_to_json(spec: NetworkSpec) -> str:
    layers = []
    for layer in spec.layers:
        entry = dataclasses.asdict(layer)
        entry["kind"] = "fc" if isinstance(layer, FcLayer) else "conv"
        layers.append(entry)
    return json.dumps({"name": spec.name, "layers": layers}, indent=2)


def network_from_json(text: str) -> NetworkSpec:
    data = json.loads(text)
    layers: list[LayerSpec] = []
    for entry in data["layers"]:
        entry = dict(entry)
        kind = entry.pop("kind")
        if kind == "fc":
            layers.append(FcLayer(**entry))
        elif kind == "conv":
            layers.append(ConvLayer(**entry))
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return NetworkSpec(name=data["name"], layers=tuple(layers))


# --------------------------------------------------------------------------
# presets
# --------------------------------------------------------------------------

def _fc_stack(name: str, dims: Sequence[int], first_bits: int) -> NetworkSpec:
    layers: list[LayerSpec] = []
    for i, (n_in, n_out) in enumerate(zip(dims, dims[1:])):
        last = i == len(dims) - 2
        layers.append(
            FcLayer(
                name=f"fc{i + 1}",
                n_in=n_in,
                n_out=n_out,
                input_bits=first_bits if i == 0 else 1,
                binarize=not last,
            )
        )
    return NetworkSpec(name=name, layers=tuple(layers))


def _cifar_stack(name: str, filters: Sequence[int], fc_dims: Sequence[int], final_bits: int) -> NetworkSpec:
    layers: list[LayerSpec] = []
    size, depth = 32, 3
    for i, f in enumerate(filters):
        pooled = i % 2 == 1
        layers.append(
            ConvLayer(
                name=f"conv{i + 1}",
                in_x=size,
                in_y=size,
                in_z=depth,
                filters=f,
                kx=3,
                ky=3,
                pad_x=1,
                pad_y=1,
                pool_kx=2 if pooled else 1,
                pool_ky=2 if pooled else 1,
                pool_stride=2 if pooled else 1,
                input_bits=8 if i == 0 else 1,
            )
        )
        depth = f
        if pooled:
            size //= 2
    dims = [size * size * depth] + list(fc_dims)
    for i, (n_in, n_out) in enumerate(zip(dims, dims[1:])):
        last = i == len(dims) - 2
        layers.append(
            FcLayer(
                name=f"fc{i + 1}",
                n_in=n_in,
                n_out=n_out,
                binarize=not last,
                out_bits=final_bits if last else 0,
            )
        )
    return NetworkSpec(name=name, layers=tuple(layers))


def _bionet() -> NetworkSpec:
    layers = (
        ConvLayer(
            name="conv1",
            in_x=100,
            in_y=4,
            in_z=1,
            filters=64,
            kx=3,
            ky=4,
            pad_x=1,
            pad_y=0,
            pool_kx=5,
            pool_ky=1,
            pool_stride=5,
        ),
        ConvLayer(
            name="conv2",
            in_x=20,
            in_y=1,
            in_z=64,
            filters=32,
            kx=5,
            ky=1,
            pad_x=2,
            pad_y=0,
            pool_kx=2,
            pool_ky=1,
            pool_stride=2,
        ),
        ConvLayer(
            name="conv3",
            in_x=10,
            in_y=1,
            in_z=32,
            filters=20,
            kx=4,
            ky=1,
            pad_x=2,
            pad_y=0,
            pool_kx=2,
            pool_ky=1,
            pool_stride=2,
        ),
        FcLayer(name="fc", n_in=100, n_out=40, binarize=False, out_bits=10),
    )
    return NetworkSpec(name="bionet", layers=layers)


def _alexnet() -> NetworkSpec:
    conv = [
        # (filters, k, stride, pad, pooled)
        (96, 11, 4, 0, True),
        (256, 5, 1, 2, True),
        (384, 3, 1, 1, False),
        (384, 3, 1, 1, False),
        (256, 3, 1, 1, True),
    ]
    layers: list[LayerSpec] = []
    size, depth = 227, 3
    for i, (f, k, s, p, pooled) in enumerate(conv):
        layer = ConvLayer(
            name=f"conv{i + 1}",
            in_x=size,
            in_y=size,
            in_z=depth,
            filters=f,
            kx=k,
            ky=k,
            stride=s,
            pad_x=p,
            pad_y=p,
            pool_kx=3 if pooled else 1,
            pool_ky=3 if pooled else 1,
            pool_stride=2 if pooled else 1,
            input_bits=8 if i == 0 else 1,
            scale_bits=8,
        )
        layers.append(layer)
        size = layer.pool_out_x if pooled else layer.out_x
        depth = f
    dims = [size * size * depth, 4096, 4096, 1000]
    for i, (n_in, n_out) in enumerate(zip(dims, dims[1:])):
        last = i == len(dims) - 2
        layers.append(
            FcLayer(
                name=f"fc{i + 6}",
                n_in=n_in,
                n_out=n_out,
                binarize=not last,
                scale_bits=0 if last else 8,
            )
        )
    return NetworkSpec(name="alexnet-xnor", layers=tuple(layers))


_PRESETS = {
    "fpbnn-mnist": lambda: _fc_stack("fpbnn-mnist", (784, 2048, 2048, 2048, 10), first_bits=8),
    "finn-mnist": lambda: _fc_stack("finn-mnist", (784, 1024, 1024, 1024, 10), first_bits=1),
    "fpbnn-cifar": lambda: _cifar_stack(
        "fpbnn-cifar", (128, 128, 256, 256, 512, 512), (1024, 1024, 10), final_bits=0
    ),
    "finn-cifar": lambda: _cifar_stack(
        "finn-cifar", (64, 64, 128, 128, 256, 256), (512, 512, 10), final_bits=16
    ),
    "bionet": _bionet,
    "alexnet-xnor": _alexnet,
}


def preset_names() -> tuple[str, ...]:
    return tuple(sorted(_PRESETS))


def make_preset(name: str) -> NetworkSpec:
    try:
        factory = _PRESETS[name]
    except KeyError:
        raise KeyError(
            f"unknown preset {name!r}; available: {', '.join(preset_names())}"
        ) from None
    return factory()
