"""Synthetic models and fixtures with fully seeded randomness.

The bench harness runs without any external checkpoints: chains stand in
for VGG-like models, diamond blocks for residual ones, and the quantized
weights fixture for trained weight arrays (bounded entropy, so the LZ
stage sees realistic compressibility instead of incompressible noise).
"""

from __future__ import annotations

import numpy as np

from .model import LayerSpec, ModelGraph, as_tensor


def _dense(rng: np.random.Generator, name: str, fan_in: int, units: int,
           weights: dict[str, np.ndarray], inputs: tuple[str, ...]) -> LayerSpec:
    scale = np.float32(1.0 / np.sqrt(fan_in))
    weights[f"{name}.kernel"] = as_tensor(rng.standard_normal((fan_in, units)) * scale)
    weights[f"{name}.bias"] = as_tensor(rng.standard_normal(units) * 0.1)
    return LayerSpec(name, "Dense", {"units": units},
                     (f"{name}.kernel", f"{name}.bias"), inputs)


def _conv(rng: np.random.Generator, name: str, cin: int, filters: int, kernel: int,
          stride: int, weights: dict[str, np.ndarray], inputs: tuple[str, ...]) -> LayerSpec:
    scale = np.float32(1.0 / np.sqrt(kernel * kernel * cin))
    weights[f"{name}.kernel"] = as_tensor(
        rng.standard_normal((kernel, kernel, cin, filters)) * scale)
    weights[f"{name}.bias"] = as_tensor(rng.standard_normal(filters) * 0.1)
    return LayerSpec(name, "Conv2D", {"kernel": kernel, "stride": stride, "filters": filters},
                     (f"{name}.kernel", f"{name}.bias"), inputs)


def make_chain(num_layers: int, width: int = 16, seed: int = 0) -> ModelGraph:
    """Pure Dense/ReLU chain with ``num_layers`` compute layers.

    Every inter-layer edge is a bridge, so any k <= num_layers splits.
    """
    if num_layers < 1:
        raise ValueError("num_layers must be >= 1")
    rng = np.random.default_rng(seed)
    weights: dict[str, np.ndarray] = {}
    layers = [LayerSpec("input", "Input", {"shape": (1, width)})]
    prev = "input"
    for i in range(num_layers):
        name = f"l{i:02d}"
        if i % 2 == 0:
            layers.append(_dense(rng, name, width, width, weights, (prev,)))
        else:
            layers.append(LayerSpec(name, "ReLU", {}, (), (prev,)))
        prev = name
    return ModelGraph(tuple(layers), weights, "input", prev)


def make_resnet(blocks: int, side: int = 8, channels: int = 4, seed: int = 0) -> ModelGraph:
    """Diamond-block model: Conv stem, residual blocks, pooled Dense head.

    Each block is branch-join (Conv3 / Conv1 -> Add -> ReLU), so edges
    inside a block are not bridges; cuts land between blocks.
    """
    if blocks < 1:
        raise ValueError("blocks must be >= 1")
    rng = np.random.default_rng(seed)
    weights: dict[str, np.ndarray] = {}
    layers = [LayerSpec("input", "Input", {"shape": (1, side, side, channels)})]
    prev = "input"
    layers.append(_conv(rng, "stem", channels, channels, 3, 1, weights, (prev,)))
    prev = "stem"
    for b in range(blocks):
        main = f"b{b}_conv3"
        skip = f"b{b}_conv1"
        layers.append(_conv(rng, main, channels, channels, 3, 1, weights, (prev,)))
        layers.append(_conv(rng, skip, channels, channels, 1, 1, weights, (prev,)))
        layers.append(LayerSpec(f"b{b}_add", "Add", {}, (), (main, skip)))
        layers.append(LayerSpec(f"b{b}_relu", "ReLU", {}, (), (f"b{b}_add",)))
        prev = f"b{b}_relu"
    layers.append(LayerSpec("gap", "GlobalAvgPool", {}, (), (prev,)))
    layers.append(_dense(rng, "head", channels, channels, weights, ("gap",)))
    return ModelGraph(tuple(layers), weights, "input", "head")


def random_model(seed: int, max_layers: int = 24) -> ModelGraph:
    """Seeded random model: a Dense chain, a Conv chain, or a diamond stack."""
    rng = np.random.default_rng(seed)
    style = rng.integers(0, 3)
    if style == 0:
        n = int(rng.integers(1, max_layers + 1))
        width = int(rng.integers(2, 24))
        return make_chain(n, width=width, seed=seed)
    if style == 1:
        return _random_conv_chain(rng, max_layers)
    max_blocks = max(1, (max_layers - 4) // 4)
    blocks = int(rng.integers(1, max_blocks + 1))
    side = int(rng.integers(4, 10))
    channels = int(rng.integers(1, 6))
    return make_resnet(blocks, side=side, channels=channels, seed=seed)


def _random_conv_chain(rng: np.random.Generator, max_layers: int) -> ModelGraph:
    weights: dict[str, np.ndarray] = {}
    side = int(rng.integers(5, 12))
    channels = int(rng.integers(1, 5))
    layers = [LayerSpec("input", "Input", {"shape": (1, side, side, channels)})]
    prev, shape = "input", (1, side, side, channels)
    n = int(rng.integers(2, max_layers + 1))
    for i in range(n - 1):
        name = f"l{i:02d}"
        rank4 = len(shape) == 4
        pick = rng.integers(0, 4) if rank4 else rng.integers(4, 6)
        if rank4 and pick == 0:
            filters = int(rng.integers(1, 7))
            stride = int(rng.integers(1, 3))
            k = int(rng.choice([1, 3]))
            layers.append(_conv(rng, name, shape[3], filters, k, stride, weights, (prev,)))
            shape = (1, -(-shape[1] // stride), -(-shape[2] // stride), filters)
        elif rank4 and pick == 1 and min(shape[1], shape[2]) >= 2:
            layers.append(LayerSpec(name, "MaxPool2D", {"pool": 2, "stride": 2}, (), (prev,)))
            shape = (1, -(-shape[1] // 2), -(-shape[2] // 2), shape[3])
        elif rank4 and pick == 2:
            layers.append(LayerSpec(name, "ReLU", {}, (), (prev,)))
        elif rank4:
            layers.append(LayerSpec(name, "Flatten", {}, (), (prev,)))
            shape = (1, shape[1] * shape[2] * shape[3])
        elif pick == 4:
            units = int(rng.integers(1, 17))
            layers.append(_dense(rng, name, shape[1], units, weights, (prev,)))
            shape = (1, units)
        else:
            layers.append(LayerSpec(name, "ReLU", {}, (), (prev,)))
        prev = name
    return ModelGraph(tuple(layers), weights, "input", prev)


def random_input(graph: ModelGraph, rng: np.random.Generator) -> np.ndarray:
    return as_tensor(rng.standard_normal(graph.input_shape()))


# --- quantized weights fixture ---------------------------------------------

FIXTURE_LEVELS = 256
# state machine mixing smooth runs with fresh jumps; tuned so the LZ stage
# sees both long matches and literal-heavy stretches
_P_REPEAT = 0.45
_P_STEP = 0.25


def quantized_fixture(n_elements: int, seed: int = 2024) -> np.ndarray:
    """1-D tensor whose values come from 256 seeded quantization levels.

    A correlated index walk (repeat / +-1 step / uniform jump, wrapping
    mod 256) gives the data bounded entropy: compressible, but far from
    degenerate.
    """
    rng = np.random.default_rng(seed)
    levels = np.sort(as_tensor(rng.standard_normal(FIXTURE_LEVELS)))
    moves = rng.random(n_elements)
    delta = np.where((moves >= _P_REPEAT) & (moves < _P_REPEAT + _P_STEP),
                     rng.integers(-1, 2, size=n_elements), 0)
    is_jump = moves >= _P_REPEAT + _P_STEP
    is_jump[0] = True
    delta[is_jump] = 0
    # index = (value at last jump) + (step sum since that jump), mod 256
    jump_targets = rng.integers(0, FIXTURE_LEVELS, size=n_elements)
    pos = np.arange(n_elements)
    last_jump = np.maximum.accumulate(np.where(is_jump, pos, -1))
    walked = np.cumsum(delta)
    idx = (jump_targets[last_jump] + walked - walked[last_jump]) % FIXTURE_LEVELS
    return levels[idx]
