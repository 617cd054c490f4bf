"""Small ReLU MLP classifier with manual backprop and cosine-annealed SGD.

Layers are named ``layer1 .. layer{L-1}`` and ``head`` for the output layer.
Each layer owns two tensors in the flat parameter vector, ``<layer>.weight``
with shape ``(fan_in, fan_out)`` followed by ``<layer>.bias``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor_core import ParameterVector, concat


@dataclass(frozen=True)
class ModelSpec:
    layer_dims: tuple[int, ...]
    block_spec: tuple[tuple[str, tuple[str, ...]], ...] = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        object.__setattr__(
            self, "block_spec", tuple((str(b), tuple(layers)) for b, layers in self.block_spec)
        )
        dims = self.layer_dims
        if len(dims) < 3:
            raise ValueError("need an input, at least one hidden layer and an output layer")
        if any(d < 1 for d in dims):
            raise ValueError(f"layer dims must be positive: {dims}")
        if dims[-1] < 2:
            raise ValueError("need at least 2 classes")
        self.blocks()  # validates block_spec

    @property
    def layer_names(self) -> list[str]:
        n = len(self.layer_dims) - 1
        return [f"layer{i + 1}" for i in range(n - 1)] + ["head"]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    def tensor_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        for name, fan_in, fan_out in zip(self.layer_names, self.layer_dims[:-1], self.layer_dims[1:]):
            shapes.append((f"{name}.weight", (fan_in, fan_out)))
            shapes.append((f"{name}.bias", (fan_out,)))
        return shapes

    def blocks(self) -> list[tuple[str, list[str]]]:
        """Blocks in model order; layers not named in block_spec become singletons."""
        names = self.layer_names
        position = {n: i for i, n in enumerate(names)}
        owner: dict[str, str] = {}
        declared = []
        for block_name, layers in self.block_spec:
            if not layers:
                raise ValueError(f"block {block_name!r} is empty")
            idx = []
            for layer in layers:
                if layer not in position:
                    raise ValueError(f"block {block_name!r} names unknown layer {layer!r}")
                if layer in owner:
                    raise ValueError(f"layer {layer!r} is in blocks {owner[layer]!r} and {block_name!r}")
                owner[layer] = block_name
                idx.append(position[layer])
            idx.sort()
            if idx != list(range(idx[0], idx[0] + len(idx))):
                raise ValueError(f"block {block_name!r} is not a run of consecutive layers")
            declared.append((idx[0], block_name, [names[i] for i in idx]))
        block_names = [b for _, b, _ in declared]
        for layer in names:
            if layer not in owner:
                if layer in block_names:
                    raise ValueError(f"singleton block {layer!r} collides with a declared block name")
                declared.append((position[layer], layer, [layer]))
        if len(set(b for _, b, _ in declared)) != len(declared):
            raise ValueError("duplicate block names")
        declared.sort(key=lambda t: t[0])
        return [(b, layers) for _, b, layers in declared]


@dataclass(frozen=True)
class Model:
    spec: ModelSpec
    params: ParameterVector

    def __post_init__(self):
        expected = [(n, s) for n, s in self.spec.tensor_shapes()]
        got = [(e.name, e.shape) for e in self.params.layout]
        if expected != got:
            raise ValueError("params layout does not match spec")

    def with_params(self, params: ParameterVector) -> "Model":
        return Model(self.spec, params)


@dataclass(frozen=True)
class LrSchedule:
    initial_lr: float = 0.1
    total_epochs: int = 1
    min_lr: float = 0.0

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be positive")
        if not 0 <= self.min_lr <= self.initial_lr:
            raise ValueError("need 0 <= min_lr <= initial_lr")


def lr_at(schedule: LrSchedule, epoch_index: int) -> float:
    if not 0 <= epoch_index <= schedule.total_epochs:
        raise ValueError(f"epoch index {epoch_index} outside [0, {schedule.total_epochs}]")
    cos = math.cos(math.pi * epoch_index / schedule.total_epochs)
    return schedule.min_lr + 0.5 * (schedule.initial_lr - schedule.min_lr) * (1.0 + cos)


def init_model(spec: ModelSpec) -> Model:
    rng = np.random.default_rng(spec.seed)
    parts = []
    for name, shape in spec.tensor_shapes():
        if name.endswith(".weight"):
            bound = 1.0 / math.sqrt(shape[0])
            parts.append(rng.uniform(-bound, bound, size=shape).reshape(-1))
        else:
            parts.append(np.zeros(shape))
    params = ParameterVector.from_shapes(np.concatenate(parts), spec.tensor_shapes())
    return Model(spec, params)


def _unpack(model: Model) -> list[tuple[np.ndarray, np.ndarray]]:
    p = model.params
    return [(p.layer(f"{n}.weight"), p.layer(f"{n}.bias")) for n in model.spec.layer_names]


def _check_features(model: Model, x: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[1] != model.spec.layer_dims[0]:
        raise ValueError(
            f"feature dimension mismatch: model expects {model.spec.layer_dims[0]}, got {x.shape}"
        )


def _forward(layers, x):
    acts = [x]
    h = x
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
        acts.append(h)
    return acts


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def forward(model: Model, features, labels) -> tuple[float, float]:
    """Mean softmax cross-entropy and argmax accuracy on a batch."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    _check_features(model, x)
    if y.shape != (x.shape[0],):
        raise ValueError("labels must be one per sample")
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    logits = _forward(_unpack(model), x)[-1]
    logp = _log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(len(y)), y]))
    acc = float(np.mean(np.argmax(logits, axis=1) == y))
    return loss, acc


def loss_and_grad(model: Model, features, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient as a flat array in params order."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    _check_features(model, x)
    layers = _unpack(model)
    acts = _forward(layers, x)
    logp = _log_softmax(acts[-1])
    m = x.shape[0]
    loss = -float(np.mean(logp[np.arange(m), y]))

    delta = np.exp(logp)
    delta[np.arange(m), y] -= 1.0
    delta /= m
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        h_in = acts[i]
        grads.append((h_in.T @ delta, delta.sum(axis=0)))
        if i > 0:
            delta = (delta @ w.T) * (acts[i] > 0)
    grads.reverse()
    flat = np.concatenate([np.concatenate([gw.reshape(-1), gb]) for gw, gb in grads])
    return loss, flat


def train_local(
    model: Model,
    features,
    labels,
    epochs: int,
    schedule: LrSchedule,
    batch_size: int = 64,
    epoch_offset: int = 0,
    seed: int = 0,
) -> Model:
    """Plain mini-batch SGD; epoch ``j`` uses ``lr_at(schedule, epoch_offset + j)``.

    The sample order of every epoch is drawn from ``np.random.default_rng(seed)``,
    so the result is a pure function of the arguments.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError("empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    _check_features(model, x)
    if epochs <= 0:
        return model
    rng = np.random.default_rng(seed)
    w = model.params.values.copy()
    layout = model.params.layout
    current = model
    for j in range(epochs):
        lr = lr_at(schedule, epoch_offset + j)
        order = rng.permutation(x.shape[0])
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            _, g = loss_and_grad(current, x[idx], y[idx])
            w = w - lr * g
            current = Model(model.spec, ParameterVector(w, layout))
    return current


def blocks_of(model: Model) -> list[tuple[str, ParameterVector]]:
    """The block partition of ``model.params``; concatenation restores params."""
    out = []
    for block_name, layers in model.spec.blocks():
        wanted = {f"{layer}.{kind}" for layer in layers for kind in ("weight", "bias")}
        entries = [e for e in model.params.layout if e.name in wanted]
        start = entries[0].offset
        stop = entries[-1].offset + entries[-1].length
        out.append(
            (
                block_name,
                ParameterVector.from_shapes(
                    model.params.values[start:stop], [(e.name, e.shape) for e in entries]
                ),
            )
        )
    return out


def block_ranges(spec: ModelSpec) -> dict[str, tuple[int, int]]:
    """Half-open index range of each block inside the flat parameter vector."""
    shapes = dict(spec.tensor_shapes())
    ranges = {}
    pos = 0
    for block_name, layers in spec.blocks():
        start = pos
        for layer in layers:
            for kind in ("weight", "bias"):
                pos += int(np.prod(shapes[f"{layer}.{kind}"]))
        ranges[block_name] = (start, pos)
    return ranges


def from_blocks(spec: ModelSpec, blocks: Sequence[tuple[str, ParameterVector]]) -> Model:
    return Model(spec, concat([v for _, v in blocks]))
